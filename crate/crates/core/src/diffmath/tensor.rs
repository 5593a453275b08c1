use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

use super::DiffError;

/// Dense row-major tensor with up to three axes.
///
/// Graph operations work on rank-2 tensors; scalars are `[1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, DiffError> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(DiffError::Rank { rank: shape.len() });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, DiffError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Builds a tensor from a closure over (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor reads as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: T) {
        for a in &mut self.data {
            *a = v;
        }
    }

    pub fn squared_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry in row `r`; the first index wins ties.
    pub fn row_argmax(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    /// Converts element type, e.g. f64 -> f32.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Products below this many multiply-adds skip the blocked kernel, whose
/// packing overhead dominates at recurrent-step sizes.
const SMALL_PRODUCT: usize = 8192;

/// `out[rows x m] += a[rows x k] * b[k x m]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], rows: usize, k: usize, m: usize) {
    if rows * k * m >= SMALL_PRODUCT {
        let (ki, mi) = (k as isize, m as isize);
        return T::gemm_acc(rows, k, m, (a, ki, 1), (b, mi, 1), (out, mi, 1));
    }
    for i in 0..rows {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &bv) in out_row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[rows x k] += g[rows x m] * b[k x m]^T`
pub(crate) fn matmul_bt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], rows: usize, k: usize, m: usize) {
    if rows * k * m >= SMALL_PRODUCT {
        let (ki, mi) = (k as isize, m as isize);
        return T::gemm_acc(rows, m, k, (g, mi, 1), (b, 1, mi), (out, ki, 1));
    }
    for i in 0..rows {
        let g_row = &g[i * m..(i + 1) * m];
        for (p, o) in out[i * k..(i + 1) * k].iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&gv, &bv) in g_row.iter().zip(&b[p * m..(p + 1) * m]) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// `out[k x m] += a[rows x k]^T * g[rows x m]`
pub(crate) fn matmul_at_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], rows: usize, k: usize, m: usize) {
    if rows * k * m >= SMALL_PRODUCT {
        let (ki, mi) = (k as isize, m as isize);
        return T::gemm_acc(k, rows, m, (a, 1, ki), (g, mi, 1), (out, mi, 1));
    }
    for i in 0..rows {
        let g_row = &g[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            for (o, &gv) in out[p * m..(p + 1) * m].iter_mut().zip(g_row) {
                *o += aip * gv;
            }
        }
    }
}
