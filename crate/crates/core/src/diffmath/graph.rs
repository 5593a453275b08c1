//! Reverse-mode tape over rank-2 tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a `[1, 1]` result walks the tape in reverse and
//! returns the gradient of that scalar with respect to every recorded node.
//! Nodes that do not depend on a parameter or a declared variable are marked
//! constant and skipped during the reverse sweep.

use std::collections::HashMap;

use crate::scalar::Scalar;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use super::DiffError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log { x: Var, floor: T },
    Clamp { x: Var, lo: T, hi: T },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        floored: Vec<bool>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Transpose(Var),
    GruStep {
        xw: Var,
        row: usize,
        h: Var,
        w: Var,
        b: Var,
        /// Reset, update, candidate and recurrent candidate input, `4 * H` values.
        cache: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(Var, ParamId)>,
    param_cache: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T: Scalar>(op: &'static str, tensors: &[&Tensor<T>]) -> DiffError {
    DiffError::Shape {
        op,
        shapes: tensors.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<&Tensor<T>, DiffError> {
        let t = &self.nodes[v.0].value;
        if t.is_matrix() {
            Ok(t)
        } else {
            Err(shape_err(op, &[t]))
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked; used to differentiate with respect to inputs.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Inserts (once per graph) the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.push((v, id));
        self.param_cache.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.matrix("matmul", a)?, self.matrix("matmul", b)?);
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", &[ta, tb]));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![T::zero(); n * m];
        matmul_acc(ta.data(), tb.data(), &mut out, n, k, m);
        let value = Tensor::from_rows(n, m, out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, DiffError> {
        let (ta, tb) = (self.matrix(name, a)?, self.matrix(name, b)?);
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, &[ta, tb]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// Adds a `[1, m]` row to every row of an `[n, m]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (ta, tr) = (self.matrix("add_row", a)?, self.matrix("add_row", row)?);
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", &[ta, tr]));
        }
        let mut out = ta.clone();
        let r = tr.data().to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Adds a `[1, 1]` node to every entry.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var, DiffError> {
        let (ta, ts) = (self.matrix("add_scalar", a)?, self.matrix("add_scalar", s)?);
        if ts.len() != 1 {
            return Err(shape_err("add_scalar", &[ta, ts]));
        }
        let c = ts.data()[0];
        let out = ta.map(|x| x + c);
        let ng = self.needs(a) || self.needs(s);
        Ok(self.push(out, Op::AddScalar(a, s), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(out, Op::Offset(a), ng)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -T::one());
        self.offset(neg, T::one())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let ng = self.needs(a);
        self.push(out, Op::Exp(a), ng)
    }

    /// Natural log of `max(a, floor)`; entries below the floor get zero gradient.
    pub fn log(&mut self, a: Var, floor: T) -> Var {
        let out = self.value(a).map(|x| x.max(floor).ln());
        let ng = self.needs(a);
        self.push(out, Op::Log { x: a, floor }, ng)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.needs(a);
        self.push(out, Op::Clamp { x: a, lo, hi }, ng)
    }

    /// Row-wise softmax with the row maximum subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.matrix("softmax", a)?;
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain * x + bias`.
    ///
    /// Rows whose variance falls below `var_floor` are divided by `sqrt(var_floor)`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, var_floor: T) -> Result<Var, DiffError> {
        let tx = self.matrix("layer_norm", x)?;
        let (tg, tb) = (self.matrix("layer_norm", gain)?, self.matrix("layer_norm", bias)?);
        let m = tx.cols();
        if tg.shape() != [1, m] || tb.shape() != [1, m] {
            return Err(shape_err("layer_norm", &[tx, tg, tb]));
        }
        let n = tx.rows();
        let mf = T::from_usize_lossy(m);
        let mut xhat = tx.clone();
        let mut inv_std = Vec::with_capacity(n);
        let mut floored = Vec::with_capacity(n);
        for r in 0..n {
            let row = xhat.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is_floored = var < var_floor;
            let s = T::one() / var.max(var_floor).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
            floored.push(is_floored);
        }
        let g = tg.data().to_vec();
        let b = tb.data().to_vec();
        let mut out = xhat.clone();
        for r in 0..n {
            for ((o, &gi), &bi) in out.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *o = *o * gi + bi;
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                floored,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Shape {
                op: "concat_cols",
                shapes: vec![],
            });
        }
        let rows = self.matrix("concat_cols", parts[0])?.rows();
        let mut total = 0;
        for &p in parts {
            let t = self.matrix("concat_cols", p)?;
            if t.rows() != rows {
                let shapes: Vec<&Tensor<T>> = parts.iter().map(|&q| self.value(q)).collect();
                return Err(shape_err("concat_cols", &shapes));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::from_rows(rows, total, out)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Shape {
                op: "concat_rows",
                shapes: vec![],
            });
        }
        let cols = self.matrix("concat_rows", parts[0])?.cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.matrix("concat_rows", p)?;
            if t.cols() != cols {
                let shapes: Vec<&Tensor<T>> = parts.iter().map(|&q| self.value(q)).collect();
                return Err(shape_err("concat_rows", &shapes));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let value = Tensor::from_rows(rows, cols, out)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let t = self.matrix("slice_rows", a)?;
        if len == 0 || start + len > t.rows() {
            return Err(shape_err("slice_rows", &[t]));
        }
        let c = t.cols();
        let value = Tensor::from_rows(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceRows { x: a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let t = self.matrix("slice_cols", a)?;
        if len == 0 || start + len > t.cols() {
            return Err(shape_err("slice_cols", &[t]));
        }
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::from_rows(rows, len, out)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceCols { x: a, start }, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.matrix("transpose", a)?;
        let (n, m) = (t.rows(), t.cols());
        let value = Tensor::from_fn(m, n, |r, c| t.get(c, r));
        let ng = self.needs(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    /// Sum of all entries as a `[1, 1]` node.
    /// One gated recurrent step with reset, update and candidate gates:
    ///
    /// ```text
    /// [ar | az | hn] = [x_r | x_z | 0] + h W + b   (x = row `row` of `xw`)
    /// r = sigmoid(ar), z = sigmoid(az)
    /// n = tanh(x_n + r * hn_part)
    /// h' = (1 - z) * n + z * h
    /// ```
    ///
    /// `xw` is `N x 3H` (input projection with its bias), `h` is `1 x H`,
    /// `w` is `H x 3H` and `b` is `1 x 3H`.
    pub fn gru_step(&mut self, xw: Var, row: usize, h: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let (txw, th) = (self.matrix("gru_step", xw)?, self.matrix("gru_step", h)?);
        let (tw, tb) = (self.matrix("gru_step", w)?, self.matrix("gru_step", b)?);
        let hd = th.cols();
        if th.rows() != 1
            || txw.cols() != 3 * hd
            || row >= txw.rows()
            || tw.shape() != [hd, 3 * hd]
            || tb.shape() != [1, 3 * hd]
        {
            return Err(shape_err("gru_step", &[txw, th, tw, tb]));
        }
        let mut hw = tb.data().to_vec();
        matmul_acc(th.data(), tw.data(), &mut hw, 1, hd, 3 * hd);
        let x = txw.row(row);
        let hv = th.data();
        let mut cache = vec![T::zero(); 4 * hd];
        let mut out = vec![T::zero(); hd];
        let sig = |v: T| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        };
        for j in 0..hd {
            let r = sig(x[j] + hw[j]);
            let z = sig(x[hd + j] + hw[hd + j]);
            let hn = hw[2 * hd + j];
            let n = (x[2 * hd + j] + r * hn).tanh();
            out[j] = n + z * (hv[j] - n);
            cache[j] = r;
            cache[hd + j] = z;
            cache[2 * hd + j] = n;
            cache[3 * hd + j] = hn;
        }
        let value = Tensor::from_rows(1, hd, out)?;
        let ng = self.needs(xw) || self.needs(h) || self.needs(w) || self.needs(b);
        Ok(self.push(value, Op::GruStep { xw, row, h, w, b, cache }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / T::from_usize_lossy(t.len());
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Reverse sweep from a `[1, 1]` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, DiffError> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(shape_err("backward", &[lt]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the parameter gradients from `grads` into the store's accumulators.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for &(v, id) in &self.params {
            if let Some(g) = grads.wrt(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }

    /// `backward` followed by `accumulate_param_grads`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<(), DiffError> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, store);
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    let ga = slot(grads, *a, ta);
                    matmul_bt_acc(g.data(), tb.data(), ga.data_mut(), n, k, m);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, tb);
                    matmul_at_acc(ta.data(), g.data(), gb.data_mut(), n, k, m);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        slot(grads, v, val(v)).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    slot(grads, *a, val(*a)).add_assign(g);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, val(*b));
                    for (o, &gv) in gb.data_mut().iter_mut().zip(g.data()) {
                        *o -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if needs(*a) {
                    let ga = slot(grads, *a, ta);
                    for ((o, &gv), &bv) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gv * bv;
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, tb);
                    for ((o, &gv), &av) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    slot(grads, *a, val(*a)).add_assign(g);
                }
                if needs(*row) {
                    let gr = slot(grads, *row, val(*row));
                    for r in 0..g.rows() {
                        for (o, &gv) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::AddScalar(a, s) => {
                if needs(*a) {
                    slot(grads, *a, val(*a)).add_assign(g);
                }
                if needs(*s) {
                    let total = g.sum();
                    slot(grads, *s, val(*s)).data_mut()[0] += total;
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let ga = slot(grads, *a, val(*a));
                    for (o, &gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += gv * *c;
                    }
                }
            }
            Op::Offset(a) => {
                if needs(*a) {
                    slot(grads, *a, val(*a)).add_assign(g);
                }
            }
            Op::Sigmoid(a) if needs(*a) => unary(grads, *a, val(*a), g, y, |_, yv| yv * (T::one() - yv)),
            Op::Tanh(a) if needs(*a) => unary(grads, *a, val(*a), g, y, |_, yv| T::one() - yv * yv),
            Op::Exp(a) if needs(*a) => unary(grads, *a, val(*a), g, y, |_, yv| yv),
            Op::Log { x, floor } if needs(*x) => {
                let f = *floor;
                unary(grads, *x, val(*x), g, y, |xv, _| {
                    if xv >= f {
                        T::one() / xv
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Clamp { x, lo, hi } if needs(*x) => {
                let (lo, hi) = (*lo, *hi);
                unary(grads, *x, val(*x), g, y, |xv, _| {
                    if xv >= lo && xv <= hi {
                        T::one()
                    } else {
                        T::zero()
                    }
                })
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let ga = slot(grads, *a, val(*a));
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                floored,
            } => {
                let m = xhat.cols();
                let mf = T::from_usize_lossy(m);
                if needs(*gain) {
                    let gg = slot(grads, *gain, val(*gain));
                    for r in 0..g.rows() {
                        for ((o, &gv), &xh) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gv * xh;
                        }
                    }
                }
                if needs(*bias) {
                    let gb = slot(grads, *bias, val(*bias));
                    for r in 0..g.rows() {
                        for (o, &gv) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
                if needs(*x) {
                    let gain_v = val(*gain).data().to_vec();
                    let gx = slot(grads, *x, val(*x));
                    let mut dxhat = vec![T::zero(); m];
                    for r in 0..g.rows() {
                        for ((d, &gv), &gn) in dxhat.iter_mut().zip(g.row(r)).zip(&gain_v) {
                            *d = gv * gn;
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / mf;
                        let xr = xhat.row(r);
                        let mean_dx = if floored[r] {
                            T::zero()
                        } else {
                            dxhat.iter().zip(xr).map(|(&d, &xh)| d * xh).sum::<T>() / mf
                        };
                        let s = inv_std[r];
                        for ((o, &d), &xh) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xr) {
                            *o += s * (d - mean_d - xh * mean_dx);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let w = tp.cols();
                    if needs(p) {
                        let gp = slot(grads, p, tp);
                        for r in 0..g.rows() {
                            for (o, &gv) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                                *o += gv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = val(p);
                    let n = tp.len();
                    if needs(p) {
                        let gp = slot(grads, p, tp);
                        for (o, &gv) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *o += gv;
                        }
                    }
                    offset += tp.rows() * cols;
                }
            }
            Op::GruStep { xw, row, h, w, b, cache } => {
                let th = val(*h);
                let hd = th.cols();
                let (r, z) = (&cache[..hd], &cache[hd..2 * hd]);
                let (n, hn) = (&cache[2 * hd..3 * hd], &cache[3 * hd..]);
                let gv = g.data();
                let hv = th.data();
                // Gradients at the pre-activations: [ar | az | an] and at h W + b.
                let mut d_x = vec![T::zero(); 3 * hd];
                let mut d_hw = vec![T::zero(); 3 * hd];
                let mut d_h_direct = vec![T::zero(); hd];
                for j in 0..hd {
                    let dn = gv[j] * (T::one() - z[j]);
                    let dz = gv[j] * (hv[j] - n[j]);
                    d_h_direct[j] = gv[j] * z[j];
                    let daz = dz * z[j] * (T::one() - z[j]);
                    let dan = dn * (T::one() - n[j] * n[j]);
                    let dr = dan * hn[j];
                    let dar = dr * r[j] * (T::one() - r[j]);
                    d_x[j] = dar;
                    d_x[hd + j] = daz;
                    d_x[2 * hd + j] = dan;
                    d_hw[j] = dar;
                    d_hw[hd + j] = daz;
                    d_hw[2 * hd + j] = dan * r[j];
                }
                if needs(*xw) {
                    let txw = val(*xw);
                    let c = txw.cols();
                    let gx = slot(grads, *xw, txw);
                    for (o, &d) in gx.data_mut()[row * c..(row + 1) * c].iter_mut().zip(&d_x) {
                        *o += d;
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, val(*b));
                    for (o, &d) in gb.data_mut().iter_mut().zip(&d_hw) {
                        *o += d;
                    }
                }
                if needs(*w) {
                    let tw = val(*w);
                    let gw = slot(grads, *w, tw);
                    matmul_at_acc(hv, &d_hw, gw.data_mut(), 1, hd, 3 * hd);
                }
                if needs(*h) {
                    let tw = val(*w);
                    let gh = slot(grads, *h, th);
                    matmul_bt_acc(&d_hw, tw.data(), gh.data_mut(), 1, hd, 3 * hd);
                    for (o, &d) in gh.data_mut().iter_mut().zip(&d_h_direct) {
                        *o += d;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if needs(*x) {
                    let tx = val(*x);
                    let c = tx.cols();
                    let gx = slot(grads, *x, tx);
                    let dst = &mut gx.data_mut()[start * c..start * c + g.len()];
                    for (o, &gv) in dst.iter_mut().zip(g.data()) {
                        *o += gv;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let gx = slot(grads, *x, val(*x));
                    let w = g.cols();
                    for r in 0..g.rows() {
                        for (o, &gv) in gx.row_mut(r)[*start..*start + w].iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let ga = slot(grads, *a, val(*a));
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let cur = ga.get(c, r);
                            ga.set(c, r, cur + g.get(r, c));
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let gv = g.data()[0];
                    for o in slot(grads, *a, val(*a)).data_mut() {
                        *o += gv;
                    }
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let ta = val(*a);
                    let gv = g.data()[0] / T::from_usize_lossy(ta.len());
                    for o in slot(grads, *a, ta).data_mut() {
                        *o += gv;
                    }
                }
            }
            Op::Sigmoid(_) | Op::Tanh(_) | Op::Exp(_) | Op::Log { .. } | Op::Clamp { .. } => {}
        }
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], v: Var, like: &Tensor<T>) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

/// Elementwise unary backward: `dx += g * d(x, y)`.
fn unary<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    x: Var,
    tx: &Tensor<T>,
    g: &Tensor<T>,
    y: &Tensor<T>,
    d: impl Fn(T, T) -> T,
) {
    let gx = slot(grads, x, tx);
    for (((o, &gv), &xv), &yv) in gx.data_mut().iter_mut().zip(g.data()).zip(tx.data()).zip(y.data()) {
        *o += gv * d(xv, yv);
    }
}
