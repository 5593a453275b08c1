//! First-order Markov prior over chord-label sequences.
//!
//! Besides the exact log-probability of a hard sequence, this module computes
//! the expected log-probability under a frame-factorized posterior `pi` with a
//! forward recursion:
//!
//! ```text
//! gamma_1(k)   = log phi_k
//! gamma_n(k)   = sum_j pi[n-1, j] * (gamma_{n-1}(j) + log phi_{j k})
//! E[log p(S)]  = sum_k pi[N, k] * gamma_N(k)
//! ```
//!
//! The recursion is recorded on a [`Graph`] so the prior can regularize the
//! classifier by gradient.

use std::fmt::Write as _;

use crate::diffmath::{DiffError, Graph, Tensor, Var, EPS_CLAMP};
use crate::distributions::{check_simplex, DistError};
use crate::scalar::Scalar;
use crate::vocab::ChordLabel;

/// Largest label-sequence space the enumeration oracle will walk.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

const STOCHASTIC_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MarkovError {
    #[error("need at least 2 states, got {0}")]
    TooFewStates(usize),
    #[error("self-transition probability {0} outside (0, 1)")]
    SelfProb(f64),
    #[error("{what} sums to {sum}, not 1")]
    NotStochastic { what: String, sum: f64 },
    #[error("{what} has a non-positive entry {value}")]
    NonPositive { what: String, value: f64 },
    #[error("state {state} out of range for {states} states")]
    State { state: usize, states: usize },
    #[error("posterior grid has {found} columns, model has {expected} states")]
    Width { expected: usize, found: usize },
    #[error("enumeration of {states}^{frames} sequences exceeds the limit")]
    TooLarge { states: usize, frames: usize },
    #[error("empty posterior grid")]
    Empty,
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Shape(#[from] DiffError),
}

/// Initial distribution and row-stochastic transition matrix; row = previous state.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel<T> {
    initial: Vec<T>,
    trans: Tensor<T>,
    log_initial: Tensor<T>,
    log_trans: Tensor<T>,
}

impl<T: Scalar> TransitionModel<T> {
    pub fn new(initial: Vec<T>, trans: Tensor<T>) -> Result<Self, MarkovError> {
        let k = initial.len();
        if k < 2 {
            return Err(MarkovError::TooFewStates(k));
        }
        if trans.shape() != [k, k] {
            return Err(MarkovError::Width {
                expected: k,
                found: trans.cols(),
            });
        }
        let check = |what: String, row: &[T]| -> Result<(), MarkovError> {
            if let Some(&v) = row.iter().find(|v| !(**v > T::zero())) {
                return Err(MarkovError::NonPositive {
                    what,
                    value: v.as_f64(),
                });
            }
            let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
            let tol = STOCHASTIC_TOLERANCE.max(T::epsilon().as_f64() * 4.0 * k as f64);
            if (sum - 1.0).abs() > tol {
                return Err(MarkovError::NotStochastic { what, sum });
            }
            Ok(())
        };
        check("initial distribution".into(), &initial)?;
        for r in 0..k {
            check(format!("transition row {r}"), trans.row(r))?;
        }
        let log_initial = Tensor::from_rows(1, k, initial.iter().map(|v| v.ln()).collect())?;
        let log_trans = trans.map(|v| v.ln());
        Ok(Self {
            initial,
            trans,
            log_initial,
            log_trans,
        })
    }

    /// Uniform start, `p_self` on the diagonal, `(1 - p_self) / (K - 1)` elsewhere.
    pub fn self_transition(states: usize, p_self: f64) -> Result<Self, MarkovError> {
        if states < 2 {
            return Err(MarkovError::TooFewStates(states));
        }
        if !(p_self > 0.0 && p_self < 1.0) {
            return Err(MarkovError::SelfProb(p_self));
        }
        let off = T::lit((1.0 - p_self) / (states - 1) as f64);
        let diag = T::lit(p_self);
        let trans = Tensor::from_fn(states, states, |r, c| if r == c { diag } else { off });
        let initial = vec![T::one() / T::from_usize_lossy(states); states];
        Self::new(initial, trans)
    }

    pub fn states(&self) -> usize {
        self.initial.len()
    }

    pub fn initial(&self) -> &[T] {
        &self.initial
    }

    pub fn trans(&self) -> &Tensor<T> {
        &self.trans
    }

    pub fn log_initial(&self, k: usize) -> T {
        self.log_initial.data()[k]
    }

    pub fn log_trans(&self, from: usize, to: usize) -> T {
        self.log_trans.get(from, to)
    }

    fn check_states(&self, seq: &[usize]) -> Result<(), MarkovError> {
        match seq.iter().find(|&&s| s >= self.states()) {
            Some(&state) => Err(MarkovError::State {
                state,
                states: self.states(),
            }),
            None => Ok(()),
        }
    }

    fn check_grid(&self, pi: &Tensor<T>) -> Result<(), MarkovError> {
        if pi.rows() == 0 || pi.is_empty() {
            return Err(MarkovError::Empty);
        }
        if pi.cols() != self.states() {
            return Err(MarkovError::Width {
                expected: self.states(),
                found: pi.cols(),
            });
        }
        Ok(())
    }

    /// Exact `log p(S)` of a hard label sequence.
    pub fn log_prob(&self, seq: &[usize]) -> Result<T, MarkovError> {
        self.check_states(seq)?;
        let Some(&first) = seq.first() else {
            return Ok(T::zero());
        };
        let mut total = self.log_initial(first);
        for w in seq.windows(2) {
            total += self.log_trans(w[0], w[1]);
        }
        Ok(total)
    }

    /// Records the forward recursion for `E_pi[log p(S)]` on `g`.
    pub fn expected_log_prob_graph(&self, g: &mut Graph<T>, pi: Var) -> Result<Var, MarkovError> {
        self.check_grid(g.value(pi))?;
        check_simplex(g.value(pi))?;
        let n = g.value(pi).rows();
        let log_trans = g.constant(self.log_trans.clone());
        let mut gamma = g.constant(self.log_initial.clone());
        for t in 1..n {
            let prev = g.slice_rows(pi, t - 1, 1)?;
            let weighted = g.mul(prev, gamma)?;
            let carried = g.sum(weighted);
            let step = g.matmul(prev, log_trans)?;
            gamma = g.add_scalar(step, carried)?;
        }
        let last = g.slice_rows(pi, n - 1, 1)?;
        let fin = g.mul(last, gamma)?;
        Ok(g.sum(fin))
    }

    /// `E_pi[log p(S)]` for a frame-factorized posterior grid.
    pub fn expected_log_prob(&self, pi: &Tensor<T>) -> Result<T, MarkovError> {
        let mut g = Graph::new();
        let p = g.constant(pi.clone());
        let v = self.expected_log_prob_graph(&mut g, p)?;
        Ok(g.scalar(v))
    }

    /// Exact enumeration of `sum_S prod_n pi[n, S_n] * log p(S)`.
    pub fn brute_force_expected_log_prob(&self, pi: &Tensor<T>) -> Result<T, MarkovError> {
        self.check_grid(pi)?;
        let (n, k) = (pi.rows(), self.states());
        let too_large = MarkovError::TooLarge { states: k, frames: n };
        let total = (0..n).try_fold(1usize, |acc, _| acc.checked_mul(k).filter(|&v| v <= BRUTE_FORCE_LIMIT));
        let total = total.ok_or(too_large)?;
        let mut seq = vec![0usize; n];
        let mut acc = T::zero();
        for code in 0..total {
            let mut c = code;
            for s in seq.iter_mut().rev() {
                *s = c % k;
                c /= k;
            }
            let weight = seq.iter().enumerate().fold(T::one(), |w, (t, &s)| w * pi.get(t, s));
            acc += weight * self.log_prob(&seq)?;
        }
        Ok(acc)
    }

    /// MAP path of `sum_n log pi[n, s_n] + log p(S)`. Ties go to the smaller
    /// label index at every backpointer and at the final frame.
    pub fn viterbi(&self, pi: &Tensor<T>) -> Result<Vec<usize>, MarkovError> {
        self.check_grid(pi)?;
        let (n, k) = (pi.rows(), self.states());
        let floor = T::lit(EPS_CLAMP);
        let emit = |t: usize, s: usize| pi.get(t, s).max(floor).ln();
        let mut score: Vec<T> = (0..k).map(|s| self.log_initial(s) + emit(0, s)).collect();
        let mut back = vec![0usize; n * k];
        let mut next = vec![T::zero(); k];
        for t in 1..n {
            for (s, slot) in next.iter_mut().enumerate() {
                let mut best = 0;
                let mut best_v = score[0] + self.log_trans(0, s);
                for (j, &sc) in score.iter().enumerate().skip(1) {
                    let v = sc + self.log_trans(j, s);
                    if beats(v, best_v) {
                        best_v = v;
                        best = j;
                    }
                }
                back[t * k + s] = best;
                *slot = best_v + emit(t, s);
            }
            std::mem::swap(&mut score, &mut next);
        }
        let mut last = 0;
        for s in 1..k {
            if beats(score[s], score[last]) {
                last = s;
            }
        }
        let mut path = vec![0usize; n];
        path[n - 1] = last;
        for t in (1..n).rev() {
            path[t - 1] = back[t * k + path[t]];
        }
        Ok(path)
    }

    /// Objective maximized by [`TransitionModel::viterbi`] for a given path.
    pub fn path_score(&self, pi: &Tensor<T>, path: &[usize]) -> Result<T, MarkovError> {
        self.check_grid(pi)?;
        let floor = T::lit(EPS_CLAMP);
        let emit: T = path.iter().enumerate().map(|(t, &s)| pi.get(t, s).max(floor).ln()).sum();
        Ok(emit + self.log_prob(path)?)
    }

    /// CSV with header `from,initial,<label...>`; rows are previous states.
    /// Uses chord names when the model spans the full vocabulary.
    pub fn to_csv(&self) -> String {
        let k = self.states();
        let name = |i: usize| -> String {
            if k == crate::vocab::NUM_LABELS {
                ChordLabel::from_index(i).map(|l| l.to_string()).unwrap_or_else(|_| i.to_string())
            } else {
                i.to_string()
            }
        };
        let mut s = String::from("from,initial");
        for c in 0..k {
            let _ = write!(s, ",{}", name(c));
        }
        s.push('\n');
        for r in 0..k {
            let _ = write!(s, "{},{}", name(r), self.initial[r]);
            for c in 0..k {
                let _ = write!(s, ",{}", self.trans.get(r, c));
            }
            s.push('\n');
        }
        s
    }
}

/// `a > b` by more than rounding noise. Scores of equally good paths can
/// differ in their last bits depending on summation order; those count as
/// ties so the smaller index wins.
fn beats<T: Scalar>(a: T, b: T) -> bool {
    a > b + T::lit(64.0) * T::epsilon() * b.abs().max(T::one())
}

/// Number of label changes along a sequence.
pub fn transition_count(seq: &[usize]) -> usize {
    seq.windows(2).filter(|w| w[0] != w[1]).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::RngState;

    fn random_grid(n: usize, k: usize, rng: &mut RngState) -> Tensor<f64> {
        let mut t = Tensor::from_fn(n, k, |_, _| rng.uniform(0.05, 1.0));
        for r in 0..n {
            let s: f64 = t.row(r).iter().sum();
            t.row_mut(r).iter_mut().for_each(|v| *v /= s);
        }
        t
    }

    fn random_model(k: usize, rng: &mut RngState) -> TransitionModel<f64> {
        let init = random_grid(1, k, rng).into_data();
        let trans = random_grid(k, k, rng);
        TransitionModel::new(init, trans).unwrap()
    }

    fn one_hot(seq: &[usize], k: usize) -> Tensor<f64> {
        Tensor::from_fn(seq.len(), k, |r, c| if seq[r] == c { 1.0 } else { 0.0 })
    }

    #[test]
    fn self_transition_model() {
        let m = TransitionModel::<f64>::self_transition(97, 0.9).unwrap();
        assert!((m.trans().get(0, 1) - 1.0417e-3).abs() < 1e-7);
        assert_eq!(m.trans().get(5, 5), 0.9);
        for r in 0..97 {
            assert!((m.trans().row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let u = TransitionModel::<f64>::self_transition(4, 0.25).unwrap();
        assert!(u.trans().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(TransitionModel::<f64>::self_transition(4, 1.0).is_err());
        assert!(TransitionModel::<f64>::self_transition(4, 0.0).is_err());
        assert!(TransitionModel::<f64>::self_transition(1, 0.5).is_err());
    }

    #[test]
    fn log_prob_examples() {
        let m = TransitionModel::<f64>::self_transition(97, 0.9).unwrap();
        assert!((m.log_prob(&[5]).unwrap() - (1.0f64 / 97.0).ln()).abs() < 1e-12);
        let two = m.log_prob(&[3, 3]).unwrap();
        assert!((two - ((1.0f64 / 97.0).ln() + 0.9f64.ln())).abs() < 1e-12);
        assert!(m.log_prob(&[97]).is_err());
    }

    #[test]
    fn log_prob_matches_product() {
        let mut rng = RngState::new(4);
        let m = random_model(5, &mut rng);
        let seq: Vec<usize> = (0..9).map(|_| rng.below(5)).collect();
        let mut p = m.initial()[seq[0]];
        for w in seq.windows(2) {
            p *= m.trans().get(w[0], w[1]);
        }
        assert!((m.log_prob(&seq).unwrap() - p.ln()).abs() < 1e-12);
    }

    #[test]
    fn expectation_collapses_on_one_hot() {
        let mut rng = RngState::new(6);
        let m = random_model(4, &mut rng);
        let seq = [0, 3, 3, 1, 2, 2];
        let e = m.expected_log_prob(&one_hot(&seq, 4)).unwrap();
        assert!((e - m.log_prob(&seq).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn expectation_under_uniform_transitions() {
        let mut rng = RngState::new(7);
        let m = TransitionModel::<f64>::self_transition(6, 1.0 / 6.0).unwrap();
        let pi = random_grid(8, 6, &mut rng);
        let e = m.expected_log_prob(&pi).unwrap();
        assert!((e + 8.0 * 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn expectation_matches_enumeration_k3_n4() {
        let mut rng = RngState::new(12);
        let m = random_model(3, &mut rng);
        let pi = random_grid(4, 3, &mut rng);
        let fwd = m.expected_log_prob(&pi).unwrap();
        let brute = m.brute_force_expected_log_prob(&pi).unwrap();
        assert!((fwd - brute).abs() < 1e-10, "{fwd} vs {brute}");
    }

    #[test]
    fn brute_force_edge_cases() {
        let mut rng = RngState::new(13);
        let m = random_model(3, &mut rng);
        let pi = random_grid(1, 3, &mut rng);
        let direct: f64 = (0..3).map(|k| pi.get(0, k) * m.initial()[k].ln()).sum();
        assert!((m.brute_force_expected_log_prob(&pi).unwrap() - direct).abs() < 1e-14);
        let seq = [2, 0, 0, 1];
        let e = m.brute_force_expected_log_prob(&one_hot(&seq, 3)).unwrap();
        assert!((e - m.log_prob(&seq).unwrap()).abs() < 1e-12);
        let big = Tensor::full(&[20, 3], 1.0 / 3.0);
        assert!(matches!(
            m.brute_force_expected_log_prob(&big),
            Err(MarkovError::TooLarge { .. })
        ));
    }

    #[test]
    fn viterbi_with_uniform_transitions_is_framewise_argmax() {
        let m = TransitionModel::<f64>::self_transition(4, 0.25).unwrap();
        let pi = Tensor::from_rows(3, 4, vec![0.1, 0.6, 0.2, 0.1, 0.3, 0.3, 0.2, 0.2, 0.1, 0.1, 0.1, 0.7]).unwrap();
        assert_eq!(m.viterbi(&pi).unwrap(), vec![1, 0, 3]);
    }

    #[test]
    fn viterbi_absorbs_a_short_blip() {
        let k = 97;
        let m = TransitionModel::<f64>::self_transition(k, 0.9).unwrap();
        let (a, b) = (4, 9);
        let n = 11;
        let mut pi = Tensor::zeros(&[n, k]);
        for t in 0..n {
            if t == 5 {
                pi.set(t, b, 0.55);
                pi.set(t, a, 0.45);
            } else {
                pi.set(t, a, 0.45);
                let rest = 0.55 / (k - 1) as f64;
                for s in 0..k {
                    if s != a {
                        pi.set(t, s, rest);
                    }
                }
            }
        }
        let path = m.viterbi(&pi).unwrap();
        assert!(path.iter().all(|&s| s == a), "{path:?}");
        let mut blip = vec![a; n];
        blip[5] = b;
        assert!(m.path_score(&pi, &path).unwrap() > m.path_score(&pi, &blip).unwrap());
    }

    #[test]
    fn csv_dump_has_full_table() {
        let m = TransitionModel::<f64>::self_transition(97, 0.9).unwrap();
        let csv = m.to_csv();
        assert_eq!(csv.lines().count(), 98);
        assert!(csv.starts_with("from,initial,C:maj,"));
    }

    #[test]
    fn transition_counts() {
        assert_eq!(transition_count(&[1, 1, 2, 2, 1]), 2);
        assert_eq!(transition_count(&[]), 0);
    }
}
