//! Property tests for the label prior: the forward recursion against two
//! independent formulas, and Viterbi against exhaustive search.

use chordvae::diffmath::{RngState, Tensor};
use chordvae::markov::{transition_count, TransitionModel};
use proptest::prelude::*;

fn random_grid(rows: usize, cols: usize, rng: &mut RngState) -> Tensor<f64> {
    let mut t = Tensor::from_fn(rows, cols, |_, _| rng.uniform(0.01, 1.0));
    for r in 0..rows {
        let s: f64 = t.row(r).iter().sum();
        t.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    t
}

const DYADIC: [[f64; 4]; 3] = [[0.25; 4], [0.5, 0.25, 0.125, 0.125], [0.5, 0.5, 0.0, 0.0]];

/// Four-state rows drawn from a few power-of-two patterns, shuffled. Every
/// path score is then a multiple of `ln 2`, so true ties are common and true
/// differences are far above rounding noise. Zero entries are allowed only
/// for the grid, where they clamp to the probability floor.
fn dyadic_rows(rows: usize, allow_zero: bool, rng: &mut RngState) -> Tensor<f64> {
    let patterns = if allow_zero { 3 } else { 2 };
    let mut data = Vec::with_capacity(rows * 4);
    for _ in 0..rows {
        let mut row = DYADIC[rng.below(patterns)];
        rng.shuffle(&mut row);
        data.extend(row);
    }
    Tensor::from_rows(rows, 4, data).unwrap()
}

fn random_model(k: usize, rng: &mut RngState) -> TransitionModel<f64> {
    let initial = random_grid(1, k, rng).into_data();
    TransitionModel::new(initial, random_grid(k, k, rng)).unwrap()
}

/// `sum_k pi[0,k] log init_k + sum_n sum_{j,k} pi[n-1,j] pi[n,k] log A[j,k]`.
fn pairwise_closed_form(m: &TransitionModel<f64>, pi: &Tensor<f64>) -> f64 {
    let k = m.states();
    let mut total: f64 = (0..k).map(|s| pi.get(0, s) * m.initial()[s].ln()).sum();
    for n in 1..pi.rows() {
        for j in 0..k {
            for s in 0..k {
                total += pi.get(n - 1, j) * pi.get(n, s) * m.trans().get(j, s).ln();
            }
        }
    }
    total
}

/// Best path by enumeration. Among ties (equal up to rounding) the path that
/// is smallest when read from the last frame backwards wins, which is what
/// smallest-index backpointers select.
fn exhaustive_best(m: &TransitionModel<f64>, pi: &Tensor<f64>) -> Vec<usize> {
    let (n, k) = (pi.rows(), m.states());
    let emit = |t: usize, s: usize| pi.get(t, s).max(1e-7).ln();
    let total = k.pow(n as u32);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut path = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for s in path.iter_mut() {
            *s = c % k;
            c /= k;
        }
        let mut score = m.log_initial(path[0]) + emit(0, path[0]);
        for t in 1..n {
            score += m.log_trans(path[t - 1], path[t]) + emit(t, path[t]);
        }
        let better = match &best {
            None => true,
            Some((b, bp)) => {
                let tie = (score - b).abs() <= 1e-9;
                (!tie && score > *b) || (tie && path.iter().rev().lt(bp.iter().rev()))
            }
        };
        if better {
            best = Some((score, path.clone()));
        }
    }
    best.unwrap().1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recursion_matches_enumeration_and_pairwise_form(k in 2usize..=4, n in 1usize..=6, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let m = random_model(k, &mut rng);
        let pi = random_grid(n, k, &mut rng);
        let rec = m.expected_log_prob(&pi).unwrap();
        let brute = m.brute_force_expected_log_prob(&pi).unwrap();
        let pair = pairwise_closed_form(&m, &pi);
        prop_assert!((rec - brute).abs() <= 1e-10, "{rec} vs {brute}");
        prop_assert!((rec - pair).abs() <= 1e-10, "{rec} vs {pair}");
    }

    #[test]
    fn viterbi_matches_exhaustive_search(k in 2usize..=4, n in 1usize..=6, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let m = random_model(k, &mut rng);
        let pi = random_grid(n, k, &mut rng);
        prop_assert_eq!(m.viterbi(&pi).unwrap(), exhaustive_best(&m, &pi));
    }

    #[test]
    fn viterbi_breaks_ties_like_exhaustive_search(n in 1usize..=6, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let m = TransitionModel::new(vec![0.25; 4], dyadic_rows(4, false, &mut rng)).unwrap();
        let pi = dyadic_rows(n, true, &mut rng);
        prop_assert_eq!(m.viterbi(&pi).unwrap(), exhaustive_best(&m, &pi));
    }

    #[test]
    fn viterbi_never_scores_below_framewise_argmax(k in 2usize..=12, n in 1usize..=40, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let m = random_model(k, &mut rng);
        let pi = random_grid(n, k, &mut rng);
        let argmax: Vec<_> = (0..n).map(|r| pi.row_argmax(r)).collect();
        let v = m.viterbi(&pi).unwrap();
        prop_assert!(m.path_score(&pi, &v).unwrap() >= m.path_score(&pi, &argmax).unwrap() - 1e-12);
    }

    #[test]
    fn stronger_self_transition_never_adds_changes(k in 2usize..=10, n in 2usize..=60, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let pi = random_grid(n, k, &mut rng);
        let mut last = usize::MAX;
        for p in [1.0 / k as f64, 0.3, 0.5, 0.7, 0.9] {
            // 0.3 is below 1/K only when K < 4; the sweep must stay increasing.
            if p < 1.0 / k as f64 {
                continue;
            }
            let m = TransitionModel::self_transition(k, p).unwrap();
            let changes = transition_count(&m.viterbi(&pi).unwrap());
            prop_assert!(changes <= last, "p_self {p}: {changes} > {last}");
            last = changes;
        }
    }

    #[test]
    fn self_transition_rows_are_stochastic(k in 2usize..=97, p in 0.01f64..0.99) {
        let m = TransitionModel::self_transition(k, p).unwrap();
        for r in 0..k {
            let s: f64 = m.trans().row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert_eq!(m.trans().get(r, r), p);
        }
        prop_assert!((m.initial().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn log_prob_is_product_of_factors(k in 2usize..=6, seq in prop::collection::vec(0usize..6, 1..20), seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let m = random_model(k, &mut rng);
        let seq: Vec<_> = seq.into_iter().map(|s| s % k).collect();
        let mut prod = m.initial()[seq[0]];
        for w in seq.windows(2) {
            prod *= m.trans().get(w[0], w[1]);
        }
        prop_assert!((m.log_prob(&seq).unwrap() - prod.ln()).abs() <= 1e-12);
    }
}

