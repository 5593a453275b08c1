//! Evidence lower bounds and the training objectives built from them.
//!
//! All values are objectives to maximize. Each function records onto a
//! [`Graph`] so the caller can backpropagate `-objective`.

use serde::{Deserialize, Serialize};

use crate::diffmath::{DiffError, Graph, RngState, Tensor, Var, EPS_CLAMP};
use crate::distributions::{
    bernoulli_log_likelihood, categorical_entropy, gaussian_reparam_sample, gumbel_softmax_sample,
    kl_gaussian_standard, uniform_prior_expectation, DistError, GaussianNoise, GumbelNoise,
};
use crate::markov::{MarkovError, TransitionModel};
use crate::networks::{ChordVae, NetworkError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("labels have {found} frames, chroma has {expected}")]
    Length { expected: usize, found: usize },
}

/// Label prior used by the unsupervised bound.
#[derive(Debug, Clone)]
pub enum LabelPrior<T> {
    Uniform,
    Markov(TransitionModel<T>),
}

impl<T: Scalar> LabelPrior<T> {
    pub fn expectation(&self, g: &mut Graph<T>, pi: Var) -> Result<Var, ObjectiveError> {
        match self {
            LabelPrior::Uniform => Ok(uniform_prior_expectation(g, pi)?),
            LabelPrior::Markov(m) => Ok(m.expected_log_prob_graph(g, pi)?),
        }
    }
}

/// Frozen noise for one song: the Gumbel draw for the relaxed labels and one
/// Gaussian draw for each bound that samples the latents.
#[derive(Debug, Clone, PartialEq)]
pub struct SongNoise<T> {
    pub gumbel: GumbelNoise<T>,
    pub latent_unsup: GaussianNoise<T>,
    pub latent_sup: GaussianNoise<T>,
}

impl<T: Scalar> SongNoise<T> {
    pub fn draw(frames: usize, labels: usize, latent: usize, rng: &mut RngState) -> Self {
        Self {
            gumbel: GumbelNoise::draw(frames, labels, rng),
            latent_unsup: GaussianNoise::draw(frames, latent, rng),
            latent_sup: GaussianNoise::draw(frames, latent, rng),
        }
    }

    pub fn zeros(frames: usize, labels: usize, latent: usize) -> Self {
        Self {
            gumbel: GumbelNoise::zeros(frames, labels),
            latent_unsup: GaussianNoise::zeros(frames, latent),
            latent_sup: GaussianNoise::zeros(frames, latent),
        }
    }
}

/// Graph nodes of the individual terms, so callers can log them.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermVars {
    pub total: Option<Var>,
    pub reconstruction: Option<Var>,
    pub kl_z: Option<Var>,
    pub entropy_s: Option<Var>,
    pub prior_s: Option<Var>,
    pub xent: Option<Var>,
}

/// Scalar values of the terms, summed over songs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub objective: f64,
    pub reconstruction: f64,
    pub kl_z: f64,
    pub entropy_s: f64,
    pub prior_s: f64,
    pub xent: f64,
}

impl TermValues {
    pub fn read<T: Scalar>(g: &Graph<T>, t: &TermVars) -> Self {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.scalar(x).as_f64());
        Self {
            objective: v(t.total),
            reconstruction: v(t.reconstruction),
            kl_z: v(t.kl_z),
            entropy_s: v(t.entropy_s),
            prior_s: v(t.prior_s),
            xent: v(t.xent),
        }
    }

    pub fn add(&mut self, o: &Self) {
        self.objective += o.objective;
        self.reconstruction += o.reconstruction;
        self.kl_z += o.kl_z;
        self.entropy_s += o.entropy_s;
        self.prior_s += o.prior_s;
        self.xent += o.xent;
    }
}

fn sum_opt<T: Scalar>(g: &mut Graph<T>, a: Option<Var>, b: Option<Var>) -> Result<Option<Var>, DiffError> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(g.add(a, b)?),
        (a, None) => a,
        (None, b) => b,
    })
}

fn merge<T: Scalar>(g: &mut Graph<T>, a: TermVars, b: TermVars) -> Result<TermVars, DiffError> {
    Ok(TermVars {
        total: sum_opt(g, a.total, b.total)?,
        reconstruction: sum_opt(g, a.reconstruction, b.reconstruction)?,
        kl_z: sum_opt(g, a.kl_z, b.kl_z)?,
        entropy_s: sum_opt(g, a.entropy_s, b.entropy_s)?,
        prior_s: sum_opt(g, a.prior_s, b.prior_s)?,
        xent: sum_opt(g, a.xent, b.xent)?,
    })
}

/// One-hot `N x K` matrix of label indices.
pub fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Tensor<T> {
    Tensor::from_fn(labels.len(), k, |r, c| if labels[r] == c { T::one() } else { T::zero() })
}

/// `log q(S|X) = sum_n log max(pi[n, s_n], eps)` for one-hot `s`.
pub fn label_log_likelihood<T: Scalar>(g: &mut Graph<T>, pi: Var, s: Var) -> Result<Var, ObjectiveError> {
    let lp = g.log(pi, T::lit(EPS_CLAMP));
    let picked = g.mul(lp, s)?;
    Ok(g.sum(picked))
}

/// Recognizer outputs shared by both bounds of a song.
struct Shared {
    pi: Var,
    mean: Var,
    log_var: Var,
}

fn unsupervised_terms<T: Scalar>(
    g: &mut Graph<T>,
    model: &ChordVae<T>,
    prior: &LabelPrior<T>,
    x: Var,
    sh: &Shared,
    noise: &SongNoise<T>,
    tau: f64,
) -> Result<TermVars, ObjectiveError> {
    let s = gumbel_softmax_sample(g, sh.pi, &noise.gumbel, tau)?;
    let z = gaussian_reparam_sample(g, sh.mean, sh.log_var, &noise.latent_unsup)?;
    let omega = model.generate(g, s, z)?;
    let recon = bernoulli_log_likelihood(g, x, omega)?;
    let kl = kl_gaussian_standard(g, sh.mean, sh.log_var)?;
    let ent = categorical_entropy(g, sh.pi)?;
    let pr = prior.expectation(g, sh.pi)?;
    let t = g.sub(recon, kl)?;
    let t = g.add(t, ent)?;
    let total = g.add(t, pr)?;
    Ok(TermVars {
        total: Some(total),
        reconstruction: Some(recon),
        kl_z: Some(kl),
        entropy_s: Some(ent),
        prior_s: Some(pr),
        xent: None,
    })
}

fn supervised_bound_terms<T: Scalar>(
    g: &mut Graph<T>,
    model: &ChordVae<T>,
    x: Var,
    s: Var,
    mean: Var,
    log_var: Var,
    noise: &GaussianNoise<T>,
) -> Result<TermVars, ObjectiveError> {
    let z = gaussian_reparam_sample(g, mean, log_var, noise)?;
    let omega = model.generate(g, s, z)?;
    let recon = bernoulli_log_likelihood(g, x, omega)?;
    let kl = kl_gaussian_standard(g, mean, log_var)?;
    let total = g.sub(recon, kl)?;
    Ok(TermVars {
        total: Some(total),
        reconstruction: Some(recon),
        kl_z: Some(kl),
        ..Default::default()
    })
}

fn check_labels<T: Scalar>(g: &Graph<T>, x: Var, labels: &[usize]) -> Result<(), ObjectiveError> {
    let n = g.value(x).rows();
    if labels.len() != n {
        return Err(ObjectiveError::Length {
            expected: n,
            found: labels.len(),
        });
    }
    Ok(())
}

/// Unsupervised bound: reconstruction with relaxed labels and sampled latents,
/// minus the latent KL, plus label entropy and expected label prior.
pub fn unsupervised_elbo<T: Scalar>(
    g: &mut Graph<T>,
    model: &ChordVae<T>,
    prior: &LabelPrior<T>,
    x: Var,
    noise: &SongNoise<T>,
    tau: f64,
) -> Result<TermVars, ObjectiveError> {
    let pi = model.classify(g, x)?;
    let (mean, log_var) = model.recognize(g, x)?;
    unsupervised_terms(g, model, prior, x, &Shared { pi, mean, log_var }, noise, tau)
}

/// Supervised bound: reconstruction given the true labels minus the latent KL.
pub fn supervised_lower_bound<T: Scalar>(
    g: &mut Graph<T>,
    model: &ChordVae<T>,
    x: Var,
    labels: &[usize],
    noise: &SongNoise<T>,
) -> Result<TermVars, ObjectiveError> {
    check_labels(g, x, labels)?;
    let s = g.constant(one_hot(labels, model.config().labels));
    let (mean, log_var) = model.recognize(g, x)?;
    supervised_bound_terms(g, model, x, s, mean, log_var, &noise.latent_sup)
}

/// Cross-entropy only: the supervised classification baseline.
pub fn baseline_objective<T: Scalar>(
    g: &mut Graph<T>,
    model: &ChordVae<T>,
    x: Var,
    labels: &[usize],
) -> Result<TermVars, ObjectiveError> {
    check_labels(g, x, labels)?;
    let s = g.constant(one_hot(labels, model.config().labels));
    let pi = model.classify(g, x)?;
    let xent = label_log_likelihood(g, pi, s)?;
    Ok(TermVars {
        total: Some(xent),
        xent: Some(xent),
        ..Default::default()
    })
}

/// Annotated song used twice: unsupervised bound, supervised bound, and the
/// label log-likelihood under the classifier.
pub fn supervised_objective<T: Scalar>(
    g: &mut Graph<T>,
    model: &ChordVae<T>,
    prior: &LabelPrior<T>,
    x: Var,
    labels: &[usize],
    noise: &SongNoise<T>,
    tau: f64,
) -> Result<TermVars, ObjectiveError> {
    check_labels(g, x, labels)?;
    let s = g.constant(one_hot(labels, model.config().labels));
    let pi = model.classify(g, x)?;
    let (mean, log_var) = model.recognize(g, x)?;
    let sh = Shared { pi, mean, log_var };
    let un = unsupervised_terms(g, model, prior, x, &sh, noise, tau)?;
    let sup = supervised_bound_terms(g, model, x, s, mean, log_var, &noise.latent_sup)?;
    let xent = label_log_likelihood(g, pi, s)?;
    let xent_terms = TermVars {
        total: Some(xent),
        xent: Some(xent),
        ..Default::default()
    };
    let m = merge(g, un, sup)?;
    Ok(merge(g, m, xent_terms)?)
}

/// A song as seen by the objectives: chroma plus labels when annotated.
#[derive(Debug, Clone)]
pub struct ObjectiveInput<'a, T> {
    pub chroma: &'a Tensor<T>,
    pub labels: Option<&'a [usize]>,
    pub noise: &'a SongNoise<T>,
}

/// Sum of the unsupervised bound over every song plus, for annotated songs,
/// the supervised bound and label log-likelihood.
pub fn semi_supervised_objective<T: Scalar>(
    g: &mut Graph<T>,
    model: &ChordVae<T>,
    prior: &LabelPrior<T>,
    batch: &[ObjectiveInput<'_, T>],
    tau: f64,
) -> Result<TermVars, ObjectiveError> {
    let mut acc = TermVars::default();
    for item in batch {
        let x = g.constant(item.chroma.clone());
        let t = match item.labels {
            Some(l) => supervised_objective(g, model, prior, x, l, item.noise, tau)?,
            None => unsupervised_elbo(g, model, prior, x, item.noise, tau)?,
        };
        acc = merge(g, acc, t)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::EncoderConfig;

    fn tiny() -> ChordVae<f64> {
        ChordVae::new(
            EncoderConfig {
                layers: 1,
                hidden: 2,
                bidirectional: true,
                latent: 2,
                labels: 3,
                chroma: 4,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn supervised_bound_below_reconstruction() {
        let m = tiny();
        let mut rng = RngState::new(2);
        let x = Tensor::from_fn(4, 4, |_, _| rng.uniform(0.0, 1.0));
        let noise = SongNoise::draw(4, 3, 2, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let t = supervised_lower_bound(&mut g, &m, xv, &[0, 1, 1, 2], &noise).unwrap();
        let v = TermValues::read(&g, &t);
        assert!(v.objective <= v.reconstruction);
        assert!((v.objective - (v.reconstruction - v.kl_z)).abs() < 1e-12);
    }

    #[test]
    fn label_length_checked() {
        let m = tiny();
        let mut g = Graph::new();
        let xv = g.constant(Tensor::full(&[3, 4], 0.5));
        assert!(matches!(
            baseline_objective(&mut g, &m, xv, &[0, 1]),
            Err(ObjectiveError::Length { .. })
        ));
    }
}
