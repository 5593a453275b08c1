//! Optimizer loop: batch composition, cropping, pitch rotation, Adam with
//! gradient clipping and per-epoch learning-rate decay.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Song, Split};
use crate::diffmath::{Graph, ParamStore, RngState, Tensor};
use crate::distributions::DEFAULT_TAU;
use crate::markov::TransitionModel;
use crate::networks::{ChordVae, EncoderConfig, NetworkError};
use crate::objectives::{
    baseline_objective, supervised_objective, unsupervised_elbo, LabelPrior, ObjectiveError, SongNoise, TermValues,
};
use crate::vocab::CHROMA_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Classifier trained on cross-entropy alone.
    #[serde(rename = "ace-sl")]
    SupervisedBaseline,
    #[serde(rename = "vae-sl")]
    VaeSupervised,
    #[serde(rename = "vae-ssl")]
    VaeSemiSupervised,
    #[serde(rename = "vae-un")]
    VaeUnsupervised,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::SupervisedBaseline => "ace-sl",
            TrainMode::VaeSupervised => "vae-sl",
            TrainMode::VaeSemiSupervised => "vae-ssl",
            TrainMode::VaeUnsupervised => "vae-un",
        }
    }

    pub fn uses_prior(self) -> bool {
        self != TrainMode::SupervisedBaseline
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ace-sl" => Ok(TrainMode::SupervisedBaseline),
            "vae-sl" => Ok(TrainMode::VaeSupervised),
            "vae-ssl" => Ok(TrainMode::VaeSemiSupervised),
            "vae-un" => Ok(TrainMode::VaeUnsupervised),
            _ => Err(format!("unknown mode {s:?} (ace-sl, vae-sl, vae-ssl, vae-un)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorKind {
    Uniform,
    Markov { p_self: f64 },
}

impl PriorKind {
    pub fn build(self, labels: usize) -> Result<LabelPrior<f64>, TrainError> {
        Ok(match self {
            PriorKind::Uniform => LabelPrior::Uniform,
            PriorKind::Markov { p_self } => LabelPrior::Markov(
                TransitionModel::self_transition(labels, p_self).map_err(|e| TrainError::Config(e.to_string()))?,
            ),
        })
    }

    pub fn p_self(self, labels: usize) -> f64 {
        match self {
            PriorKind::Uniform => 1.0 / labels as f64,
            PriorKind::Markov { p_self } => p_self,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: TrainMode,
    pub prior: PriorKind,
    pub epochs: usize,
    pub batch_songs: usize,
    pub frames_per_clip: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub grad_clip_norm: f64,
    pub tau: f64,
    pub seed: u64,
    pub annotated_batch_fraction: f64,
    pub encoder: EncoderConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::VaeSemiSupervised,
            prior: PriorKind::Markov { p_self: 0.9 },
            epochs: 60,
            batch_songs: 8,
            frames_per_clip: 200,
            learning_rate: 1e-3,
            lr_decay: 0.99,
            grad_clip_norm: 5.0,
            tau: DEFAULT_TAU,
            seed: 0,
            annotated_batch_fraction: 0.5,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 || self.batch_songs == 0 || self.frames_per_clip == 0 {
            return bad("epochs, batch_songs and frames_per_clip must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm {} must be positive", self.grad_clip_norm));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if !(0.0..=1.0).contains(&self.annotated_batch_fraction) {
            return bad(format!("annotated_batch_fraction {} outside [0, 1]", self.annotated_batch_fraction));
        }
        if let PriorKind::Markov { p_self } = self.prior {
            if !(p_self > 0.0 && p_self < 1.0) {
                return bad(format!("p_self {p_self} outside (0, 1)"));
            }
        }
        self.encoder.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    /// Learning rate in effect during epoch `e` (0-based).
    pub fn lr_at_epoch(&self, e: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(e as i32)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("non-finite objective at epoch {epoch}, iteration {iteration}")]
    NonFinite { epoch: usize, iteration: usize },
}

/// Adam state for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<f64>>,
    v: Vec<Tensor<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f64>, lr: f64) -> Self {
        let zeros = |id| Tensor::zeros(store.value(id).shape());
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    /// Descends along the accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore<f64>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).data().to_vec();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let value = store.value_mut(id).data_mut();
            for j in 0..grad.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                value[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(store: &mut ParamStore<f64>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.grad_mut(id).scale_assign(s);
        }
    }
    norm
}

/// One row of the per-epoch log. Term columns are per-frame means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mode: String,
    pub objective: f64,
    pub reconstruction: f64,
    pub kl_z: f64,
    pub entropy_s: f64,
    pub prior_s: f64,
    pub xent: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,mode,objective,reconstruction,kl_z,entropy_s,prior_s,xent,lr,grad_norm";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.mode,
            self.objective,
            self.reconstruction,
            self.kl_z,
            self.entropy_s,
            self.prior_s,
            self.xent,
            self.lr,
            self.grad_norm
        )
    }
}

pub fn epoch_log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(EPOCH_LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// A training clip: cropped, rotated chroma and (maybe) labels.
#[derive(Debug, Clone)]
pub struct Clip {
    pub chroma: Tensor<f64>,
    pub labels: Option<Vec<usize>>,
}

/// Crops `song` to at most `frames` at a uniform offset and rotates it by a
/// uniform number of semitones in `0..12`.
pub fn make_clip(song: &Song, frames: usize, use_labels: bool, rng: &mut RngState) -> Clip {
    let n = song.frames();
    let (start, len) = if n > frames {
        (rng.below(n - frames + 1), frames)
    } else {
        (0, n)
    };
    let r = rng.below(12) as i64;
    let chroma = song.chroma.crop(start, len).rotate(r);
    let labels = if use_labels {
        song.labels.as_ref().map(|l| l.crop(start, len).rotate(r).as_usize())
    } else {
        None
    };
    let data = chroma.values().iter().map(|&v| v as f64).collect();
    Clip {
        chroma: Tensor::from_rows(len, CHROMA_DIM, data).expect("chroma shape"),
        labels,
    }
}

/// Cycles through a pool in reshuffled passes.
struct PoolSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl PoolSampler {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
        }
    }

    fn next(&mut self, rng: &mut RngState) -> usize {
        if self.cursor >= self.order.len() {
            rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// How many annotated songs go into each batch; the rest are unannotated.
pub fn annotated_per_batch(cfg: &TrainingConfig, annotated: usize, unannotated: usize) -> usize {
    let b = cfg.batch_songs;
    match cfg.mode {
        TrainMode::SupervisedBaseline | TrainMode::VaeSupervised => b,
        TrainMode::VaeUnsupervised => 0,
        TrainMode::VaeSemiSupervised => {
            if unannotated == 0 {
                return b;
            }
            if annotated == 0 {
                return 0;
            }
            let k = (cfg.annotated_batch_fraction * b as f64).round() as usize;
            if b >= 2 {
                k.clamp(1, b - 1)
            } else {
                k.min(b)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ChordVae<f64>,
    pub log: Vec<EpochLog>,
    pub warnings: Vec<String>,
}

/// Runs the full optimization. `on_epoch` sees each log row as it is produced.
pub fn train(split: &Split, cfg: &TrainingConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    let labels = cfg.encoder.labels;
    let prior = cfg.prior.build(labels)?;

    // Pools: annotated songs with labels, and songs used without labels.
    let annotated: Vec<&Song> = split.annotated.iter().collect();
    let unannotated: Vec<&Song> = match cfg.mode {
        TrainMode::VaeUnsupervised => split.annotated.iter().chain(&split.unannotated).collect(),
        TrainMode::VaeSemiSupervised => split.unannotated.iter().collect(),
        _ => Vec::new(),
    };
    if cfg.mode != TrainMode::VaeUnsupervised && annotated.is_empty() {
        return Err(TrainError::Config(format!("mode {} needs annotated songs", cfg.mode)));
    }
    if unannotated.is_empty() && cfg.mode == TrainMode::VaeUnsupervised {
        return Err(TrainError::Config("no training songs".into()));
    }
    if cfg.mode == TrainMode::VaeSemiSupervised && unannotated.is_empty() {
        warnings.push("no unannotated songs; semi-supervised training degrades to supervised".into());
    }
    let n_ann = annotated_per_batch(cfg, annotated.len(), unannotated.len());
    let n_un = cfg.batch_songs - n_ann;
    let iterations = split.train_len().max(1).div_ceil(cfg.batch_songs);

    let mut model = ChordVae::<f64>::new(cfg.encoder.clone(), cfg.seed)?;
    let mut adam = Adam::new(&model.store, cfg.learning_rate);
    let mut rng = RngState::new(cfg.seed).substream(100);
    let mut ann_pool = PoolSampler::new(annotated.len());
    let mut un_pool = PoolSampler::new(unannotated.len());
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at_epoch(epoch);
        let mut totals = TermValues::default();
        let mut frames = 0usize;
        let mut norm_sum = 0.0;
        for iteration in 0..iterations {
            model.store.zero_grads();
            let mut batch: Vec<Clip> = Vec::with_capacity(cfg.batch_songs);
            for _ in 0..n_ann {
                let s = annotated[ann_pool.next(&mut rng)];
                batch.push(make_clip(s, cfg.frames_per_clip, true, &mut rng));
            }
            for _ in 0..n_un {
                let s = unannotated[un_pool.next(&mut rng)];
                batch.push(make_clip(s, cfg.frames_per_clip, false, &mut rng));
            }
            for clip in &batch {
                let n = clip.chroma.rows();
                let noise = SongNoise::draw(n, labels, cfg.encoder.latent, &mut rng);
                let mut g = Graph::new();
                let x = g.constant(clip.chroma.clone());
                let terms = match (cfg.mode, clip.labels.as_deref()) {
                    (TrainMode::SupervisedBaseline, Some(l)) => baseline_objective(&mut g, &model, x, l)?,
                    (TrainMode::VaeUnsupervised, _) | (_, None) => {
                        unsupervised_elbo(&mut g, &model, &prior, x, &noise, cfg.tau)?
                    }
                    (_, Some(l)) => supervised_objective(&mut g, &model, &prior, x, l, &noise, cfg.tau)?,
                };
                let total = terms.total.expect("objective has a total");
                let vals = TermValues::read(&g, &terms);
                if !vals.objective.is_finite() {
                    return Err(TrainError::NonFinite { epoch, iteration });
                }
                let loss = g.scale(total, -1.0);
                g.backward_into(loss, &mut model.store).map_err(ObjectiveError::from)?;
                totals.add(&vals);
                frames += n;
            }
            norm_sum += clip_gradients(&mut model.store, cfg.grad_clip_norm);
            adam.step(&mut model.store);
        }
        let per = |v: f64| v / frames.max(1) as f64;
        let row = EpochLog {
            epoch: epoch + 1,
            mode: cfg.mode.to_string(),
            objective: per(totals.objective),
            reconstruction: per(totals.reconstruction),
            kl_z: per(totals.kl_z),
            entropy_s: per(totals.entropy_s),
            prior_s: per(totals.prior_s),
            xent: per(totals.xent),
            lr: adam.lr,
            grad_norm: norm_sum / iterations as f64,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainOutcome { model, log, warnings })
}
