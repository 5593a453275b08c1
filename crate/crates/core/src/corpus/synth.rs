use serde::{Deserialize, Serialize};

use super::{ChordSequence, ChromaSequence, Corpus, CorpusError, Song};
use crate::diffmath::RngState;
use crate::vocab::{ChordLabel, CHROMA_DIM, NUM_LABELS, NUM_ROOTS};

/// Parameters of the synthetic chroma generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub song_count: usize,
    pub frames_per_song: usize,
    pub segment_self_prob: f64,
    /// Relative weights over maj, min, dim, aug, sus2, sus4, 1, 5, N; spread
    /// uniformly over roots. Need not sum to one.
    pub type_weights: [f64; 9],
    pub noise_std: f64,
    pub activation_floor: f64,
    pub activation_ceiling: f64,
    /// Per-frame passing-note rate; magnitudes are uniform in `[0, deviation_scale]` capped at 0.5.
    pub deviation_scale: f64,
    /// Per-segment amplitude range.
    pub amplitude: (f64, f64),
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            song_count: 100,
            frames_per_song: 200,
            segment_self_prob: 0.9,
            // Hours of each type in a large pop annotation set; N gets about 5%.
            type_weights: [53.09, 16.63, 0.36, 0.15, 0.25, 1.63, 0.76, 0.84, 3.9],
            noise_std: 0.75,
            activation_floor: 0.0,
            activation_ceiling: 1.0,
            deviation_scale: 0.3,
            amplitude: (0.6, 1.0),
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Config(m));
        if self.song_count == 0 {
            return bad("song_count must be positive".into());
        }
        if self.frames_per_song == 0 {
            return bad("frames_per_song must be positive".into());
        }
        if !(self.segment_self_prob > 0.0 && self.segment_self_prob < 1.0) {
            return bad(format!("segment_self_prob {} outside (0, 1)", self.segment_self_prob));
        }
        if self.type_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.type_weights.iter().sum::<f64>() <= 0.0 {
            return bad("type_weights must be nonnegative and not all zero".into());
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise_std {} must be nonnegative", self.noise_std));
        }
        if !(self.deviation_scale.is_finite() && self.deviation_scale >= 0.0) {
            return bad(format!("deviation_scale {} must be nonnegative", self.deviation_scale));
        }
        let (lo, hi) = (self.activation_floor, self.activation_ceiling);
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad(format!("activation range [{lo}, {hi}] must satisfy 0 <= floor < ceiling <= 1"));
        }
        let (a, b) = self.amplitude;
        if !(0.0 <= a && a <= b && b.is_finite()) {
            return bad(format!("amplitude range ({a}, {b}) invalid"));
        }
        Ok(())
    }

    /// Unnormalized weight of each of the 97 labels as a segment target.
    fn label_weights(&self) -> Vec<f64> {
        (0..NUM_LABELS)
            .map(|i| {
                let label = ChordLabel::from_index(i).expect("in range");
                let w = self.type_weights[label.ctype().ordinal()];
                if label.is_no_chord() {
                    w
                } else {
                    w / NUM_ROOTS as f64
                }
            })
            .collect()
    }
}

/// Draws a label chain and renders noisy chroma for every song. Song `i`
/// uses substream `i` of the seed, so the output does not depend on the order
/// songs are generated in.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<Corpus, CorpusError> {
    cfg.validate()?;
    let base = RngState::new(cfg.rng_seed);
    let weights = cfg.label_weights();
    let songs = (0..cfg.song_count)
        .map(|i| generate_song(cfg, &weights, format!("synth_{i:05}"), &mut base.substream(i as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    Corpus::new(songs, Some(cfg.clone()))
}

fn draw_excluding(weights: &[f64], exclude: Option<usize>, rng: &mut RngState) -> usize {
    match exclude {
        Some(x) if weights.iter().enumerate().any(|(i, &w)| i != x && w > 0.0) => {
            let mut w = weights.to_vec();
            w[x] = 0.0;
            rng.weighted_index(&w)
        }
        _ => rng.weighted_index(weights),
    }
}

fn generate_song(cfg: &SynthConfig, weights: &[f64], id: String, rng: &mut RngState) -> Result<Song, CorpusError> {
    let n = cfg.frames_per_song;
    let mut labels = Vec::with_capacity(n);
    let mut current = draw_excluding(weights, None, rng);
    let mut amp = rng.uniform(cfg.amplitude.0, cfg.amplitude.1);
    let mut values = Vec::with_capacity(n * CHROMA_DIM);
    let rate = cfg.deviation_scale.min(1.0);
    let magnitude = cfg.deviation_scale.min(0.5);
    for t in 0..n {
        if t > 0 && !rng.bernoulli(cfg.segment_self_prob) {
            current = draw_excluding(weights, Some(current), rng);
            amp = rng.uniform(cfg.amplitude.0, cfg.amplitude.1);
        }
        labels.push(current as u16);
        let template = ChordLabel::from_index(current).expect("in range").template();
        let mut frame: Vec<f64> = template.iter().map(|&v| v as f64 * amp).collect();
        if cfg.noise_std > 0.0 {
            for v in frame.iter_mut() {
                *v += cfg.noise_std * rng.standard_normal();
            }
        }
        if rate > 0.0 && rng.bernoulli(rate) {
            // Passing notes live in the middle and high channels.
            let dim = NUM_ROOTS + rng.below(2 * NUM_ROOTS);
            frame[dim] += rng.uniform(0.0, magnitude);
        }
        values.extend(
            frame
                .iter()
                .map(|v| v.clamp(cfg.activation_floor, cfg.activation_ceiling) as f32),
        );
    }
    let chroma = ChromaSequence::new(values, &id)?;
    let labels = ChordSequence::new(labels, &id)?;
    Song::new(id, chroma, Some(labels))
}
