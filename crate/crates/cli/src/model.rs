use std::path::Path;

use chordvae::diffmath::{load_checkpoint, Checkpoint};
use chordvae::training::{PriorKind, TrainMode, TrainingConfig};
use chordvae::vocab::vocabulary_hash;
use chordvae::ChordVae64;
use serde::{Deserialize, Serialize};

use crate::config::SplitSpec;
use crate::error::{CliError, CliResult};

/// Self-transition used for Viterbi smoothing when the model carries no
/// Markov prior of its own.
pub const DEFAULT_VITERBI_P_SELF: f64 = 0.9;

/// The config stored inside every checkpoint this tool writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub training: TrainingConfig,
    pub split: SplitSpec,
    pub vocabulary_hash: String,
}

impl CheckpointMeta {
    /// Viterbi self-transition implied by the training condition.
    pub fn viterbi_p_self(&self) -> f64 {
        match (self.training.mode, self.training.prior) {
            (TrainMode::SupervisedBaseline, _) | (_, PriorKind::Uniform) => DEFAULT_VITERBI_P_SELF,
            (_, PriorKind::Markov { p_self }) => p_self,
        }
    }

    pub fn prior_name(&self) -> &'static str {
        match (self.training.mode, self.training.prior) {
            (TrainMode::SupervisedBaseline, _) => "na",
            (_, PriorKind::Uniform) => "uniform",
            (_, PriorKind::Markov { .. }) => "markov",
        }
    }

    pub fn train_p_self(&self) -> Option<f64> {
        match self.training.mode {
            TrainMode::SupervisedBaseline => None,
            _ => Some(self.training.prior.p_self(self.training.encoder.labels)),
        }
    }
}

pub struct LoadedModel {
    pub model: ChordVae64,
    pub meta: CheckpointMeta,
    pub checkpoint: Checkpoint,
}

pub fn load_model(path: &Path) -> CliResult<LoadedModel> {
    let checkpoint = load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(checkpoint.config.clone())
        .map_err(|e| CliError::checkpoint(format!("{}: unrecognized config: {e}", path.display())))?;
    if meta.vocabulary_hash != vocabulary_hash() {
        return Err(CliError::checkpoint(format!(
            "{}: trained with a different chord vocabulary",
            path.display()
        )));
    }
    let mut model = ChordVae64::new(meta.training.encoder.clone(), meta.training.seed)
        .map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))?;
    checkpoint.restore_into(&mut model.store)?;
    Ok(LoadedModel { model, meta, checkpoint })
}
