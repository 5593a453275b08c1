//! Optional TOML config file. Each command reads its own sections; flags
//! given on the command line override whatever the file sets.

use std::fs;
use std::path::Path;

use chordvae::corpus::SynthConfig;
use chordvae::training::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Which fold of the corpus is held out, and how much of the rest is annotated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub folds: usize,
    pub fold: usize,
    pub annotated_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            folds: 5,
            fold: 0,
            annotated_fraction: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub synth: Option<SynthConfig>,
    pub training: Option<TrainingConfig>,
    pub split: Option<SplitSpec>,
}

pub fn load(path: Option<&Path>) -> CliResult<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}
