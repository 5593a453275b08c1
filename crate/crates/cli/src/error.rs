use std::fmt;
use std::path::Path;

use chordvae::corpus::CorpusError;
use chordvae::diffmath::CheckpointError;
use chordvae::evaluation::EvalError;
use chordvae::inference::InferenceError;
use chordvae::training::TrainError;

/// Process exit status for each failure class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 2,
    Validation = 3,
    Io = 4,
    Checkpoint = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        Self { kind: ExitKind::Usage, message: m.into() }
    }

    pub fn validation(m: impl Into<String>) -> Self {
        Self { kind: ExitKind::Validation, message: m.into() }
    }

    pub fn checkpoint(m: impl Into<String>) -> Self {
        Self { kind: ExitKind::Checkpoint, message: m.into() }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self { kind: ExitKind::Io, message: format!("{}: {e}", path.display()) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let kind = match e {
            CorpusError::Io { .. } => ExitKind::Io,
            _ => ExitKind::Validation,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let kind = match e {
            CheckpointError::Io { .. } => ExitKind::Io,
            _ => ExitKind::Checkpoint,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self::validation(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let kind = match e {
            EvalError::Io { .. } => ExitKind::Io,
            _ => ExitKind::Validation,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        Self::validation(e.to_string())
    }
}
