//! Frame posteriors and label decoding for trained models.

use crate::corpus::ChromaSequence;
use crate::diffmath::Tensor;
use crate::markov::{MarkovError, TransitionModel};
use crate::networks::{ChordVae, NetworkError};
use crate::vocab::CHROMA_DIM;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub posteriors: Tensor<f64>,
    pub argmax: Vec<usize>,
    pub viterbi: Option<Vec<usize>>,
}

pub fn chroma_tensor(chroma: &ChromaSequence) -> Tensor<f64> {
    let data = chroma.values().iter().map(|&v| v as f64).collect();
    Tensor::from_rows(chroma.frames(), CHROMA_DIM, data).expect("chroma shape")
}

/// Classifies one song and decodes it frame-wise and, given a transition
/// model, with Viterbi.
pub fn decode_song(
    model: &ChordVae<f64>,
    chroma: &ChromaSequence,
    transitions: Option<&TransitionModel<f64>>,
) -> Result<Decoded, InferenceError> {
    let posteriors = model.posteriors(&chroma_tensor(chroma))?;
    let argmax = (0..posteriors.rows()).map(|r| posteriors.row_argmax(r)).collect();
    let viterbi = transitions.map(|m| m.viterbi(&posteriors)).transpose()?;
    Ok(Decoded {
        posteriors,
        argmax,
        viterbi,
    })
}
