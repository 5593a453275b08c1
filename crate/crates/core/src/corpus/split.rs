use super::{ChordSequence, Corpus, CorpusError, Song};
use crate::diffmath::RngState;

/// One cross-validation fold. Unannotated training songs carry no labels; their
/// ground truth is kept aside for bookkeeping only.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub annotated: Vec<Song>,
    pub unannotated: Vec<Song>,
    pub test: Vec<Song>,
    held_out_truth: Vec<Option<ChordSequence>>,
}

impl Split {
    /// Ground truth of `unannotated[i]`, if the corpus had it.
    pub fn unannotated_truth(&self, i: usize) -> Option<&ChordSequence> {
        self.held_out_truth.get(i).and_then(Option::as_ref)
    }

    pub fn train_len(&self) -> usize {
        self.annotated.len() + self.unannotated.len()
    }
}

/// Shuffles song order with `seed`, takes contiguous block `fold_index` of
/// `folds` as the test set, and marks `round(annotated_fraction * train)` of
/// the remaining songs as annotated.
pub fn split_folds(
    corpus: &Corpus,
    folds: usize,
    fold_index: usize,
    annotated_fraction: f64,
    seed: u64,
) -> Result<Split, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    if folds < 2 || fold_index >= folds {
        return Err(CorpusError::Config(format!("fold {fold_index} of {folds} is invalid")));
    }
    if corpus.len() < folds {
        return Err(CorpusError::Config(format!("{} songs cannot fill {folds} folds", corpus.len())));
    }
    if !(0.0..=1.0).contains(&annotated_fraction) {
        return Err(CorpusError::Config(format!(
            "annotated_fraction {annotated_fraction} outside [0, 1]"
        )));
    }
    let n = corpus.len();
    let mut order: Vec<usize> = (0..n).collect();
    RngState::new(seed).shuffle(&mut order);
    let (lo, hi) = (fold_index * n / folds, (fold_index + 1) * n / folds);
    let test = order[lo..hi].iter().map(|&i| corpus.songs[i].clone()).collect();
    let train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
    let n_ann = (annotated_fraction * train.len() as f64).round() as usize;
    let annotated = train[..n_ann].iter().map(|&i| corpus.songs[i].clone()).collect();
    let rest = &train[n_ann..];
    Ok(Split {
        annotated,
        unannotated: rest.iter().map(|&i| corpus.songs[i].without_labels()).collect(),
        test,
        held_out_truth: rest.iter().map(|&i| corpus.songs[i].labels.clone()).collect(),
    })
}
