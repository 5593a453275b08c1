//! Chroma and label data model, synthetic generation, file formats, pitch
//! rotation and fold splitting.

mod io;
mod split;
mod synth;

pub use io::{import_csv_song, load_corpus, read_song_file, save_corpus, write_song_file, CorpusManifest, SongEntry};
pub use split::{split_folds, Split};
pub use synth::{generate_synthetic_corpus, SynthConfig};

use std::collections::HashSet;
use std::path::PathBuf;

use crate::vocab::{ChordLabel, CHROMA_DIM, NUM_LABELS, NUM_ROOTS};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("song {song}: frame {frame}: {msg}")]
    Validation { song: String, frame: usize, msg: String },
    #[error("malformed record in {what}: {msg}")]
    Malformed { what: String, msg: String },
    #[error("vocabulary hash mismatch: file has {found}, expected {expected}")]
    VocabularyHash { expected: String, found: String },
    #[error("duplicate song id {0:?}")]
    DuplicateId(String),
    #[error("empty corpus")]
    Empty,
}

impl CorpusError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.into(),
            source,
        }
    }
}

/// `N x 36` chroma matrix, row-major, every entry in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChromaSequence {
    frames: usize,
    values: Vec<f32>,
}

impl ChromaSequence {
    /// Validates shape and range. `song` only labels error messages.
    pub fn new(values: Vec<f32>, song: &str) -> Result<Self, CorpusError> {
        if values.is_empty() || values.len() % CHROMA_DIM != 0 {
            return Err(CorpusError::Validation {
                song: song.to_string(),
                frame: 0,
                msg: format!("{} values is not a positive multiple of {CHROMA_DIM}", values.len()),
            });
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(CorpusError::Validation {
                song: song.to_string(),
                frame: i / CHROMA_DIM,
                msg: format!("chroma entry {} out of range [0, 1] at dim {}", values[i], i % CHROMA_DIM),
            });
        }
        Ok(Self {
            frames: values.len() / CHROMA_DIM,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, n: usize) -> &[f32] {
        &self.values[n * CHROMA_DIM..(n + 1) * CHROMA_DIM]
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn crop(&self, start: usize, len: usize) -> Self {
        Self {
            frames: len,
            values: self.values[start * CHROMA_DIM..(start + len) * CHROMA_DIM].to_vec(),
        }
    }

    /// Circularly shifts each 12-dim channel block by `semitones`.
    pub fn rotate(&self, semitones: i64) -> Self {
        let shift = semitones.rem_euclid(NUM_ROOTS as i64) as usize;
        let mut values = vec![0.0; self.values.len()];
        for (src, dst) in self.values.chunks_exact(NUM_ROOTS).zip(values.chunks_exact_mut(NUM_ROOTS)) {
            for (pc, &v) in src.iter().enumerate() {
                dst[(pc + shift) % NUM_ROOTS] = v;
            }
        }
        Self {
            frames: self.frames,
            values,
        }
    }
}

/// Per-frame vocabulary indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChordSequence(Vec<u16>);

impl ChordSequence {
    pub fn new(labels: Vec<u16>, song: &str) -> Result<Self, CorpusError> {
        if let Some(frame) = labels.iter().position(|&l| l as usize >= NUM_LABELS) {
            return Err(CorpusError::Validation {
                song: song.to_string(),
                frame,
                msg: format!("label index {} out of range [0, {NUM_LABELS})", labels[frame]),
            });
        }
        Ok(Self(labels))
    }

    pub fn from_labels(labels: &[ChordLabel]) -> Self {
        Self(labels.iter().map(|l| l.index() as u16).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[u16] {
        &self.0
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.0.iter().map(|&v| v as usize).collect()
    }

    pub fn label(&self, n: usize) -> ChordLabel {
        ChordLabel::from_index(self.0[n] as usize).expect("validated index")
    }

    pub fn crop(&self, start: usize, len: usize) -> Self {
        Self(self.0[start..start + len].to_vec())
    }

    pub fn rotate(&self, semitones: i64) -> Self {
        Self(
            (0..self.len())
                .map(|n| self.label(n).rotate(semitones).index() as u16)
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Song {
    pub id: String,
    pub chroma: ChromaSequence,
    pub labels: Option<ChordSequence>,
}

impl Song {
    pub fn new(id: impl Into<String>, chroma: ChromaSequence, labels: Option<ChordSequence>) -> Result<Self, CorpusError> {
        let id = id.into();
        if let Some(l) = &labels {
            if l.len() != chroma.frames() {
                return Err(CorpusError::Validation {
                    song: id,
                    frame: l.len().min(chroma.frames()),
                    msg: format!("{} labels for {} chroma frames", l.len(), chroma.frames()),
                });
            }
        }
        Ok(Self { id, chroma, labels })
    }

    pub fn frames(&self) -> usize {
        self.chroma.frames()
    }

    pub fn without_labels(&self) -> Song {
        Song {
            id: self.id.clone(),
            chroma: self.chroma.clone(),
            labels: None,
        }
    }
}

/// Jointly rotates chroma and labels; no-chord frames stay no-chord.
pub fn pitch_rotate(
    chroma: &ChromaSequence,
    labels: Option<&ChordSequence>,
    semitones: i64,
) -> (ChromaSequence, Option<ChordSequence>) {
    (chroma.rotate(semitones), labels.map(|l| l.rotate(semitones)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub songs: Vec<Song>,
    pub synth: Option<SynthConfig>,
}

impl Corpus {
    pub fn new(songs: Vec<Song>, synth: Option<SynthConfig>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for s in &songs {
            if !seen.insert(s.id.as_str()) {
                return Err(CorpusError::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self { songs, synth })
    }

    pub fn len(&self) -> usize {
        self.songs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.songs.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.songs.iter().map(Song::frames).sum()
    }

    pub fn get(&self, id: &str) -> Option<&Song> {
        self.songs.iter().find(|s| s.id == id)
    }
}
