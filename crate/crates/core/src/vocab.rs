//! The 97-label chord vocabulary: 12 roots x 8 chord types, plus no-chord.
//!
//! Vocabulary indices are type-major: `index = 12 * type_ordinal + root`, with
//! no-chord at 96. Roots are pitch classes with C = 0 ascending chromatically.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const NUM_ROOTS: usize = 12;
pub const NUM_ROOTED_TYPES: usize = 8;
pub const NUM_LABELS: usize = NUM_ROOTS * NUM_ROOTED_TYPES + 1;
pub const NO_CHORD_INDEX: usize = NUM_LABELS - 1;
pub const CHANNELS: usize = 3;
pub const CHROMA_DIM: usize = NUM_ROOTS * CHANNELS;

pub const SHARP_NAMES: [&str; NUM_ROOTS] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VocabError {
    #[error("malformed chord label {0:?}")]
    Malformed(String),
    #[error("unknown root note {0:?}")]
    UnknownRoot(String),
    #[error("unknown chord shorthand {0:?}")]
    UnknownShorthand(String),
    #[error("vocabulary index {0} out of range")]
    Index(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChordType {
    Maj,
    Min,
    Dim,
    Aug,
    Sus2,
    Sus4,
    Pow1,
    Pow5,
    NoChord,
}

impl ChordType {
    pub const ALL: [ChordType; 9] = [
        ChordType::Maj,
        ChordType::Min,
        ChordType::Dim,
        ChordType::Aug,
        ChordType::Sus2,
        ChordType::Sus4,
        ChordType::Pow1,
        ChordType::Pow5,
        ChordType::NoChord,
    ];

    pub const ROOTED: [ChordType; 8] = [
        ChordType::Maj,
        ChordType::Min,
        ChordType::Dim,
        ChordType::Aug,
        ChordType::Sus2,
        ChordType::Sus4,
        ChordType::Pow1,
        ChordType::Pow5,
    ];

    /// Position in [`ChordType::ALL`]; no-chord is 8.
    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Harte shorthand; `N` for no-chord.
    pub fn shorthand(self) -> &'static str {
        match self {
            ChordType::Maj => "maj",
            ChordType::Min => "min",
            ChordType::Dim => "dim",
            ChordType::Aug => "aug",
            ChordType::Sus2 => "sus2",
            ChordType::Sus4 => "sus4",
            ChordType::Pow1 => "1",
            ChordType::Pow5 => "5",
            ChordType::NoChord => "N",
        }
    }

    pub fn from_shorthand(s: &str) -> Option<Self> {
        Self::ROOTED.iter().copied().find(|t| t.shorthand() == s)
    }

    /// Chord tones as semitone offsets above the root.
    pub fn intervals(self) -> &'static [usize] {
        match self {
            ChordType::Maj => &[0, 4, 7],
            ChordType::Min => &[0, 3, 7],
            ChordType::Dim => &[0, 3, 6],
            ChordType::Aug => &[0, 4, 8],
            ChordType::Sus2 => &[0, 2, 7],
            ChordType::Sus4 => &[0, 5, 7],
            ChordType::Pow1 => &[0],
            ChordType::Pow5 => &[0, 7],
            ChordType::NoChord => &[],
        }
    }
}

/// One entry of the vocabulary. No-chord carries no root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChordLabel {
    root: u8,
    ctype: ChordType,
}

impl ChordLabel {
    pub const NO_CHORD: ChordLabel = ChordLabel {
        root: 0,
        ctype: ChordType::NoChord,
    };

    /// A rooted chord; `root` is reduced mod 12. Passing `NoChord` yields [`ChordLabel::NO_CHORD`].
    pub fn new(root: usize, ctype: ChordType) -> Self {
        if ctype == ChordType::NoChord {
            return Self::NO_CHORD;
        }
        Self {
            root: (root % NUM_ROOTS) as u8,
            ctype,
        }
    }

    pub fn ctype(self) -> ChordType {
        self.ctype
    }

    pub fn root(self) -> Option<usize> {
        (!self.is_no_chord()).then_some(self.root as usize)
    }

    pub fn is_no_chord(self) -> bool {
        self.ctype == ChordType::NoChord
    }

    pub fn index(self) -> usize {
        if self.is_no_chord() {
            NO_CHORD_INDEX
        } else {
            NUM_ROOTS * self.ctype.ordinal() + self.root as usize
        }
    }

    pub fn from_index(index: usize) -> Result<Self, VocabError> {
        match index {
            NO_CHORD_INDEX => Ok(Self::NO_CHORD),
            i if i < NO_CHORD_INDEX => Ok(Self::new(i % NUM_ROOTS, ChordType::ROOTED[i / NUM_ROOTS])),
            i => Err(VocabError::Index(i)),
        }
    }

    /// Transposes by `semitones` (any sign); no-chord is fixed.
    pub fn rotate(self, semitones: i64) -> Self {
        if self.is_no_chord() {
            return self;
        }
        let r = (self.root as i64 + semitones).rem_euclid(NUM_ROOTS as i64) as usize;
        Self::new(r, self.ctype)
    }

    /// Pitch-class set of the chord.
    pub fn pitch_classes(self) -> Vec<usize> {
        self.ctype
            .intervals()
            .iter()
            .map(|&i| (self.root as usize + i) % NUM_ROOTS)
            .collect()
    }

    /// Basic 36-dim chroma pattern: bass channel holds the root, the middle and
    /// high channels hold every chord tone. No-chord is all zeros.
    pub fn template(self) -> [f32; CHROMA_DIM] {
        let mut t = [0.0f32; CHROMA_DIM];
        if let Some(root) = self.root() {
            t[root] = 1.0;
            for pc in self.pitch_classes() {
                t[NUM_ROOTS + pc] = 1.0;
                t[2 * NUM_ROOTS + pc] = 1.0;
            }
        }
        t
    }

    pub fn reduce_majmin(self) -> MajminLabel {
        match (self.ctype, self.root()) {
            (ChordType::NoChord, _) => MajminLabel::NoChord,
            (ChordType::Maj, Some(r)) => MajminLabel::Maj(r as u8),
            (ChordType::Min, Some(r)) => MajminLabel::Min(r as u8),
            _ => MajminLabel::Unmapped,
        }
    }

    /// All 97 labels in index order.
    pub fn all() -> impl Iterator<Item = ChordLabel> {
        (0..NUM_LABELS).map(|i| Self::from_index(i).expect("in range"))
    }
}

fn parse_root(note: &str) -> Result<usize, VocabError> {
    let mut chars = note.chars();
    let letter = chars.next().ok_or_else(|| VocabError::UnknownRoot(note.to_string()))?;
    let base: i64 = match letter {
        'C' => 0,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => return Err(VocabError::UnknownRoot(note.to_string())),
    };
    let mut shift = 0i64;
    for c in chars {
        match c {
            '#' => shift += 1,
            'b' => shift -= 1,
            _ => return Err(VocabError::UnknownRoot(note.to_string())),
        }
    }
    if shift.abs() > 2 {
        return Err(VocabError::UnknownRoot(note.to_string()));
    }
    Ok((base + shift).rem_euclid(NUM_ROOTS as i64) as usize)
}

impl FromStr for ChordLabel {
    type Err = VocabError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let text = text.trim();
        if text == "N" {
            return Ok(Self::NO_CHORD);
        }
        let (note, short) = text.split_once(':').ok_or_else(|| VocabError::Malformed(text.to_string()))?;
        if note.is_empty() || short.is_empty() {
            return Err(VocabError::Malformed(text.to_string()));
        }
        let root = parse_root(note)?;
        let ctype = ChordType::from_shorthand(short).ok_or_else(|| VocabError::UnknownShorthand(short.to_string()))?;
        Ok(Self::new(root, ctype))
    }
}

impl fmt::Display for ChordLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.root() {
            None => f.write_str("N"),
            Some(r) => write!(f, "{}:{}", SHARP_NAMES[r], self.ctype.shorthand()),
        }
    }
}

pub fn parse_label(text: &str) -> Result<ChordLabel, VocabError> {
    text.parse()
}

pub fn format_label(label: ChordLabel) -> String {
    label.to_string()
}

/// The 25-class major/minor/no-chord reduction, plus a marker for frames
/// excluded from majmin scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MajminLabel {
    Maj(u8),
    Min(u8),
    NoChord,
    Unmapped,
}

impl MajminLabel {
    /// Class index in [0, 25), or `None` for unmapped.
    pub fn class(self) -> Option<usize> {
        match self {
            MajminLabel::Maj(r) => Some(r as usize),
            MajminLabel::Min(r) => Some(NUM_ROOTS + r as usize),
            MajminLabel::NoChord => Some(2 * NUM_ROOTS),
            MajminLabel::Unmapped => None,
        }
    }
}

/// `index,harte_name` table, one row per label, with a header.
pub fn vocabulary_csv() -> String {
    let mut s = String::from("index,harte_name\n");
    for l in ChordLabel::all() {
        s.push_str(&format!("{},{}\n", l.index(), l));
    }
    s
}

/// SHA-256 of [`vocabulary_csv`], stamped into corpus manifests.
pub fn vocabulary_hash() -> String {
    hex::encode(Sha256::digest(vocabulary_csv().as_bytes()))
}
