use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChordSequence, ChromaSequence, Corpus, CorpusError, Song, SynthConfig};
use crate::vocab::{vocabulary_hash, ChordLabel, CHROMA_DIM};

const MAGIC: &[u8; 4] = b"CVAE";
const MANIFEST_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongEntry {
    pub id: String,
    pub file: String,
    pub frames: usize,
    pub has_labels: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub vocabulary_hash: String,
    pub songs: Vec<SongEntry>,
    pub synth: Option<SynthConfig>,
}

/// Serializes one song in the binary record format.
pub fn write_song_file(song: &Song, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(song.frames() as u32).to_le_bytes())?;
    w.write_all(&(CHROMA_DIM as u32).to_le_bytes())?;
    w.write_all(&[song.labels.is_some() as u8])?;
    for v in song.chroma.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(labels) = &song.labels {
        for l in labels.indices() {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parses one binary song record; `id` names the song in errors.
pub fn read_song_file(id: &str, bytes: &[u8]) -> Result<Song, CorpusError> {
    let malformed = |msg: String| CorpusError::Malformed {
        what: format!("song {id}"),
        msg,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(malformed("missing CVAE header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let frames = u32_at(4);
    let dim = u32_at(8);
    if dim != CHROMA_DIM {
        return Err(malformed(format!("chroma width {dim}, expected {CHROMA_DIM}")));
    }
    let has_labels = match bytes[12] {
        0 => false,
        1 => true,
        b => return Err(malformed(format!("has_labels byte {b}"))),
    };
    let chroma_bytes = frames * dim * 4;
    let label_bytes = if has_labels { frames * 2 } else { 0 };
    if bytes.len() != HEADER_LEN + chroma_bytes + label_bytes {
        return Err(malformed(format!(
            "{} bytes for {frames} frames (labels: {has_labels})",
            bytes.len()
        )));
    }
    let body = &bytes[HEADER_LEN..];
    let values = body[..chroma_bytes]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let chroma = ChromaSequence::new(values, id)?;
    let labels = if has_labels {
        let idx = body[chroma_bytes..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes")))
            .collect();
        Some(ChordSequence::new(idx, id)?)
    } else {
        None
    };
    Song::new(id, chroma, labels)
}

/// Writes `manifest.json` plus one `song_NNNNN.bin` per song into `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for (i, song) in corpus.songs.iter().enumerate() {
        let file = format!("song_{i:05}.bin");
        let path = dir.join(&file);
        let f = fs::File::create(&path).map_err(|e| CorpusError::io(&path, e))?;
        let mut w = BufWriter::new(f);
        write_song_file(song, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| CorpusError::io(&path, e))?;
        entries.push(SongEntry {
            id: song.id.clone(),
            file,
            frames: song.frames(),
            has_labels: song.labels.is_some(),
        });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        vocabulary_hash: vocabulary_hash(),
        songs: entries,
        synth: corpus.synth.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| CorpusError::io(&path, e))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
        what: path.display().to_string(),
        msg: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(CorpusError::Malformed {
            what: path.display().to_string(),
            msg: format!("unsupported version {}", manifest.version),
        });
    }
    let expected = vocabulary_hash();
    if manifest.vocabulary_hash != expected {
        return Err(CorpusError::VocabularyHash {
            expected,
            found: manifest.vocabulary_hash,
        });
    }
    let mut songs = Vec::with_capacity(manifest.songs.len());
    for entry in &manifest.songs {
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(CorpusError::Malformed {
                what: path.display().to_string(),
                msg: format!("song file name {:?}", entry.file),
            });
        }
        let p = dir.join(&entry.file);
        let mut bytes = Vec::new();
        fs::File::open(&p)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| CorpusError::io(&p, e))?;
        let song = read_song_file(&entry.id, &bytes)?;
        if song.frames() != entry.frames || song.labels.is_some() != entry.has_labels {
            return Err(CorpusError::Malformed {
                what: format!("song {}", entry.id),
                msg: "record disagrees with manifest".into(),
            });
        }
        songs.push(song);
    }
    Corpus::new(songs, manifest.synth)
}

/// Reads `frame,dim0..dim35[,label]` rows. Labels may be Harte strings or
/// vocabulary indices.
pub fn import_csv_song(id: &str, reader: impl Read) -> Result<Song, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let malformed = |msg: String| CorpusError::Malformed {
        what: format!("csv for {id}"),
        msg,
    };
    let headers = rdr.headers().map_err(|e| malformed(e.to_string()))?.clone();
    let has_label = match headers.len() {
        n if n == CHROMA_DIM + 1 => false,
        n if n == CHROMA_DIM + 2 => true,
        n => return Err(malformed(format!("{n} columns, expected {} or {}", CHROMA_DIM + 1, CHROMA_DIM + 2))),
    };
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        for d in 0..CHROMA_DIM {
            let v: f32 = rec[d + 1]
                .trim()
                .parse()
                .map_err(|_| malformed(format!("row {row}: bad value {:?}", &rec[d + 1])))?;
            values.push(v);
        }
        if has_label {
            let text = rec[CHROMA_DIM + 1].trim();
            let idx = match text.parse::<usize>() {
                Ok(i) => i,
                Err(_) => text
                    .parse::<ChordLabel>()
                    .map_err(|e| malformed(format!("row {row}: {e}")))?
                    .index(),
            };
            let idx = u16::try_from(idx).unwrap_or(u16::MAX);
            labels.push(idx);
        }
    }
    let chroma = ChromaSequence::new(values, id)?;
    let labels = if has_label {
        Some(ChordSequence::new(labels, id)?)
    } else {
        None
    };
    Song::new(id, chroma, labels)
}
