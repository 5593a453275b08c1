//! Frame-level accuracy, confusion by chord type, segment durations and
//! report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::vocab::{ChordLabel, ChordType};

/// Default frame rate: 4096-sample hop at 44.1 kHz.
pub const DEFAULT_FPS: f64 = 44100.0 / 4096.0;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("estimate has {est} frames, reference has {reference}")]
    Length { est: usize, reference: usize },
    #[error("label index {0} out of range")]
    Label(usize),
    #[error("no scored frames")]
    NoScoredFrames,
    #[error("empty corpus")]
    Empty,
    #[error("fps must be positive, got {0}")]
    Fps(f64),
    #[error("song ids differ; missing estimates: {missing_estimates:?}; missing references: {missing_references:?}")]
    Ids {
        missing_estimates: Vec<String>,
        missing_references: Vec<String>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Majmin,
    Triads,
}

impl FromStr for Criterion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "majmin" => Ok(Criterion::Majmin),
            "triads" => Ok(Criterion::Triads),
            _ => Err(format!("unknown criterion {s:?} (majmin, triads)")),
        }
    }
}

impl Criterion {
    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Majmin => "majmin",
            Criterion::Triads => "triads",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameScore {
    pub matched: usize,
    pub scored: usize,
}

impl FrameScore {
    /// `None` when no frame was scored.
    pub fn accuracy(self) -> Option<f64> {
        (self.scored > 0).then(|| self.matched as f64 / self.scored as f64)
    }
}

fn labels(seq: &[usize]) -> Result<Vec<ChordLabel>, EvalError> {
    seq.iter()
        .map(|&i| ChordLabel::from_index(i).map_err(|_| EvalError::Label(i)))
        .collect()
}

fn check_len(est: &[usize], reference: &[usize]) -> Result<(), EvalError> {
    if est.len() != reference.len() {
        return Err(EvalError::Length {
            est: est.len(),
            reference: reference.len(),
        });
    }
    Ok(())
}

/// Triads: exact index match on every frame. Majmin: both sides reduced to the
/// 25 major/minor/no-chord classes; frames whose reference does not reduce are
/// skipped.
pub fn frame_accuracy(est: &[usize], reference: &[usize], criterion: Criterion) -> Result<FrameScore, EvalError> {
    check_len(est, reference)?;
    let (e, r) = (labels(est)?, labels(reference)?);
    let mut score = FrameScore::default();
    for (e, r) in e.iter().zip(&r) {
        match criterion {
            Criterion::Triads => {
                score.scored += 1;
                score.matched += (e == r) as usize;
            }
            Criterion::Majmin => {
                if let Some(rc) = r.reduce_majmin().class() {
                    score.scored += 1;
                    score.matched += (e.reduce_majmin().class() == Some(rc)) as usize;
                }
            }
        }
    }
    Ok(score)
}

/// Total matched over total scored frames.
pub fn weighted_corpus_accuracy(scores: &[FrameScore]) -> Result<f64, EvalError> {
    let matched: usize = scores.iter().map(|s| s.matched).sum();
    let scored: usize = scores.iter().map(|s| s.scored).sum();
    FrameScore { matched, scored }.accuracy().ok_or(EvalError::NoScoredFrames)
}

/// Frame counts by (reference type, estimated type) where the roots agree;
/// other frames go to `root_errors`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeConfusion {
    pub counts: [[u64; 9]; 9],
    pub root_errors: u64,
}

impl TypeConfusion {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.root_errors
    }

    pub fn add(&mut self, o: &TypeConfusion) {
        for (a, b) in self.counts.iter_mut().flatten().zip(o.counts.iter().flatten()) {
            *a += b;
        }
        self.root_errors += o.root_errors;
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("reference");
        for t in ChordType::ALL {
            let _ = write!(s, ",{}", t.shorthand());
        }
        s.push('\n');
        for (i, t) in ChordType::ALL.iter().enumerate() {
            s.push_str(t.shorthand());
            for c in &self.counts[i] {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "root_errors,{}", self.root_errors);
        s
    }
}

pub fn confusion_by_type(est: &[usize], reference: &[usize]) -> Result<TypeConfusion, EvalError> {
    check_len(est, reference)?;
    let (e, r) = (labels(est)?, labels(reference)?);
    let mut c = TypeConfusion::default();
    for (e, r) in e.iter().zip(&r) {
        if e.root() == r.root() {
            c.counts[r.ctype().ordinal()][e.ctype().ordinal()] += 1;
        } else {
            c.root_errors += 1;
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub segments: usize,
    pub mean_frames: f64,
    pub median_frames: f64,
    pub mean_seconds: f64,
    pub median_seconds: f64,
}

/// Maximal runs of equal labels.
pub fn segments(seq: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (i, &l) in seq.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.label == l => s.frames += 1,
            _ => out.push(Segment {
                label: l,
                start: i,
                frames: 1,
            }),
        }
    }
    out
}

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    }
}

/// Summary of segment lengths pooled over any number of sequences.
pub fn duration_stats(lengths: &[usize], fps: f64) -> Result<DurationStats, EvalError> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(EvalError::Fps(fps));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let mean = if sorted.is_empty() {
        0.0
    } else {
        sorted.iter().sum::<usize>() as f64 / sorted.len() as f64
    };
    let med = median(&sorted);
    Ok(DurationStats {
        segments: sorted.len(),
        mean_frames: mean,
        median_frames: med,
        mean_seconds: mean / fps,
        median_seconds: med / fps,
    })
}

/// Segments of one sequence with their summary statistics.
pub fn segment_durations(seq: &[usize], fps: f64) -> Result<(Vec<Segment>, DurationStats), EvalError> {
    let segs = segments(seq);
    let lengths: Vec<usize> = segs.iter().map(|s| s.frames).collect();
    let stats = duration_stats(&lengths, fps)?;
    Ok((segs, stats))
}

/// Estimates for one song: the final labels and optionally the frame-wise
/// argmax before Viterbi smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct SongEstimate {
    pub id: String,
    pub labels: Vec<usize>,
    pub pre_viterbi: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongEval {
    pub id: String,
    pub frames: usize,
    pub majmin: FrameScore,
    pub triads: FrameScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: BTreeMap<String, String>,
    pub fps: f64,
    pub songs: Vec<SongEval>,
    pub majmin: Option<f64>,
    pub triads: Option<f64>,
    pub confusion: TypeConfusion,
    /// Durations of the estimate sequences; keyed `final` and, when
    /// available, `pre_viterbi`.
    pub durations: BTreeMap<String, DurationStats>,
    pub segments: BTreeMap<String, Vec<(String, Segment)>>,
}

/// Scores estimates against references (matched by song id).
pub fn evaluate(
    estimates: &[SongEstimate],
    references: &BTreeMap<String, Vec<usize>>,
    fps: f64,
    metadata: BTreeMap<String, String>,
) -> Result<EvalReport, EvalError> {
    if estimates.is_empty() {
        return Err(EvalError::Empty);
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(EvalError::Fps(fps));
    }
    let est_ids: std::collections::BTreeSet<&String> = estimates.iter().map(|e| &e.id).collect();
    let missing_references: Vec<String> = est_ids
        .iter()
        .filter(|id| !references.contains_key(id.as_str()))
        .map(|s| s.to_string())
        .collect();
    let missing_estimates: Vec<String> = references.keys().filter(|id| !est_ids.contains(id)).cloned().collect();
    if !missing_references.is_empty() || !missing_estimates.is_empty() {
        return Err(EvalError::Ids {
            missing_estimates,
            missing_references,
        });
    }
    let mut songs = Vec::with_capacity(estimates.len());
    let mut confusion = TypeConfusion::default();
    let mut segs: BTreeMap<String, Vec<(String, Segment)>> = BTreeMap::new();
    for e in estimates {
        let r = &references[&e.id];
        songs.push(SongEval {
            id: e.id.clone(),
            frames: r.len(),
            majmin: frame_accuracy(&e.labels, r, Criterion::Majmin)?,
            triads: frame_accuracy(&e.labels, r, Criterion::Triads)?,
        });
        confusion.add(&confusion_by_type(&e.labels, r)?);
        let list = segs.entry("final".into()).or_default();
        list.extend(segments(&e.labels).into_iter().map(|s| (e.id.clone(), s)));
        if let Some(pre) = &e.pre_viterbi {
            check_len(pre, r)?;
            let list = segs.entry("pre_viterbi".into()).or_default();
            list.extend(segments(pre).into_iter().map(|s| (e.id.clone(), s)));
        }
    }
    let mut durations = BTreeMap::new();
    for (k, list) in &segs {
        let lengths: Vec<usize> = list.iter().map(|(_, s)| s.frames).collect();
        durations.insert(k.clone(), duration_stats(&lengths, fps)?);
    }
    let mm: Vec<FrameScore> = songs.iter().map(|s| s.majmin).collect();
    let tr: Vec<FrameScore> = songs.iter().map(|s| s.triads).collect();
    Ok(EvalReport {
        metadata,
        fps,
        majmin: weighted_corpus_accuracy(&mm).ok(),
        triads: weighted_corpus_accuracy(&tr).ok(),
        songs,
        confusion,
        durations,
        segments: segs,
    })
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "excluded".to_string(), |v| format!("{v}"))
}

impl EvalReport {
    pub fn per_song_csv(&self, criteria: &[Criterion]) -> String {
        let mut s = String::from("song,frames");
        for c in criteria {
            let n = c.as_str();
            let _ = write!(s, ",{n}_matched,{n}_scored,{n}_accuracy");
        }
        s.push('\n');
        for song in &self.songs {
            let _ = write!(s, "{},{}", song.id, song.frames);
            for c in criteria {
                let f = match c {
                    Criterion::Majmin => song.majmin,
                    Criterion::Triads => song.triads,
                };
                let _ = write!(s, ",{},{},{}", f.matched, f.scored, fmt_acc(f.accuracy()));
            }
            s.push('\n');
        }
        s
    }

    pub fn durations_csv(&self) -> String {
        let mut s = String::from("variant,song,start,frames,seconds,label\n");
        for (variant, list) in &self.segments {
            for (song, seg) in list {
                let name = ChordLabel::from_index(seg.label).map(|l| l.to_string()).unwrap_or_default();
                let _ = writeln!(
                    s,
                    "{variant},{song},{},{},{},{name}",
                    seg.start,
                    seg.frames,
                    seg.frames as f64 / self.fps
                );
            }
        }
        s
    }

    pub fn summary(&self, criteria: &[Criterion]) -> String {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "{k}: {v}");
        }
        let _ = writeln!(s, "songs: {}", self.songs.len());
        for c in criteria {
            let a = match c {
                Criterion::Majmin => self.majmin,
                Criterion::Triads => self.triads,
            };
            let _ = writeln!(s, "{}: {}", c.as_str(), fmt_acc(a));
        }
        let _ = writeln!(s, "root_errors: {}", self.confusion.root_errors);
        for (k, d) in &self.durations {
            let _ = writeln!(
                s,
                "durations[{k}]: segments {} mean {:.3} s median {:.3} s",
                d.segments, d.mean_seconds, d.median_seconds
            );
        }
        s
    }
}

/// Writes `per_song.csv`, `confusion.csv`, `durations.csv`, `summary.txt`
/// and `report.json` into `dir`. Everything is rendered before the first file
/// is written.
pub fn emit_report(report: &EvalReport, criteria: &[Criterion], dir: &Path) -> Result<(), EvalError> {
    if report.songs.is_empty() {
        return Err(EvalError::Empty);
    }
    let files = [
        ("per_song.csv", report.per_song_csv(criteria)),
        ("confusion.csv", report.confusion.to_csv()),
        ("durations.csv", report.durations_csv()),
        ("summary.txt", report.summary(criteria)),
        (
            "report.json",
            serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        ),
    ];
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io(&p))?;
    }
    Ok(())
}
