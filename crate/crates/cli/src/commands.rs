use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chordvae::corpus::{
    generate_synthetic_corpus, import_csv_song, load_corpus, split_folds, Corpus, Song,
};
use chordvae::diffmath::encode_checkpoint;
use chordvae::evaluation::{emit_report, evaluate, Criterion, SongEstimate, DEFAULT_FPS};
use chordvae::inference::decode_song;
use chordvae::objectives::one_hot;
use chordvae::training::{epoch_log_csv, train as run_training, PriorKind, TrainMode};
use chordvae::vocab::{
    parse_label, vocabulary_hash, ChordLabel, ChordType, CHANNELS, NUM_LABELS, NUM_ROOTS, SHARP_NAMES,
};
use chordvae::{Tensor64, TransitionModel64};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{CliError, CliResult};
use crate::model::{load_model, CheckpointMeta};
use crate::output::{build_id, RunManifest, Staging};
use crate::{EstimateArgs, EvalArgs, InspectArgs, PriorArg, Subset, SynthArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EPOCH_LOG_FILE: &str = "epochs.csv";
pub const ESTIMATE_INDEX: &str = "estimates.json";
pub const TEMPLATE_FILE: &str = "templates.csv";

fn manifest(command: &str, argv: Vec<String>, config: serde_json::Value, seed: Option<u64>, inputs: &[&Path]) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        argv,
        config,
        seed,
        build: build_id(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: Vec::new(),
        wall_clock_seconds: 0.0,
    }
}

pub fn synth(a: &SynthArgs, argv: Vec<String>) -> CliResult<()> {
    let file = config::load(a.config.as_deref())?;
    let mut cfg = file.synth.unwrap_or_default();
    if let Some(v) = a.songs {
        cfg.song_count = v;
    }
    if let Some(v) = a.frames {
        cfg.frames_per_song = v;
    }
    if let Some(v) = a.seed {
        cfg.rng_seed = v;
    }
    if let Some(v) = a.noise_std {
        cfg.noise_std = v;
    }
    if let Some(v) = a.deviation_scale {
        cfg.deviation_scale = v;
    }
    if let Some(v) = a.segment_self_prob {
        cfg.segment_self_prob = v;
    }
    cfg.validate()?;
    let staging = Staging::new(&a.out, a.force)?;
    let corpus = generate_synthetic_corpus(&cfg)?;
    chordvae::corpus::save_corpus(&corpus, staging.path())?;
    let seed = cfg.rng_seed;
    let m = manifest("synth", argv, to_json(&cfg), Some(seed), &[]);
    let out = staging.commit(m)?;
    info!("wrote {} songs to {}", corpus.len(), out.display());
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

/// Resolves the training condition: defaults, then the config file, then flags.
pub fn resolve_training(a: &TrainArgs) -> CliResult<CheckpointMeta> {
    let file = config::load(a.config.as_deref())?;
    let mut t = file.training.unwrap_or_default();
    let mut split = file.split.unwrap_or_default();
    if let Some(m) = a.mode {
        t.mode = m;
    }
    let prior_flags = a.prior.is_some() || a.p_self.is_some();
    if t.mode == TrainMode::SupervisedBaseline {
        if prior_flags {
            warn!("mode ace-sl has no label prior; ignoring --prior/--p-self");
        }
    } else {
        t.prior = match (a.prior, a.p_self) {
            (Some(PriorArg::Uniform), Some(_)) => {
                return Err(CliError::usage("--p-self applies only to --prior markov"));
            }
            (Some(PriorArg::Uniform), None) => PriorKind::Uniform,
            (Some(PriorArg::Markov), p) | (None, p @ Some(_)) => {
                let current = match t.prior {
                    PriorKind::Markov { p_self } => p_self,
                    PriorKind::Uniform => crate::model::DEFAULT_VITERBI_P_SELF,
                };
                PriorKind::Markov { p_self: p.unwrap_or(current) }
            }
            (None, None) => t.prior,
        };
    }
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.epochs, t.epochs);
    set!(a.batch_songs, t.batch_songs);
    set!(a.frames_per_clip, t.frames_per_clip);
    set!(a.learning_rate, t.learning_rate);
    set!(a.lr_decay, t.lr_decay);
    set!(a.grad_clip_norm, t.grad_clip_norm);
    set!(a.tau, t.tau);
    set!(a.seed, t.seed);
    set!(a.layers, t.encoder.layers);
    set!(a.hidden, t.encoder.hidden);
    set!(a.latent, t.encoder.latent);
    set!(a.annotated_fraction, split.annotated_fraction);
    set!(a.folds, split.folds);
    set!(a.fold, split.fold);
    set!(a.split_seed, split.seed);
    t.validate()?;
    if t.encoder.labels != NUM_LABELS || t.encoder.chroma != CHANNELS * NUM_ROOTS {
        return Err(CliError::validation(format!(
            "encoder must map {} chroma dims to {NUM_LABELS} labels",
            CHANNELS * NUM_ROOTS
        )));
    }
    Ok(CheckpointMeta {
        training: t,
        split,
        vocabulary_hash: vocabulary_hash(),
    })
}

pub fn train(a: &TrainArgs, argv: Vec<String>) -> CliResult<()> {
    let meta = resolve_training(a)?;
    let corpus = load_corpus(&a.corpus)?;
    let s = &meta.split;
    let split = split_folds(&corpus, s.folds, s.fold, s.annotated_fraction, s.seed)?;
    let staging = Staging::new(&a.out, a.force)?;
    let t = &meta.training;
    info!(
        "training {} (prior {}) on {} annotated + {} unannotated songs, {} held out",
        t.mode,
        meta.prior_name(),
        split.annotated.len(),
        split.unannotated.len(),
        split.test.len()
    );
    let outcome = run_training(&split, t, |row| {
        info!(
            "epoch {:>3}  objective {:.4}  grad_norm {:.3}",
            row.epoch, row.objective, row.grad_norm
        );
    })?;
    for w in &outcome.warnings {
        warn!("{w}");
    }
    let config = to_json(&meta);
    staging.write(CHECKPOINT_FILE, encode_checkpoint(&config, &outcome.model.store))?;
    staging.write(EPOCH_LOG_FILE, epoch_log_csv(&outcome.log))?;
    let m = manifest("train", argv, config, Some(t.seed), &[&a.corpus]);
    let out = staging.commit(m)?;
    info!("wrote {}", out.display());
    Ok(())
}

/// Which songs an estimates directory covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SubsetSpec {
    All,
    Test { folds: usize, fold: usize, seed: u64 },
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateEntry {
    pub id: String,
    pub file: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateIndex {
    pub checkpoint_hash: String,
    pub mode: String,
    pub prior: String,
    pub train_p_self: Option<f64>,
    pub viterbi_p_self: Option<f64>,
    pub seed: u64,
    pub subset: SubsetSpec,
    pub songs: Vec<EstimateEntry>,
}

impl EstimateIndex {
    pub fn metadata(&self) -> BTreeMap<String, String> {
        let opt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |p| p.to_string());
        BTreeMap::from([
            ("mode".to_string(), self.mode.clone()),
            ("prior".to_string(), self.prior.clone()),
            ("p_self".to_string(), opt(self.train_p_self)),
            ("viterbi_p_self".to_string(), opt(self.viterbi_p_self)),
            ("seed".to_string(), self.seed.to_string()),
        ])
    }
}

fn check_song_id(id: &str) -> CliResult<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "song id {id:?} cannot name a file (use letters, digits, '_', '-', '.')"
        )))
    }
}

fn label_name(i: usize) -> String {
    ChordLabel::from_index(i).expect("vocabulary index").to_string()
}

fn labels_csv(pre: &[usize], fin: Option<&[usize]>) -> String {
    let mut s = String::from(if fin.is_some() { "frame,label,pre_viterbi\n" } else { "frame,label\n" });
    for (n, &p) in pre.iter().enumerate() {
        match fin {
            Some(f) => writeln!(s, "{n},{},{}", label_name(f[n]), label_name(p)),
            None => writeln!(s, "{n},{}", label_name(p)),
        }
        .expect("string write");
    }
    s
}

fn posteriors_csv(p: &Tensor64) -> String {
    let mut s = String::from("frame");
    for k in 0..p.cols() {
        let _ = write!(s, ",{}", label_name(k));
    }
    s.push('\n');
    for r in 0..p.rows() {
        let _ = write!(s, "{r}");
        for v in p.row(r) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn read_csv_songs(paths: &[PathBuf]) -> CliResult<Vec<Song>> {
    let mut songs = Vec::with_capacity(paths.len());
    for p in paths {
        let id = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| CliError::usage(format!("{} has no file name", p.display())))?;
        let f = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
        songs.push(import_csv_song(&id, f)?);
    }
    // Corpus::new rejects duplicate ids.
    Ok(Corpus::new(songs, None)?.songs)
}

pub fn estimate(a: &EstimateArgs, argv: Vec<String>) -> CliResult<()> {
    let loaded = load_model(&a.checkpoint)?;
    let meta = &loaded.meta;
    let (songs, subset, mut inputs) = match &a.corpus {
        Some(dir) => {
            let corpus = load_corpus(dir)?;
            match a.subset {
                Subset::All => (corpus.songs, SubsetSpec::All, vec![dir.clone()]),
                Subset::Test => {
                    let s = &meta.split;
                    let split = split_folds(&corpus, s.folds, s.fold, 1.0, s.seed)?;
                    let spec = SubsetSpec::Test {
                        folds: s.folds,
                        fold: s.fold,
                        seed: s.seed,
                    };
                    (split.test, spec, vec![dir.clone()])
                }
            }
        }
        None => (read_csv_songs(&a.csv)?, SubsetSpec::Csv, a.csv.clone()),
    };
    inputs.insert(0, a.checkpoint.clone());
    for s in &songs {
        check_song_id(&s.id)?;
    }
    let viterbi_p_self = if a.no_viterbi {
        None
    } else {
        Some(a.p_self.unwrap_or_else(|| meta.viterbi_p_self()))
    };
    let transitions = viterbi_p_self
        .map(|p| TransitionModel64::self_transition(NUM_LABELS, p))
        .transpose()
        .map_err(|e| CliError::validation(format!("--p-self: {e}")))?;
    let staging = Staging::new(&a.out, a.force)?;

    let decoded: Vec<_> = songs
        .par_iter()
        .map(|s| decode_song(&loaded.model, &s.chroma, transitions.as_ref()))
        .collect::<Result<_, _>>()?;

    let mut entries = Vec::with_capacity(songs.len());
    for (song, d) in songs.iter().zip(&decoded) {
        let file = format!("{}.csv", song.id);
        staging.write(&file, labels_csv(&d.argmax, d.viterbi.as_deref()))?;
        if a.posteriors {
            staging.write(&format!("{}.posteriors.csv", song.id), posteriors_csv(&d.posteriors))?;
        }
        entries.push(EstimateEntry {
            id: song.id.clone(),
            file,
            frames: song.frames(),
        });
    }
    let index = EstimateIndex {
        checkpoint_hash: loaded.checkpoint.config_hash.clone(),
        mode: meta.training.mode.to_string(),
        prior: meta.prior_name().to_string(),
        train_p_self: meta.train_p_self(),
        viterbi_p_self,
        seed: meta.training.seed,
        subset,
        songs: entries,
    };
    staging.write(ESTIMATE_INDEX, serde_json::to_string_pretty(&index).expect("index serializes") + "\n")?;
    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let config = serde_json::json!({
        "checkpoint_config": loaded.checkpoint.config,
        "viterbi_p_self": viterbi_p_self,
        "posteriors": a.posteriors,
    });
    let m = manifest("estimate", argv, config, Some(meta.training.seed), &input_refs);
    let out = staging.commit(m)?;
    info!("labelled {} songs into {}", songs.len(), out.display());
    Ok(())
}

fn read_index(dir: &Path) -> CliResult<EstimateIndex> {
    let p = dir.join(ESTIMATE_INDEX);
    let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))
}

/// Label columns of one estimate file: final labels and, if present, the
/// pre-Viterbi argmax.
fn read_estimate_file(path: &Path, frames: usize) -> CliResult<(Vec<usize>, Option<Vec<usize>>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |m: String| CliError::validation(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let with_pre = match header {
        "frame,label,pre_viterbi" => true,
        "frame,label" => false,
        h => return Err(bad(format!("unexpected header {h:?}"))),
    };
    let parse = |t: &str, row: usize| parse_label(t).map(|l| l.index()).map_err(|e| bad(format!("row {row}: {e}")));
    let mut fin = Vec::with_capacity(frames);
    let mut pre = Vec::with_capacity(frames);
    for (row, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != if with_pre { 3 } else { 2 } || cols[0] != row.to_string() {
            return Err(bad(format!("malformed row {row}: {line:?}")));
        }
        fin.push(parse(cols[1], row)?);
        if with_pre {
            pre.push(parse(cols[2], row)?);
        }
    }
    if fin.len() != frames {
        return Err(bad(format!("{} rows, index says {frames}", fin.len())));
    }
    Ok((fin, with_pre.then_some(pre)))
}

fn reference_labels(dir: &Path, subset: &SubsetSpec) -> CliResult<BTreeMap<String, Vec<usize>>> {
    if dir.join(ESTIMATE_INDEX).exists() {
        let index = read_index(dir)?;
        let mut refs = BTreeMap::new();
        for e in &index.songs {
            let (fin, _) = read_estimate_file(&dir.join(&e.file), e.frames)?;
            refs.insert(e.id.clone(), fin);
        }
        return Ok(refs);
    }
    let corpus = load_corpus(dir)?;
    let songs = match subset {
        SubsetSpec::Test { folds, fold, seed } => split_folds(&corpus, *folds, *fold, 1.0, *seed)?.test,
        SubsetSpec::All | SubsetSpec::Csv => corpus.songs,
    };
    let mut refs = BTreeMap::new();
    for s in songs {
        let labels = s
            .labels
            .as_ref()
            .ok_or_else(|| CliError::validation(format!("reference song {} has no labels", s.id)))?;
        refs.insert(s.id.clone(), labels.as_usize());
    }
    Ok(refs)
}

pub fn eval(a: &EvalArgs, argv: Vec<String>) -> CliResult<()> {
    let fps = a.fps.unwrap_or(DEFAULT_FPS);
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(CliError::validation(format!("--fps must be positive, got {fps}")));
    }
    let mut criteria: Vec<Criterion> = if a.criterion.is_empty() {
        vec![Criterion::Majmin, Criterion::Triads]
    } else {
        a.criterion.clone()
    };
    criteria.dedup();
    let index = read_index(&a.estimates)?;
    let refs = reference_labels(&a.reference, &index.subset)?;
    let estimates: Vec<SongEstimate> = index
        .songs
        .par_iter()
        .map(|e| {
            let (labels, pre_viterbi) = read_estimate_file(&a.estimates.join(&e.file), e.frames)?;
            Ok(SongEstimate {
                id: e.id.clone(),
                labels,
                pre_viterbi,
            })
        })
        .collect::<CliResult<_>>()?;
    let report = evaluate(&estimates, &refs, fps, index.metadata())?;
    let staging = Staging::new(&a.out, a.force)?;
    emit_report(&report, &criteria, staging.path())?;
    let config = serde_json::json!({
        "criteria": criteria.iter().map(|c| c.as_str()).collect::<Vec<_>>(),
        "fps": fps,
        "condition": index.metadata(),
    });
    let m = manifest("eval", argv, config, Some(index.seed), &[&a.estimates, &a.reference]);
    let out = staging.commit(m)?;
    print!("{}", report.summary(&criteria));
    info!("wrote report to {}", out.display());
    Ok(())
}

/// `low_C .. high_B` column names of a chroma frame.
pub fn chroma_columns() -> Vec<String> {
    ["low", "mid", "high"]
        .iter()
        .flat_map(|band| SHARP_NAMES.iter().map(move |p| format!("{band}_{p}")))
        .collect()
}

pub fn inspect(a: &InspectArgs, argv: Vec<String>) -> CliResult<()> {
    let loaded = load_model(&a.checkpoint)?;
    let staging = Staging::new(&a.out, a.force)?;
    let labels: Vec<ChordLabel> = ChordType::ALL
        .iter()
        .map(|&t| if t == ChordType::NoChord { ChordLabel::NO_CHORD } else { ChordLabel::new(0, t) })
        .collect();
    let mut s = String::from("label");
    for c in chroma_columns() {
        s.push(',');
        s.push_str(&c);
    }
    s.push('\n');
    let latent = loaded.meta.training.encoder.latent;
    for l in &labels {
        let onehot = one_hot::<f64>(&[l.index()], NUM_LABELS);
        let omega = loaded
            .model
            .reconstruct(&onehot, &Tensor64::zeros(&[1, latent]))
            .map_err(|e| CliError::checkpoint(e.to_string()))?;
        s.push_str(&l.to_string());
        for v in omega.row(0) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    staging.write(TEMPLATE_FILE, s)?;
    let m = manifest(
        "inspect",
        argv,
        serde_json::json!({ "checkpoint_config": loaded.checkpoint.config }),
        Some(loaded.meta.training.seed),
        &[&a.checkpoint],
    );
    let out = staging.commit(m)?;
    info!("wrote {}", out.join(TEMPLATE_FILE).display());
    Ok(())
}
