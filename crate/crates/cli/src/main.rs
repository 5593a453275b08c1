//! `chordvae`: synthesize corpora, train under each experimental condition,
//! estimate chord labels, score them, and inspect learned templates.

mod commands;
mod config;
mod error;
mod model;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use chordvae::evaluation::Criterion;
use chordvae::training::TrainMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, CliResult};

pub const THREADS_ENV: &str = "CHORDVAE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "chordvae", version, about = "Semi-supervised chord estimation with a label-conditioned VAE")]
struct Cli {
    /// Worker threads for per-song work [env: CHORDVAE_THREADS; default: 1]
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic annotated corpus.
    Synth(SynthArgs),
    /// Train a model on one fold of a corpus.
    Train(TrainArgs),
    /// Estimate frame labels with a trained model.
    Estimate(EstimateArgs),
    /// Score estimates against reference labels.
    Eval(EvalArgs),
    /// Dump generator outputs for each chord type at root C.
    Inspect(InspectArgs),
    /// Print the label vocabulary as CSV.
    Vocab,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with a [synth] section.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub songs: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub noise_std: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub deviation_scale: Option<f64>,
    /// Probability that a chord segment continues at each frame.
    #[arg(long, allow_negative_numbers = true)]
    pub segment_self_prob: Option<f64>,
    /// Replace `--out` if it exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PriorArg {
    Uniform,
    Markov,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with [training] and [split] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// ace-sl, vae-sl, vae-ssl or vae-un.
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long, value_enum)]
    pub prior: Option<PriorArg>,
    /// Self-transition probability of the Markov label prior.
    #[arg(long, allow_negative_numbers = true)]
    pub p_self: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_songs: Option<usize>,
    #[arg(long)]
    pub frames_per_clip: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr_decay: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub grad_clip_norm: Option<f64>,
    /// Gumbel-softmax temperature.
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub latent: Option<usize>,
    /// Share of the training songs that keep their labels.
    #[arg(long, allow_negative_numbers = true)]
    pub annotated_fraction: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Held-out fold index.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Seed of the song shuffle that defines the folds.
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    /// Every song of the corpus.
    All,
    /// The fold held out when the checkpoint was trained.
    Test,
}

#[derive(Args, Debug)]
pub struct EstimateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory to label.
    #[arg(long, conflicts_with = "csv", required_unless_present = "csv")]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all", requires = "corpus")]
    pub subset: Subset,
    /// Chroma CSV file(s) (`frame,dim0..dim35[,label]`); the file stem is the song id.
    #[arg(long, num_args = 1..)]
    pub csv: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Emit frame-wise argmax labels only.
    #[arg(long)]
    pub no_viterbi: bool,
    /// Viterbi self-transition; defaults to the model's prior, or 0.9 without one.
    #[arg(long, allow_negative_numbers = true, conflicts_with = "no_viterbi")]
    pub p_self: Option<f64>,
    /// Also write per-frame label posteriors.
    #[arg(long)]
    pub posteriors: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Output directory of `estimate`.
    #[arg(long)]
    pub estimates: PathBuf,
    /// Corpus directory, or another estimates directory.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Criteria to report; both by default.
    #[arg(long, value_parser = parse_criterion)]
    pub criterion: Vec<Criterion>,
    /// Frames per second, for durations in seconds.
    #[arg(long, allow_negative_numbers = true)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    s.parse::<Criterion>().map_err(|e| e.to_string())
}

fn thread_count(flag: Option<usize>) -> CliResult<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
            Err(_) => 1,
        },
    };
    if n == 0 {
        return Err(CliError::usage("thread count must be positive"));
    }
    Ok(n)
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = thread_count(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let argv: Vec<String> = std::env::args().collect();
    match cli.command {
        Command::Synth(a) => commands::synth(&a, argv),
        Command::Train(a) => commands::train(&a, argv),
        Command::Estimate(a) => commands::estimate(&a, argv),
        Command::Eval(a) => commands::eval(&a, argv),
        Command::Inspect(a) => commands::inspect(&a, argv),
        Command::Vocab => {
            print!("{}", chordvae::vocab::vocabulary_csv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind as u8)
        }
    }
}
