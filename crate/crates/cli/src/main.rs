//! `keyframe`: exact information oracles, scorer training, scoring, selection
//! and coverage evaluation from the command line.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | usage error (bad or unknown flags) |
//! | 3 | input error (unreadable, malformed or inconsistent inputs) |
//! | 4 | invariant failure (a checked property did not hold, or training diverged) |

mod data;
mod gradcheck;
mod oracle;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub const EXIT_INPUT: u8 = 3;
pub const EXIT_INVARIANT: u8 = 4;

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    InvariantFailed,
}

#[derive(Debug, Parser)]
#[command(
    name = "keyframe",
    version,
    about = "Evidence-driven keyframe selection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Exact information-theoretic oracle on a small discrete model.
    Oracle(OracleArgs),
    /// Train the evidence scorer on embedded videos with annotated evidence.
    Train(TrainArgs),
    /// Score frames of one video (or every annotated pair) against a query.
    Score(ScoreArgs),
    /// Pick frames from score vectors with per-bin top-k.
    Select(SelectArgs),
    /// Fraction of selections that hit an annotated evidence segment.
    EvalCoverage(CoverageArgs),
    /// Compare analytic scorer gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic planted-evidence dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct OracleArgs {
    /// JSON model fixture.
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    pub model_fixture: Option<PathBuf>,
    /// Generate a random model with this many frames.
    #[arg(long, requires = "seed")]
    pub random: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Draw an unstructured joint table instead of a naive-Bayes model.
    #[arg(long, requires = "random")]
    pub general: bool,
    #[arg(long, default_value_t = 2)]
    pub frame_alphabet: usize,
    #[arg(long, default_value_t = 2)]
    pub answer_alphabet: usize,
    #[arg(long)]
    pub budget: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Directory of `<video_id>.evsb` and `<query_id>.query.evsb` files.
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    /// TOML file with optional `[scorer]` and `[train]` tables.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log path; defaults to the checkpoint path with a `.loss.txt` extension.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, requires = "query_emb", conflicts_with = "annotations")]
    pub video_emb: Option<PathBuf>,
    #[arg(long, requires = "video_emb")]
    pub query_emb: Option<PathBuf>,
    /// Score every annotated pair instead of a single video.
    #[arg(long, requires = "embeddings", required_unless_present = "video_emb")]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub query_id: Option<String>,
    #[arg(long)]
    pub video_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub bins: usize,
    #[arg(long, default_value_t = 1)]
    pub per_bin: usize,
    /// Ignore the scores and take `bins * per_bin` evenly spaced frames.
    #[arg(long)]
    pub uniform: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CoverageArgs {
    #[arg(long)]
    pub selections: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub instances: u64,
    #[arg(long, default_value_t = 5)]
    pub frames: usize,
    #[arg(long, default_value_t = 6)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub subspaces: usize,
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Negate the analytic gradient of one tensor before comparing.
    #[arg(long, hide = true)]
    pub flip_sign_of: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub videos: usize,
    #[arg(long, default_value_t = 256)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub fps: f64,
    #[arg(long, default_value_t = 8)]
    pub segment_min: usize,
    #[arg(long, default_value_t = 12)]
    pub segment_max: usize,
    /// Seed of the corpus-wide query-to-evidence map.
    #[arg(long, default_value_t = 0)]
    pub corpus_seed: u64,
    /// Seed of the per-video draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Prints `value` as a TOML block headed by the command name.
pub fn print_resolved<T: Serialize>(command: &str, value: &T) {
    println!("# resolved config: {command}");
    match toml::to_string(value) {
        Ok(text) => print!("{text}"),
        Err(e) => println!("# (unprintable: {e})"),
    }
    println!("# end config");
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    match cli.command {
        Command::Oracle(a) => oracle::run(&a),
        Command::Train(a) => pipeline::train(&a),
        Command::Score(a) => pipeline::score(&a),
        Command::Select(a) => pipeline::select(&a),
        Command::EvalCoverage(a) => pipeline::eval_coverage(&a),
        Command::Gradcheck(a) => gradcheck::run(&a),
        Command::Synth(a) => data::synth(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::InvariantFailed) => ExitCode::from(EXIT_INVARIANT),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
