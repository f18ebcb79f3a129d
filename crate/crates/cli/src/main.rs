//! `actkit` command-line front end.
//!
//! Every subcommand writes one JSON document to stdout (or a table with
//! `--human`) and the resolved configuration to stderr. Usage errors exit
//! with status 2, operational errors with status 1 and a JSON cause on
//! stderr.

mod commands;
mod error;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use actkit::prompt::Style;
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Parser, Serialize)]
#[command(name = "actkit", version, about = "Action tokenization, flow numerics, depth scheduling and packing tools")]
pub struct Cli {
    /// Seed for every random draw made by the command.
    #[arg(long, global = true, env = "ACTKIT_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Render tables instead of JSON.
    #[arg(long, global = true)]
    pub human: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Command {
    /// Per-dimension 1st/99th percentile statistics of a corpus.
    Stats(StatsArgs),
    /// Fit normalization statistics and the BPE merge table.
    TrainTokenizer(TrainArgs),
    /// Turn action chunks into token ids.
    Encode(EncodeArgs),
    /// Turn token ids back into action chunks.
    Decode(DecodeArgs),
    /// Measure reconstruction error and token counts over a corpus.
    RoundtripEval(RoundtripArgs),
    /// Replay a frame stream through the adaptive depth scheduler.
    DepthSimulate(DepthArgs),
    /// Pack a stream of example sizes and report utilization.
    PackBench(PackArgs),
    /// Run the Euler integrator on fields with closed-form answers.
    FlowDemo(FlowArgs),
    /// Render a robot prompt from JSON.
    PromptRender(PromptArgs),
    /// Run the analytic invariant suite.
    Selfcheck,
}

#[derive(Debug, Args, Serialize)]
pub struct ChunkingArgs {
    /// Window stride in steps; defaults to the episode frame rate.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    /// Episode corpus, one JSON object per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Action dimensions holding gripper commands.
    #[arg(long, value_delimiter = ',')]
    pub gripper_dims: Vec<usize>,
    #[command(flatten)]
    pub chunking: ChunkingArgs,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("source").required(true).args(["corpus", "mixture"])))]
pub struct TrainArgs {
    /// Train on every chunk of one corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Train on chunks drawn from weighted corpora.
    #[arg(long)]
    pub mixture: Option<PathBuf>,
    /// Chunks drawn from the mixture.
    #[arg(long, default_value_t = 100_000, requires = "mixture")]
    pub samples: usize,
    #[command(flatten)]
    pub chunking: ChunkingArgs,
    #[arg(long, value_delimiter = ',')]
    pub gripper_dims: Vec<usize>,
    #[arg(long, default_value_t = actkit::bpe::DEFAULT_VOCAB)]
    pub vocab_size: usize,
    /// Quantization scale applied to DCT coefficients.
    #[arg(long, default_value_t = 10.0)]
    pub scale: f64,
    /// Worker threads for merge counting; output does not depend on it.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Where to write the tokenizer artifact.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("input").required(true).args(["corpus", "chunk"])))]
pub struct EncodeArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    /// Encode every chunk of an episode corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Encode one chunk given as a JSON array of rows.
    #[arg(long)]
    pub chunk: Option<PathBuf>,
    #[command(flatten)]
    pub chunking: ChunkingArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    #[arg(long)]
    pub artifact: PathBuf,
    /// Output of `encode`.
    #[arg(long)]
    pub tokens: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RoundtripArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub artifact: PathBuf,
    #[command(flatten)]
    pub chunking: ChunkingArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct DepthArgs {
    /// Directory of `.ppm` frames, replayed in file-name order.
    #[arg(long)]
    pub frames: PathBuf,
    /// Patch cosine similarity below which a depth cell is regenerated.
    #[arg(long, default_value_t = actkit::depth::DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    pub threshold: f64,
    /// Cost of generating one depth cell.
    #[arg(long, default_value_t = 1.0)]
    pub generate_cost: f64,
    /// Cost of replaying one cached span.
    #[arg(long, default_value_t = 0.0)]
    pub replay_span_cost: f64,
    /// Fixed cost of every control step.
    #[arg(long, default_value_t = 0.0)]
    pub base_cost: f64,
    /// Actions executed per control step.
    #[arg(long, default_value_t = 30)]
    pub horizon: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PackArgs {
    /// Example sizes, one `{"tokens": .., "crops": ..}` per line.
    #[arg(long)]
    pub examples: PathBuf,
    #[arg(long)]
    pub t_max: u64,
    #[arg(long)]
    pub i_max: u64,
    #[arg(long, default_value_t = actkit::packing::DEFAULT_WEIGHT)]
    pub weight: u64,
    #[arg(long, default_value_t = actkit::packing::DEFAULT_QUANTUM)]
    pub quantum: u64,
    #[arg(long, default_value_t = actkit::packing::DEFAULT_POOL)]
    pub pool: usize,
    /// Worker threads for the solver; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct FlowArgs {
    /// Euler step counts to run.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 10, 100])]
    pub steps: Vec<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleArg {
    Action,
    Depth,
    DepthThenAction,
}

impl From<StyleArg> for Style {
    fn from(s: StyleArg) -> Self {
        match s {
            StyleArg::Action => Style::Action,
            StyleArg::Depth => Style::Depth,
            StyleArg::DepthThenAction => Style::DepthThenAction,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PromptArgs {
    /// JSON robot prompt.
    #[arg(long)]
    pub prompt: PathBuf,
    /// Overrides the style stored in the prompt file.
    #[arg(long, value_enum)]
    pub style: Option<StyleArg>,
    /// Use the task text as given instead of its canonical form.
    #[arg(long)]
    pub verbatim_task: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    eprintln!(
        "{}",
        serde_json::to_string(&serde_json::json!({ "config": &cli })).expect("config serializes")
    );
    match commands::run(&cli) {
        Ok(out) => {
            let text = if cli.human { out.human } else { out.json };
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(CliError { kind, message, report }) => {
            if let Some(out) = report {
                print!("{}", if cli.human { out.human } else { out.json });
            }
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": kind, "message": message } })
            );
            ExitCode::from(1)
        }
    }
}
