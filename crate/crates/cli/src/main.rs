//! `mole`: train, re-parameterize, verify, decode, benchmark, quantize and
//! report on mixture-of-lookup-experts models.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mole::lut_store::LutDtype;

#[derive(Parser, Debug)]
#[command(name = "mole", version, about = "Mixture-of-lookup-experts toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint.bin, loss.csv and manifest.json.
    Train(TrainArgs),
    /// Turn a trained MoLE checkpoint into a LUT file.
    Reparam(ReparamArgs),
    /// Compare training-form and LUT-form logits on random prompts.
    Verify(VerifyArgs),
    /// Greedy decoding from a checkpoint.
    Infer(InferArgs),
    /// Metered decoding under a simulated host-to-device link.
    Bench(BenchArgs),
    /// Re-encode a LUT file with another storage dtype.
    Quantize(QuantizeArgs),
    /// Cost accounting reports.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Args, Debug)]
pub struct ModelSource {
    /// JSON run config with optional "preset", "model", "train" and "corpus".
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset (toy-dense, toy-moe, toy-moe-34e, toy-mole, toy-mole-16e
    /// or a table row such as "160M MoLE-4E"). Overrides the config file.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ModelSource,
    /// Optimizer steps (overrides train.total_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sequences per step (overrides train.batch).
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training text; the built-in corpus when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct ReparamArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "fp32")]
    pub dtype: LutDtype,
    /// Quantization block size (nf4 / nf3 only; default 64).
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub lut: PathBuf,
    /// Maximum relative logit error; defaults to the bound for the file's dtype.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub prompts: usize,
    /// Prompts have random lengths from 1 to this value.
    #[arg(long, default_value_t = 16)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Serve a MoLE model's routed experts from this LUT file.
    #[arg(long)]
    pub lut: Option<PathBuf>,
    /// Prompt text, one lane per occurrence (byte vocabulary).
    #[arg(long)]
    pub prompt: Vec<String>,
    /// Prompt as comma-separated token ids, one lane per occurrence.
    #[arg(long)]
    pub ids: Vec<String>,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RuntimeKind {
    Dense,
    MoeOffload,
    MoleLut,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum RoutingKind {
    /// Uniform random expert choices.
    #[default]
    Uniform,
    /// The model's own router.
    Model,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub runtime: RuntimeKind,
    #[command(flatten)]
    pub source: ModelSource,
    /// Trained weights; random initialization from the seed when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// LUT file for mole-lut; in-memory fp32 tables when absent.
    #[arg(long)]
    pub lut: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 16.0)]
    pub bandwidth_gbps: f64,
    #[arg(long, value_enum, default_value_t)]
    pub routing: RoutingKind,
    /// Directory for meter.csv, summary.json and manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub lut: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dtype: LutDtype,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    /// Reproduce the published cost cells with PASS / WARN / FAIL verdicts.
    #[value(name = "paper-check")]
    PublishedCheck,
    /// Cost formulas for the table presets or the configs in --config.
    Table,
    /// Expected experts loaded per layer under the cache policy.
    Loads,
    /// Simulated per-step transfer time.
    Latency,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Defaults to paper-check, or table when --config is given.
    #[arg(value_enum)]
    pub kind: Option<ReportKind>,
    /// A model config JSON, or a list of {"label", "model"} entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 8, 32])]
    pub batch: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 34])]
    pub experts: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub top_k: usize,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16.0)]
    pub bandwidth_gbps: f64,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

fn main() -> ExitCode {
    // Exit quietly when a downstream reader such as `head` closes the pipe.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Reparam(a) => commands::reparam(a),
        Command::Verify(a) => commands::verify(a),
        Command::Infer(a) => commands::infer(a),
        Command::Bench(a) => commands::bench(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mole: {e}");
            e.exit_code()
        }
    }
}
