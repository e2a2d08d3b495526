use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use gateskip::model::{GateArch, GateShape, GateSharing, ModuleKind};

mod commands;

use commands::Failure;

#[derive(Parser)]
#[command(name = "gateskip", version, about = "Gated token-wise layer skipping for small decoder-only models")]
struct Cli {
    /// Directory for output files [default: the config's paths.out_dir, else "."]
    #[arg(long, global = true, env = "GATESKIP_OUT_DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a gated model on a byte-level corpus
    Train(TrainArgs),
    /// Continue a prompt with budgeted skipping
    Generate(GenerateArgs),
    /// Evaluate held-out text across a sweep of budgets
    EvalSweep(SweepArgs),
    /// Export gate heatmaps, per-token means and activation distributions
    Analyze(AnalyzeArgs),
    /// Count gate parameters for a gate variant
    CountParams(CountArgs),
    /// Replay a recorded gate trace under quantile and random skipping
    SimulateSkip(SimulateArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// UTF-8 text corpus (overrides paths.corpus)
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Seed for initialization and batch order (overrides train.seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trailing fraction of the corpus kept out of training
    #[arg(long, default_value_t = 0.1)]
    pub held_out: f64,
    /// Echo every n-th log line to stderr; 0 disables
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Fraction of tokens each module keeps
    #[arg(long, default_value_t = 1.0)]
    pub budget: f64,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
    /// Sampling temperature; 0 selects greedy decoding
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scores remembered per module for decode-time thresholds
    #[arg(long, default_value_t = gateskip::inference::DEFAULT_WINDOW)]
    pub window: usize,
    /// Keep generating past the end token
    #[arg(long)]
    pub no_eos: bool,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// UTF-8 text; its held-out tail is evaluated
    #[arg(long)]
    pub corpus: PathBuf,
    /// Run configuration the checkpoint must match
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = gateskip::evaluation::DEFAULT_BUDGETS)]
    pub budgets: Vec<f64>,
    /// Savings levels the sweep is interpolated to
    #[arg(long, value_delimiter = ',', default_values_t = gateskip::evaluation::DEFAULT_TARGETS)]
    pub targets: Vec<f64>,
    /// Add random-skipping points at the savings each budget realized
    #[arg(long)]
    pub baseline: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub held_out: f64,
    /// Tokens per evaluation window [default: min(64, max_seq - 1)]
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub max_sequences: usize,
    #[arg(long, default_value_t = 8)]
    pub probes: usize,
    #[arg(long, default_value_t = 8)]
    pub probe_len: usize,
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["text", "input"])))]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Text to analyze as one sequence
    #[arg(long)]
    pub text: Option<String>,
    /// UTF-8 file, split into sequences of at most max_seq tokens
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Budget applied while recording
    #[arg(long, default_value_t = 1.0)]
    pub budget: f64,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Restrict the per-token means to one module kind
    #[arg(long)]
    pub module: Option<ModuleKind>,
    /// Prepend the BOS token to every sequence
    #[arg(long)]
    pub bos: bool,
}

#[derive(Args)]
pub struct CountArgs {
    #[arg(long)]
    pub hidden: u64,
    #[arg(long)]
    pub layers: u64,
    #[arg(long, default_value_t = GateShape::Vector)]
    pub shape: GateShape,
    #[arg(long, default_value_t = GateSharing::PerModule)]
    pub sharing: GateSharing,
    #[arg(long, default_value_t = GateArch::Linear)]
    pub arch: GateArch,
    /// List every shape, sharing and architecture combination
    #[arg(long)]
    pub all: bool,
    /// Backbone parameter count the overhead is relative to
    #[arg(long)]
    pub backbone: Option<f64>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Trace CSV written by `analyze`
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = gateskip::evaluation::DEFAULT_BUDGETS)]
    pub budgets: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out_dir;
    let result = match cli.command {
        Command::Train(a) => commands::train(a, out),
        Command::Generate(a) => commands::generate(a),
        Command::EvalSweep(a) => commands::eval_sweep(a, out),
        Command::Analyze(a) => commands::analyze(a, out),
        Command::CountParams(a) => commands::count_params(a),
        Command::SimulateSkip(a) => commands::simulate_skip(a, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
