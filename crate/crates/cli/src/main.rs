mod cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "yoloe26", version, about = "Open-vocabulary instance segmentation engine")]
struct Cli {
    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic datasets.
    Dataset {
        #[command(subcommand)]
        action: DatasetCommand,
    },
    /// Run one training stage.
    Train(TrainArgs),
    /// Bake refined text prompts into a checkpoint.
    Fold(FoldArgs),
    /// Detect and segment objects in one image.
    Infer(InferArgs),
    /// Mask mAP over a saved dataset.
    Validate(ValidateArgs),
    /// Measurements.
    Bench {
        #[command(subcommand)]
        action: BenchCommand,
    },
    /// Property suites; exit code 0 iff every check passes.
    Check(CheckArgs),
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate scenes from a spec file (TOML, or JSON by extension).
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Text,
    Savpe,
    Promptfree,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long)]
    out: PathBuf,
    /// Starting checkpoint (overrides `paths.init`).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue an interrupted run of the same stage.
    #[arg(long, conflicts_with = "init")]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps; the checkpoint can be resumed.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FoldModeArg {
    Stacked,
    Fused,
}

#[derive(Args)]
struct FoldArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Category names, one per line.
    #[arg(long)]
    names: PathBuf,
    #[arg(long, value_enum, default_value = "stacked")]
    mode: FoldModeArg,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint of `text/<name>` embeddings used instead of the built-in encoder.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("prompts").required(true).args(["text", "visual", "prompt_free"]))]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Category names file.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Visual cues JSON.
    #[arg(long)]
    visual: Option<PathBuf>,
    #[arg(long)]
    prompt_free: bool,
    /// Vocabulary file for prompt-free mode; the built-in list when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Objectness threshold; the checkpoint's recommendation when absent.
    #[arg(long, allow_hyphen_values = true)]
    delta: Option<f32>,
    /// Image the visual cues refer to; the query image when absent.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overlay: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    threshold: f32,
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Text,
    Visual,
    Promptfree,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    mode: ModeArg,
    /// Text prompts; the checkpoint's training names when absent.
    #[arg(long)]
    names: Option<PathBuf>,
    /// Dataset that visual cues are drawn from.
    #[arg(long)]
    references: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    per_category: usize,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    delta: Option<f32>,
    #[arg(long, default_value_t = 0.05)]
    threshold: f32,
    /// Exit with code 1 when mAP50 falls below this.
    #[arg(long)]
    min_map50: Option<f64>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Lazy matching cost per objectness threshold.
    Lrpc(LrpcArgs),
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("inputs").required(true).args(["dataset", "image"]))]
struct LrpcArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Comma-separated thresholds, e.g. `-inf,0,2.5`.
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',')]
    deltas: Vec<f32>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Grads,
    Fold,
    Oracle,
    All,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(value_enum)]
    suite: Suite,
    /// Random cases per suite.
    #[arg(long, default_value_t = 20)]
    cases: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Warn
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match cmd::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
