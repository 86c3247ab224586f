//! `dvis`: command-line surface of the variational instance segmentation
//! engine. Every subcommand reads an optional JSON config plus `--set`
//! overrides, writes its artifacts into `--out`, and drops a run manifest
//! beside them.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure
//! (non-finite loss or a failed gradient audit).

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dvis", version, about = "Variational instance segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset
    Synth(CommonArgs),
    /// Train the labeling net (and, by default, the verification head)
    Train(CommonArgs),
    /// Run the full pipeline on one image or a whole dataset
    Infer(InferArgs),
    /// Cluster a real-valued label map into candidate segments
    Discretize(DiscretizeArgs),
    /// Score stored detections against dataset ground truth
    Eval(EvalArgs),
    /// Audit the analytic gradients against finite differences
    Gradcheck(CommonArgs),
    /// Render a label map or detections as a PPM image
    Render(RenderArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file; omitted fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path config override (key.path=value), repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory, created if missing
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained labeling-net checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trained verification-head checkpoint
    #[arg(long)]
    head: PathBuf,
    /// Single input image (PFM); mutually exclusive with --data
    #[arg(long)]
    image: Option<PathBuf>,
    /// Dataset directory to infer over; mutually exclusive with --image
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct DiscretizeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Real-valued label map (PFM)
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory holding the ground truth
    #[arg(long)]
    data: PathBuf,
    /// Directory of per-scene detection files (det_NNNNNN.json)
    #[arg(long)]
    detections: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Real-valued label map (PFM) to render through the colormap
    #[arg(long)]
    input: Option<PathBuf>,
    /// Detections file to render as per-instance hue overlays
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(dvis_core::Error),
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn data(msg: impl Into<String>) -> Self {
        CliError::Core(dvis_core::Error::data(msg))
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(dvis_core::Error::Numeric(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(err) => write!(f, "{err}"),
        }
    }
}

impl From<dvis_core::Error> for CliError {
    fn from(err: dvis_core::Error) -> Self {
        CliError::Core(err)
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version arrive here too; only real parse
            // errors use stderr and the usage exit code
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    let result = match &cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train(args),
        Command::Infer(args) => commands::infer(args),
        Command::Discretize(args) => commands::discretize(args),
        Command::Eval(args) => commands::eval(args),
        Command::Gradcheck(args) => commands::gradcheck(args),
        Command::Render(args) => commands::render(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
