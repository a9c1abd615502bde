//! `hdformer` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdformer::dataio::Stitch;

#[derive(Parser)]
#[command(
    name = "hdformer",
    version,
    about = "Lift 2D pose sequences to 3D with a high-order directed transformer"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Score a checkpoint against 3D ground truth.
    Eval(EvalArgs),
    /// Predict a 3D sequence from a 2D pose file.
    Infer(InferArgs),
    /// Dump attention maps and the hyperbone legend for one window.
    Attn(AttnArgs),
    /// Generate synthetic 2D/3D sequence pairs.
    Synth(SynthArgs),
    /// Check pose, checkpoint, attention, topology and config files.
    Validate(ValidateArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a setting, e.g. `--set train.optimizer.epochs=5` or `--set epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory, replacing `output_dir`.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    /// Mean per-joint position error.
    Mpjpe,
    /// MPJPE after per-frame similarity alignment.
    PMpjpe,
    /// Percentage of correct keypoints and area under the PCK curve.
    PckAuc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StitchArg {
    /// Average every prediction of a frame.
    Mean,
    /// Keep the prediction of the latest window.
    Last,
}

impl From<StitchArg> for Stitch {
    fn from(s: StitchArg) -> Self {
        match s {
            StitchArg::Mean => Stitch::Mean,
            StitchArg::Last => Stitch::Last,
        }
    }
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// 2D input pose file; repeat for several sequences.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// 3D ground-truth pose file, one per --input.
    #[arg(long, required = true)]
    pub target: Vec<PathBuf>,
    /// Action label, one per --input; everything is "all" when omitted.
    #[arg(long)]
    pub action: Vec<String>,
    /// Which scores to print.
    #[arg(long, value_enum, default_value_t = Protocol::Mpjpe)]
    pub protocol: Protocol,
    /// PCK threshold in target units.
    #[arg(long, default_value_t = 150.0)]
    pub pck_threshold: f64,
    /// Sliding-window step in frames.
    #[arg(long, default_value_t = 5)]
    pub step: usize,
    /// How overlapping windows are combined.
    #[arg(long, value_enum, default_value_t = StitchArg::Mean)]
    pub stitch: StitchArg,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args)]
pub struct InferArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// 2D pose file.
    #[arg(long)]
    pub input: PathBuf,
    /// Destination 3D pose file (root-relative).
    #[arg(long)]
    pub output: PathBuf,
    /// Sliding-window step in frames.
    #[arg(long, default_value_t = 5)]
    pub step: usize,
    /// How overlapping windows are combined.
    #[arg(long, value_enum, default_value_t = StitchArg::Mean)]
    pub stitch: StitchArg,
}

#[derive(Args)]
pub struct AttnArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// 2D pose file.
    #[arg(long)]
    pub input: PathBuf,
    /// First frame of the window.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Receives one `.attn` file per block and `hyperbones.txt`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Built-in topology name or topology file.
    #[arg(long, default_value = "h36m")]
    pub topology: String,
    /// Frames per sequence.
    #[arg(long, default_value_t = 96)]
    pub frames: usize,
    /// Number of sequence pairs.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Seed of the motion generator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Standard deviation of 2D noise in millimetres.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Frame rate written to the pose headers.
    #[arg(long, default_value_t = 50.0)]
    pub fps: f64,
    /// Receives `seqNNN_2d.pose` and `seqNNN_3d.pose` pairs.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct ValidateArgs {
    /// Files to check; the kind is detected from the header or extension.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => commands::train_cmd(&a),
        Command::Eval(a) => commands::eval_cmd(&a),
        Command::Infer(a) => commands::infer_cmd(&a),
        Command::Attn(a) => commands::attn_cmd(&a),
        Command::Synth(a) => commands::synth_cmd(&a),
        Command::Validate(a) => commands::validate_cmd(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
