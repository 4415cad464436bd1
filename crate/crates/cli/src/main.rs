//! `layout-attn`: synthesize scenes, invert, cluster, edit with layout-guided
//! attention, evaluate and dump attention maps.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "layout-attn", version, about = "Layout-guided attention video editing on a toy diffusion stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic moving-shape video with exact flow and masks.
    Synth(SynthArgs),
    /// DDIM-invert a video with the source prompts of a config.
    Invert(InvertArgs),
    /// Cluster self-attention features of the inversion into a coarse layout.
    Cluster(ClusterArgs),
    /// Run a layout-guided edit.
    Edit(EditArgs),
    /// Score an edited video.
    Eval(EvalArgs),
    /// Write per-map normalized heatmaps of recorded cross-attention.
    AttnDump(AttnDumpArgs),
    /// Train the toy denoiser on random synthetic scenes.
    Train(TrainArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SceneKind {
    TwoSquares,
    SquareAndCircle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ScheduleKind {
    /// Betas 1e-4 to 0.02, evenly spaced.
    Linear,
    /// Betas 0.00085 to 0.012, evenly spaced in square root.
    ScaledLinear,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "two-squares")]
    pub scene: SceneKind,
    /// Scene description JSON; overrides --scene, --frames and --size.
    #[arg(long)]
    pub scene_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ModelArgs {
    /// Checkpoint directory, or `shipped` for the bundled trained weights.
    /// Seeded weights from the config when absent.
    #[arg(long)]
    pub weights: Option<String>,
}

#[derive(Args)]
pub struct InvertArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub video: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub video: PathBuf,
    /// Overrides the config's cluster count.
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EditArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Layout manifest JSON, or `clusters` to derive masks from the inversion.
    #[arg(long)]
    pub layout: String,
    #[arg(long)]
    pub video: PathBuf,
    /// Flow tensor prefix; `<video>/flow` when present otherwise.
    #[arg(long)]
    pub flow: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Edited video directory, or an edit run directory.
    #[arg(long)]
    pub edited: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    /// Flow tensor prefix (`<prefix>.f32` + `<prefix>.json`).
    #[arg(long)]
    pub flow: Option<PathBuf>,
    /// CSV output; a JSON mirror is written next to it.
    #[arg(long)]
    pub report: PathBuf,
    /// Config naming the target prompt of every region.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Layout manifest with the region masks.
    #[arg(long)]
    pub layout: Option<PathBuf>,
}

#[derive(Args)]
pub struct AttnDumpArgs {
    /// Edit run directory.
    #[arg(long)]
    pub run: PathBuf,
    /// Denoising step, counted from the noisiest.
    #[arg(long)]
    pub step: usize,
    /// Block index.
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 20000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub final_lr_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    #[arg(long, default_value_t = 12)]
    pub size: usize,
    #[arg(long, value_enum, default_value = "linear")]
    pub schedule: ScheduleKind,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Invert(a) => commands::invert(&a),
        Command::Cluster(a) => commands::cluster(&a),
        Command::Edit(a) => commands::edit(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::AttnDump(a) => commands::attn_dump(&a),
        Command::Train(a) => commands::train(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
