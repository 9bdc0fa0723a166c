mod commands;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Parser)]
#[command(
    name = "weaksup-pose",
    version,
    about = "Weakly-supervised 3D pose labels from 2D keypoints and LiDAR"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic pedestrian scenes.
    Synth(SynthArgs),
    /// Generate pseudo 3D labels for a scene directory.
    Labelgen(LabelgenArgs),
    /// Train the point network on scenes and labels.
    Train(TrainArgs),
    /// Evaluate trained parameters on scenes with ground truth.
    Eval(EvalArgs),
    /// Train and evaluate all four ablation variants.
    #[command(name = "ablation-matrix", alias = "ablation_matrix")]
    AblationMatrix(AblationArgs),
    /// Render a scene's camera heatmap as a 16-bit PGM.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    pub n_scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// standing, walking, cycling, random_articulation or mixed.
    #[arg(long, default_value = "mixed")]
    pub pose_family: String,
    #[arg(long, default_value_t = 0.0)]
    pub occlusion_rate: f64,
    /// JSON file with simulator settings (sensor, sampling, noise).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct LabelgenArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    /// Softmax temperature (px^-2).
    #[arg(long = "T")]
    pub temperature: Option<f64>,
    /// Reliability temperature (px^-2).
    #[arg(long = "Tr")]
    pub reliability_temperature: Option<f64>,
    /// Pointwise label radius (px).
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Pipeline configuration JSON; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "fusion_seg")]
    pub ablation: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write camera_features.csv with per-scene camera-column sums.
    #[arg(long)]
    pub dump_camera_features: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Defaults to the config recorded in the training manifest next to
    /// the parameters, if any.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ablation: Option<String>,
    /// SVG bar chart of per-keypoint OKS.
    #[arg(long)]
    pub plot: Option<PathBuf>,
    /// Per-keypoint table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fraction of scenes (last by id) held out for evaluation.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Keypoint channel to render; all channels are max-combined by default.
    #[arg(long)]
    pub keypoint: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    commands::init_threads()?;
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Labelgen(a) => commands::labelgen(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::AblationMatrix(a) => commands::ablation_matrix(a),
        Command::Heatmap(a) => commands::heatmap(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(commands::EXIT_CONFIG);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
