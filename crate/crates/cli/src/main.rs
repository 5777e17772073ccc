use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use stereo3d_core::depth_label::SamplingMode;

mod bench;
mod config;
mod dataset;
mod disparity;
mod eval;
mod labels;

use config::{Overrides, RunConfig};

/// Stereo 3D detection tooling: depth-sampling labels, disparity ground
/// truth, KITTI evaluation and kernel benchmarks.
///
/// Log level is read from RUST_LOG (default: info).
#[derive(Parser)]
#[command(name = "stereo3d", version)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// KITTI root containing image_2, image_3, label_2 and calib.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// File listing frame ids, one per line.
    #[arg(long, global = true)]
    split: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Depth-map downscale factor.
    #[arg(long, global = true, value_parser = ["4", "16"])]
    scale: Option<String>,
    /// Depth sampling position.
    #[arg(long, global = true)]
    sampling: Option<Sampling>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Crop the top 100 rows and resize to 288x1280 first.
    #[arg(long, global = true)]
    preprocess: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sampling {
    Center,
    Offset,
}

#[derive(Subcommand)]
enum Command {
    /// Write sampling-point JSON, depth-map PNGs and overlays per frame.
    Labels,
    /// Write block-matching disparity PNGs per frame.
    Disparity {
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        max_disp: Option<usize>,
        /// Parabolic sub-pixel refinement.
        #[arg(long)]
        subpixel: bool,
        /// Store maps at 1/N resolution.
        #[arg(long)]
        downsample: Option<usize>,
    },
    /// AP@R40 table of a prediction directory.
    Eval {
        /// Directory of KITTI-format prediction files with scores.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth label directory (default: ROOT/label_2).
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Car IoU threshold (0.7 standard, 0.5 loose).
        #[arg(long)]
        car_iou: Option<f64>,
    },
    /// Time the correlation, fusion and decoder kernels.
    Bench {
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
    /// Write overlays only.
    Viz,
}

fn overrides(common: &CommonArgs, command: &Command) -> Overrides {
    let mut o = Overrides {
        root: common.root.clone(),
        split: common.split.clone(),
        out: common.out.clone(),
        scale: common.scale.as_deref().and_then(|s| s.parse().ok()),
        sampling: common.sampling.map(|s| match s {
            Sampling::Center => SamplingMode::Center,
            Sampling::Offset => SamplingMode::Offset,
        }),
        jobs: common.jobs,
        preprocess: common.preprocess,
        ..Default::default()
    };
    match command {
        Command::Disparity {
            block,
            max_disp,
            subpixel,
            downsample,
        } => {
            o.block = *block;
            o.max_disp = *max_disp;
            o.subpixel = *subpixel;
            o.downsample = *downsample;
        }
        Command::Eval { car_iou, .. } => o.car_iou = *car_iou,
        _ => {}
    }
    o
}

fn run(cli: Cli) -> anyhow::Result<usize> {
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides(&cli.common, &cli.command))?;
    match &cli.command {
        Command::Labels => labels::cmd_labels(&cfg),
        Command::Viz => labels::cmd_viz(&cfg),
        Command::Disparity { .. } => disparity::cmd_disparity(&cfg),
        Command::Eval { pred, gt, .. } => eval::cmd_eval(&cfg, pred, gt.as_deref()),
        Command::Bench { iters } => bench::cmd_bench(&cfg, *iters).map(|()| 0),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(2)
        }
    }
}
