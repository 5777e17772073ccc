//! Run configuration: an optional TOML file overridden by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;
use stereo3d_core::depth_label::{DepthBinSpec, DepthMapScale, SamplingMode};
use stereo3d_core::disparity_bm::BlockMatchParams;
use stereo3d_core::evaluation::EvalConfig;

/// Everything a subcommand needs, after merging file and flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub root: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub out: PathBuf,
    pub scale: DepthMapScale,
    pub sampling: SamplingMode,
    pub jobs: usize,
    pub preprocess: bool,
    pub bins: DepthBinSpec,
    pub disparity: BlockMatchParams,
    /// Disparity maps are stored at `1 / downsample` resolution.
    pub downsample: usize,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            root: None,
            split: None,
            out: PathBuf::from("out"),
            scale: DepthMapScale::Quarter,
            sampling: SamplingMode::Offset,
            jobs: std::thread::available_parallelism().map_or(1, |n| n.get()),
            preprocess: false,
            bins: DepthBinSpec::default(),
            disparity: BlockMatchParams::default(),
            downsample: 4,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub root: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub scale: Option<u32>,
    pub sampling: Option<SamplingMode>,
    pub jobs: Option<usize>,
    pub preprocess: Option<bool>,
    pub bins: Option<DepthBinSpec>,
    pub disparity: Option<DisparityFile>,
    pub eval: Option<EvalFile>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisparityFile {
    pub block: Option<usize>,
    pub max_disp: Option<usize>,
    pub lr_tolerance: Option<f64>,
    pub texture_ratio: Option<f64>,
    pub subpixel: Option<bool>,
    pub downsample: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    pub classes: Option<Vec<String>>,
    pub car_iou: Option<f64>,
}

/// Flag values; `None` means "not given on the command line".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub root: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub scale: Option<u32>,
    pub sampling: Option<SamplingMode>,
    pub jobs: Option<usize>,
    pub preprocess: bool,
    pub block: Option<usize>,
    pub max_disp: Option<usize>,
    pub subpixel: bool,
    pub downsample: Option<usize>,
    pub car_iou: Option<f64>,
}

fn parse_scale(factor: u32) -> anyhow::Result<DepthMapScale> {
    DepthMapScale::from_factor(factor).with_context(|| format!("scale must be 4 or 16, got {factor}"))
}

impl RunConfig {
    pub fn load(file: Option<&Path>, flags: &Overrides) -> anyhow::Result<Self> {
        let file_cfg = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => FileConfig::default(),
        };
        Self::merge(file_cfg, flags)
    }

    pub fn merge(file: FileConfig, flags: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.root = flags.root.clone().or(file.root);
        cfg.split = flags.split.clone().or(file.split);
        if let Some(out) = flags.out.clone().or(file.out) {
            cfg.out = out;
        }
        if let Some(s) = flags.scale.or(file.scale) {
            cfg.scale = parse_scale(s)?;
        }
        if let Some(m) = flags.sampling.or(file.sampling) {
            cfg.sampling = m;
        }
        if let Some(j) = flags.jobs.or(file.jobs) {
            if j == 0 {
                bail!("jobs must be at least 1");
            }
            cfg.jobs = j;
        }
        cfg.preprocess = flags.preprocess || file.preprocess.unwrap_or(false);
        if let Some(b) = file.bins {
            cfg.bins = DepthBinSpec::new(b.d_min, b.d_max, b.n_bins)?;
        }
        let d = file.disparity.unwrap_or_default();
        let p = &mut cfg.disparity;
        if let Some(v) = flags.block.or(d.block) {
            p.block = v;
        }
        if let Some(v) = flags.max_disp.or(d.max_disp) {
            p.max_disp = v;
        }
        if let Some(v) = d.lr_tolerance {
            p.lr_tolerance = v;
        }
        if let Some(v) = d.texture_ratio {
            p.texture_ratio = v;
        }
        p.subpixel = flags.subpixel || d.subpixel.unwrap_or(false);
        if let Some(v) = flags.downsample.or(d.downsample) {
            if v == 0 {
                bail!("downsample must be at least 1");
            }
            cfg.downsample = v;
        }
        let e = file.eval.unwrap_or_default();
        if let Some(c) = e.classes {
            cfg.eval.classes = c;
        }
        if let Some(t) = flags.car_iou.or(e.car_iou) {
            cfg.eval.car_threshold = t;
        }
        Ok(cfg)
    }

    pub fn root(&self) -> anyhow::Result<&Path> {
        self.root.as_deref().context("--root is required for this command")
    }
}
