//! `eval`: KITTI AP table for a prediction directory.

use std::path::Path;

use anyhow::Context;
use log::{error, info};
use stereo3d_core::evaluation::{evaluate_benchmark, BenchmarkReport};

use crate::config::RunConfig;
use crate::dataset::{json_bytes, write_atomic};

/// Prints the table, writes `eval.txt` and `eval.json`. Returns the number
/// of prediction files that had no ground truth.
pub fn cmd_eval(cfg: &RunConfig, pred: &Path, gt: Option<&Path>) -> anyhow::Result<usize> {
    let gt_dir = match gt {
        Some(dir) => dir.to_path_buf(),
        None => cfg.root().context("give --gt or --root")?.join("label_2"),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build()?;
    let report: BenchmarkReport = pool.install(|| evaluate_benchmark(pred, &gt_dir, &cfg.eval))?;
    for id in &report.unmatched_predictions {
        error!("prediction {id} has no ground truth; skipped");
    }
    let table = report.result.to_table();
    print!("{table}");
    write_atomic(&cfg.out.join("eval.txt"), table.as_bytes())?;
    write_atomic(&cfg.out.join("eval.json"), &json_bytes(&report)?)?;
    info!("evaluated {} frames", report.frames);
    Ok(report.unmatched_predictions.len())
}
