//! `disparity`: block-matching ground truth per frame.

use image::imageops::grayscale;
use stereo3d_core::disparity_bm::{block_match, downsample_disparity, DisparityMap};

use crate::config::RunConfig;
use crate::dataset::{png_bytes, preprocess_transform, run_frames, write_atomic, Dataset};

/// Drops trailing rows and columns so both dimensions divide `factor`.
fn trimmed(map: &DisparityMap, factor: usize) -> DisparityMap {
    let (w, h) = (map.w / factor * factor, map.h / factor * factor);
    if (w, h) == (map.w, map.h) {
        return map.clone();
    }
    let mut out = DisparityMap::invalid(w, h);
    for y in 0..h {
        out.disp[y * w..(y + 1) * w].copy_from_slice(&map.disp[y * map.w..y * map.w + w]);
        out.valid[y * w..(y + 1) * w].copy_from_slice(&map.valid[y * map.w..y * map.w + w]);
    }
    out
}

pub fn frame_disparity(ds: &Dataset, id: &str, cfg: &RunConfig) -> anyhow::Result<DisparityMap> {
    let mut left = ds.load_image(&ds.left_image(id))?;
    let mut right = ds.load_image(&ds.right_image(id))?;
    if cfg.preprocess {
        let t = preprocess_transform(&left)?;
        left = t.apply_image(&left);
        right = t.apply_image(&right);
    }
    let full = block_match(&grayscale(&left), &grayscale(&right), &cfg.disparity)?;
    if cfg.downsample == 1 {
        return Ok(full);
    }
    Ok(downsample_disparity(&trimmed(&full, cfg.downsample), cfg.downsample)?)
}

pub fn cmd_disparity(cfg: &RunConfig) -> anyhow::Result<usize> {
    let ds = Dataset::new(cfg.root()?);
    let ids = ds.frame_ids(cfg.split.as_deref())?;
    run_frames(&ids, cfg.jobs, |id| {
        let map = frame_disparity(&ds, id, cfg)?;
        write_atomic(&cfg.out.join("disparity").join(format!("{id}.png")), &png_bytes(&map.to_png16())?)
    })
}
