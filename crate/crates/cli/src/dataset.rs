//! KITTI directory layout, split files, atomic output and the per-frame
//! driver shared by the dataset commands.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::Context;
use image::{ImageFormat, RgbImage};
use log::{error, warn};
use rayon::prelude::*;
use stereo3d_core::kitti_io::{
    read_calib_file, read_label_file, CameraCalib, ObjectLabel, PreprocessTransform, DEFAULT_CROP_TOP, DEFAULT_TARGET,
};

pub struct Dataset {
    pub root: PathBuf,
}

impl Dataset {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn left_image(&self, id: &str) -> PathBuf {
        self.root.join("image_2").join(format!("{id}.png"))
    }

    pub fn right_image(&self, id: &str) -> PathBuf {
        self.root.join("image_3").join(format!("{id}.png"))
    }

    pub fn label(&self, id: &str) -> PathBuf {
        self.root.join("label_2").join(format!("{id}.txt"))
    }

    pub fn calib(&self, id: &str) -> PathBuf {
        self.root.join("calib").join(format!("{id}.txt"))
    }

    /// Ids listed in the split file, or every label file when there is none.
    pub fn frame_ids(&self, split: Option<&Path>) -> anyhow::Result<Vec<String>> {
        if let Some(split) = split {
            let text = std::fs::read_to_string(split).with_context(|| format!("reading split {}", split.display()))?;
            return Ok(text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect());
        }
        let dir = self.root.join("label_2");
        let mut ids: Vec<String> = std::fs::read_dir(&dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("txt"))
            .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(String::from))
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn load_image(&self, path: &Path) -> anyhow::Result<RgbImage> {
        Ok(image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8())
    }

    pub fn load_annotations(&self, id: &str) -> anyhow::Result<(Vec<ObjectLabel>, CameraCalib)> {
        let labels = read_label_file(&self.label(id)).with_context(|| format!("labels of frame {id}"))?;
        let calib = read_calib_file(&self.calib(id)).with_context(|| format!("calibration of frame {id}"))?;
        Ok((labels, calib))
    }
}

/// Sky crop and resize applied to an image and everything tied to it.
pub fn preprocess_transform(img: &RgbImage) -> anyhow::Result<PreprocessTransform> {
    Ok(PreprocessTransform::new(img.height(), img.width(), DEFAULT_CROP_TOP, DEFAULT_TARGET)?)
}

/// Writes through a sibling temporary file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn png_bytes<P, C>(img: &image::ImageBuffer<P, C>) -> anyhow::Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn json_bytes<T: serde::Serialize>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Runs `f` on every frame in a pool of `jobs` threads. Failures are logged
/// with their frame id; returns the number of failed frames.
pub fn run_frames<F>(ids: &[String], jobs: usize, f: F) -> anyhow::Result<usize>
where
    F: Fn(&str) -> anyhow::Result<()> + Sync,
{
    if ids.is_empty() {
        warn!("split is empty; nothing to do");
        return Ok(0);
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let failures = pool.install(|| {
        ids.par_iter()
            .filter(|id| match f(id) {
                Ok(()) => false,
                Err(e) => {
                    error!("frame {id}: {e:#}");
                    true
                }
            })
            .count()
    });
    if failures > 0 {
        error!("{failures} of {} frames failed", ids.len());
    }
    Ok(failures)
}
