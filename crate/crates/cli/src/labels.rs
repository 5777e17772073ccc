//! `labels` and `viz`: depth-sampling ground truth and its overlays.

use image::{Rgb, RgbImage};
use stereo3d_core::depth_label::{
    build_label_artifact, projected_center, render_object_depth_map, DepthBinSpec, LabelArtifact, MapGeometry,
    ObjectDepthMap,
};
use stereo3d_core::kitti_io::{CameraCalib, ObjectLabel};

use crate::config::RunConfig;
use crate::dataset::{json_bytes, png_bytes, preprocess_transform, run_frames, write_atomic, Dataset};

pub const CENTER_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
pub const SAMPLE_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
const BLOCK_ALPHA: f64 = 0.6;

/// Everything derived from one frame.
pub struct FrameLabels {
    pub image: RgbImage,
    pub labels: Vec<ObjectLabel>,
    pub calib: CameraCalib,
    pub map: ObjectDepthMap,
    pub artifact: LabelArtifact,
}

pub fn frame_labels(ds: &Dataset, id: &str, cfg: &RunConfig) -> anyhow::Result<FrameLabels> {
    let (mut labels, mut calib) = ds.load_annotations(id)?;
    let mut image = ds.load_image(&ds.left_image(id))?;
    if cfg.preprocess {
        let t = preprocess_transform(&image)?;
        image = t.apply_image(&image);
        labels = t.apply_labels(&labels);
        calib = t.apply_calib(&calib)?;
    }
    let geometry = MapGeometry::new(image.width(), image.height(), cfg.scale);
    let artifact = build_label_artifact(id, &labels, &calib, &geometry, cfg.sampling);
    let map = render_object_depth_map(&labels, geometry);
    Ok(FrameLabels {
        image,
        labels,
        calib,
        map,
        artifact,
    })
}

/// Gray level of a depth: near is bright, far is dark.
pub fn depth_gray(depth: f64, bins: &DepthBinSpec) -> u8 {
    let t = ((depth - bins.d_min) / (bins.d_max - bins.d_min)).clamp(0.0, 1.0);
    (235.0 - 195.0 * t).round() as u8
}

fn blend(px: &mut Rgb<u8>, gray: u8, alpha: f64) {
    for c in px.0.iter_mut() {
        *c = (alpha * gray as f64 + (1.0 - alpha) * *c as f64).round() as u8;
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Filled upward triangle centered on `(cx, cy)`.
fn draw_triangle(img: &mut RgbImage, cx: f64, cy: f64, size: i64, color: Rgb<u8>) {
    let (cx, cy) = (cx.round() as i64, cy.round() as i64);
    for dy in -size..=size {
        let half = (dy + size) / 2;
        for dx in -half..=half {
            put(img, cx + dx, cy + dy, color);
        }
    }
}

/// Circle outline of radius `r` (two pixels thick).
fn draw_circle(img: &mut RgbImage, cx: f64, cy: f64, r: f64, color: Rgb<u8>) {
    let reach = r.ceil() as i64 + 1;
    let (ix, iy) = (cx.round() as i64, cy.round() as i64);
    for dy in -reach..=reach {
        for dx in -reach..=reach {
            let d = ((dx * dx + dy * dy) as f64).sqrt();
            if (d - r).abs() <= 1.0 {
                put(img, ix + dx, iy + dy, color);
            }
        }
    }
}

/// Depth blocks in gray, projected 3D centers as green triangles, sample
/// points as red circles.
pub fn render_overlay(frame: &FrameLabels, bins: &DepthBinSpec) -> RgbImage {
    let mut img = frame.image.clone();
    let s = frame.map.geometry.scale.factor();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (mx, my) = ((x / s) as usize, (y / s) as usize);
            if mx < frame.map.w && my < frame.map.h {
                let d = frame.map.depth_at(mx, my);
                if d.is_finite() {
                    blend(img.get_pixel_mut(x, y), depth_gray(d, bins), BLOCK_ALPHA);
                }
            }
        }
    }
    let marker = (img.height() as f64 / 80.0).max(3.0);
    for obj in &frame.artifact.objects {
        let label = &frame.labels[obj.id];
        let (cx, cy) = projected_center(label, &frame.calib);
        draw_triangle(&mut img, cx, cy, marker as i64, CENTER_COLOR);
        let (sx, sy) = (obj.sample_uv[0] * img.width() as f64, obj.sample_uv[1] * img.height() as f64);
        draw_circle(&mut img, sx, sy, marker, SAMPLE_COLOR);
    }
    img
}

pub fn cmd_labels(cfg: &RunConfig) -> anyhow::Result<usize> {
    let ds = Dataset::new(cfg.root()?);
    let ids = ds.frame_ids(cfg.split.as_deref())?;
    run_frames(&ids, cfg.jobs, |id| {
        let frame = frame_labels(&ds, id, cfg)?;
        let overlay = render_overlay(&frame, &cfg.bins);
        write_atomic(&cfg.out.join("labels").join(format!("{id}.json")), &json_bytes(&frame.artifact)?)?;
        write_atomic(&cfg.out.join("depth").join(format!("{id}.png")), &png_bytes(&frame.map.to_png16_cm())?)?;
        write_atomic(&cfg.out.join("overlay").join(format!("{id}.png")), &png_bytes(&overlay)?)?;
        Ok(())
    })
}

/// Overlays only.
pub fn cmd_viz(cfg: &RunConfig) -> anyhow::Result<usize> {
    let ds = Dataset::new(cfg.root()?);
    let ids = ds.frame_ids(cfg.split.as_deref())?;
    run_frames(&ids, cfg.jobs, |id| {
        let frame = frame_labels(&ds, id, cfg)?;
        write_atomic(&cfg.out.join("overlay").join(format!("{id}.png")), &png_bytes(&render_overlay(&frame, &cfg.bins))?)
    })
}
