//! SAD block matching for disparity ground truth.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockMatchParams {
    /// Odd window side in pixels.
    pub block: usize,
    pub max_disp: usize,
    /// Largest allowed left-right disagreement in pixels.
    pub lr_tolerance: f64,
    /// Minimum cost spread over candidate disparities, as a fraction of the
    /// window's dynamic range (`255 * block^2`).
    pub texture_ratio: f64,
    pub subpixel: bool,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        Self {
            block: 9,
            max_disp: 192,
            lr_tolerance: 1.0,
            texture_ratio: 0.02,
            subpixel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub w: usize,
    pub h: usize,
    pub disp: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    pub fn invalid(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            disp: vec![0.0; w * h],
            valid: vec![false; w * h],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = y * self.w + x;
        self.valid[i].then(|| self.disp[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// KITTI disparity encoding: `disp * 256`, 0 for invalid. Valid pixels
    /// are stored as at least 1 so they never read back as invalid.
    pub fn to_png16(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        ImageBuffer::from_fn(self.w as u32, self.h as u32, |x, y| {
            let i = y as usize * self.w + x as usize;
            let v = if self.valid[i] {
                (self.disp[i] * 256.0).round().clamp(1.0, u16::MAX as f64) as u16
            } else {
                0
            };
            Luma([v])
        })
    }

    pub fn from_png16(img: &ImageBuffer<Luma<u16>, Vec<u16>>) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw: Vec<u16> = img.pixels().map(|p| p[0]).collect();
        Self {
            w,
            h,
            disp: raw.iter().map(|&v| v as f64 / 256.0).collect(),
            valid: raw.iter().map(|&v| v > 0).collect(),
        }
    }

    pub fn save_png16(&self, path: &Path) -> Result<()> {
        self.to_png16().save(path)?;
        Ok(())
    }

    /// Mirrors the map left to right.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                let (a, b) = (y * self.w + x, y * self.w + self.w - 1 - x);
                out.disp[a] = self.disp[b];
                out.valid[a] = self.valid[b];
            }
        }
        out
    }
}

const INFEASIBLE: u32 = u32::MAX;

/// SAD costs `cost[x * (max_disp + 1) + d]` for one row. Pixels whose window
/// leaves the image, or whose shifted window does, get `INFEASIBLE`.
fn row_costs(left: &GrayImage, right: &GrayImage, y: usize, p: &BlockMatchParams) -> Vec<u32> {
    let (w, r) = (left.width() as usize, p.block / 2);
    let nd = p.max_disp + 1;
    let mut cost = vec![INFEASIBLE; w * nd];
    let mut col = vec![0u32; w];
    for d in 0..nd {
        if d + 2 * r >= w {
            break;
        }
        // column sums of |L(x) - R(x - d)| over the window rows
        for (x, c) in col.iter_mut().enumerate().skip(d) {
            *c = (y - r..=y + r)
                .map(|yy| (left.get_pixel(x as u32, yy as u32)[0] as i32 - right.get_pixel((x - d) as u32, yy as u32)[0] as i32).unsigned_abs())
                .sum();
        }
        let mut acc: u32 = col[d..d + p.block].iter().sum();
        let first = d + r;
        cost[first * nd + d] = acc;
        for x in first + 1..w - r {
            acc = acc + col[x + r] - col[x - r - 1];
            cost[x * nd + d] = acc;
        }
    }
    cost
}

fn argmin(costs: impl Iterator<Item = (usize, u32)>) -> Option<(usize, u32)> {
    costs
        .filter(|c| c.1 != INFEASIBLE)
        .fold(None, |best, c| match best {
            Some(b) if b.1 <= c.1 => Some(b),
            _ => Some(c),
        })
}

fn match_row(left: &GrayImage, right: &GrayImage, y: usize, p: &BlockMatchParams) -> (Vec<f64>, Vec<bool>) {
    let w = left.width() as usize;
    let nd = p.max_disp + 1;
    let mut disp = vec![0.0; w];
    let mut valid = vec![false; w];
    let h = left.height() as usize;
    let r = p.block / 2;
    if y < r || y + r >= h {
        return (disp, valid);
    }
    let cost = row_costs(left, right, y, p);
    let at = |x: usize, d: usize| cost[x * nd + d];
    let texture_floor = p.texture_ratio * 255.0 * (p.block * p.block) as f64;
    // right-image disparity: the left pixel xr + d seen at disparity d
    let right_disp: Vec<Option<usize>> = (0..w)
        .map(|xr| argmin((0..nd).filter(|d| xr + d < w).map(|d| (d, at(xr + d, d)))).map(|b| b.0))
        .collect();
    for x in r..w - r {
        let Some((d, best)) = argmin((0..nd).map(|d| (d, at(x, d)))) else {
            continue;
        };
        let worst = (0..nd).map(|d| at(x, d)).filter(|&c| c != INFEASIBLE).max().unwrap_or(best);
        if ((worst - best) as f64) < texture_floor {
            continue;
        }
        let Some(dr) = right_disp[x - d] else { continue };
        if (d as f64 - dr as f64).abs() > p.lr_tolerance {
            continue;
        }
        let mut value = d as f64;
        if p.subpixel && d > 0 && d < p.max_disp {
            let (cm, cp) = (at(x, d - 1), at(x, d + 1));
            if cm != INFEASIBLE && cp != INFEASIBLE {
                let (cm, c0, cp) = (cm as f64, best as f64, cp as f64);
                let denom = cm - 2.0 * c0 + cp;
                if denom > 0.0 {
                    value += (cm - cp) / (2.0 * denom);
                }
            }
        }
        disp[x] = value;
        valid[x] = true;
    }
    (disp, valid)
}

/// Per-pixel SAD argmin over `d in [0, max_disp]` with a left-right
/// consistency check and a texture test. Ties go to the smaller disparity.
/// Pixels within `block / 2` of the border are invalid.
pub fn block_match(left: &GrayImage, right: &GrayImage, params: &BlockMatchParams) -> Result<DisparityMap> {
    if left.dimensions() != right.dimensions() {
        return Err(Error::Shape(format!(
            "left {:?} and right {:?} differ in size",
            left.dimensions(),
            right.dimensions()
        )));
    }
    if params.block % 2 == 0 || params.block == 0 {
        return Err(Error::Domain(format!("block size {} must be odd", params.block)));
    }
    let (w, h) = (left.width() as usize, left.height() as usize);
    if w < params.block || h < params.block {
        return Err(Error::Shape(format!("image {w}x{h} smaller than block {}", params.block)));
    }
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h).into_par_iter().map(|y| match_row(left, right, y, params)).collect();
    let mut out = DisparityMap::invalid(w, h);
    for (y, (d, v)) in rows.into_iter().enumerate() {
        out.disp[y * w..(y + 1) * w].copy_from_slice(&d);
        out.valid[y * w..(y + 1) * w].copy_from_slice(&v);
    }
    Ok(out)
}

/// Median of valid disparities in each `factor x factor` block, divided by
/// `factor`. Even counts average the two middle values.
pub fn downsample_disparity(map: &DisparityMap, factor: usize) -> Result<DisparityMap> {
    if factor == 0 || map.w % factor != 0 || map.h % factor != 0 {
        return Err(Error::Shape(format!("factor {factor} does not divide {}x{}", map.w, map.h)));
    }
    let (w, h) = (map.w / factor, map.h / factor);
    let mut out = DisparityMap::invalid(w, h);
    let mut vals = Vec::with_capacity(factor * factor);
    for by in 0..h {
        for bx in 0..w {
            vals.clear();
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    if let Some(d) = map.get(x, y) {
                        vals.push(d);
                    }
                }
            }
            if vals.is_empty() {
                continue;
            }
            vals.sort_by(f64::total_cmp);
            let n = vals.len();
            let med = if n % 2 == 1 {
                vals[n / 2]
            } else {
                0.5 * (vals[n / 2 - 1] + vals[n / 2])
            };
            out.disp[by * w + bx] = med / factor as f64;
            out.valid[by * w + bx] = true;
        }
    }
    Ok(out)
}

/// Mirrors an image left to right.
pub fn flip_horizontal(img: &GrayImage) -> GrayImage {
    image::imageops::flip_horizontal(img)
}
