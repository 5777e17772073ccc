//! KITTI label and calibration files, difficulty levels, and the crop +
//! resize preprocessing applied to stereo pairs before they reach a model.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geometry::Box2D;
use crate::{Error, Result};

pub const DONT_CARE: &str = "DontCare";

/// Rows cropped off the top of each image (mostly sky).
pub const DEFAULT_CROP_TOP: u32 = 100;
/// Network input size after preprocessing, `(height, width)`.
pub const DEFAULT_TARGET: (u32, u32) = (288, 1280);

/// Left/right rectified projection matrices and derived intrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraCalib {
    pub p2: [[f64; 4]; 3],
    pub p3: [[f64; 4]; 3],
    /// Horizontal focal length in pixels (`p2[0][0]`).
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Stereo baseline in meters.
    pub baseline: f64,
}

impl CameraCalib {
    /// Normalizes both matrices so that `p[2][2] == 1` and derives the
    /// intrinsics.
    pub fn from_matrices(p2: [[f64; 4]; 3], p3: [[f64; 4]; 3]) -> Result<Self> {
        let p2 = normalize_projection(p2, "P2")?;
        let p3 = normalize_projection(p3, "P3")?;
        let focal = p2[0][0];
        if !(focal > 0.0) {
            return Err(Error::Calib {
                key: "P2".into(),
                msg: format!("focal length must be positive, got {focal}"),
            });
        }
        // KITTI stores P2 and P3 translations with opposite signs depending on
        // which reference camera the file was produced against; the baseline
        // is their separation.
        let baseline = (p2[0][3] - p3[0][3]).abs() / focal;
        if !(baseline > 0.0) {
            return Err(Error::Calib {
                key: "P3".into(),
                msg: "left and right cameras coincide (zero baseline)".into(),
            });
        }
        Ok(Self {
            p2,
            p3,
            focal,
            cx: p2[0][2],
            cy: p2[1][2],
            baseline,
        })
    }

    /// Vertical focal length in pixels.
    pub fn focal_y(&self) -> f64 {
        self.p2[1][1]
    }

    /// Applies `u' = sx * u`, `v' = sy * (v - crop_top)` to both cameras.
    pub fn cropped_and_scaled(&self, crop_top: f64, sx: f64, sy: f64) -> Result<Self> {
        let apply = |p: &[[f64; 4]; 3]| {
            let mut out = *p;
            for c in 0..4 {
                out[0][c] = sx * p[0][c];
                out[1][c] = sy * (p[1][c] - crop_top * p[2][c]);
            }
            out
        };
        Self::from_matrices(apply(&self.p2), apply(&self.p3))
    }
}

fn normalize_projection(mut p: [[f64; 4]; 3], key: &str) -> Result<[[f64; 4]; 3]> {
    let s = p[2][2];
    if !(s.is_finite() && s != 0.0) || p.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Calib {
            key: key.into(),
            msg: "matrix must be finite with a non-zero p[2][2]".into(),
        });
    }
    if s != 1.0 {
        p.iter_mut().flatten().for_each(|v| *v /= s);
    }
    Ok(p)
}

/// One line of a KITTI `label_2` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLabel {
    pub class_name: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub box2d: Box2D,
    /// Height, width, length in meters; `-1` for DontCare.
    pub dims_hwl: [f64; 3],
    /// Bottom center of the box in camera coordinates.
    pub location_xyz: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl ObjectLabel {
    /// Convenience constructor for a fully visible, untruncated car.
    pub fn car(box2d: Box2D, dims_hwl: [f64; 3], location_xyz: [f64; 3], rotation_y: f64) -> Self {
        Self {
            class_name: "Car".into(),
            truncation: 0.0,
            occlusion: 0,
            alpha: 0.0,
            box2d,
            dims_hwl,
            location_xyz,
            rotation_y,
            score: None,
        }
    }

    pub fn is_dont_care(&self) -> bool {
        self.class_name == DONT_CARE
    }

    /// Depth of the 3D center (same as the bottom-center depth).
    pub fn center_depth(&self) -> f64 {
        self.location_xyz[2]
    }

    /// Checks the record invariants that parsing alone does not enforce.
    pub fn validate(&self) -> Result<(), String> {
        if self.is_dont_care() {
            return Ok(());
        }
        let b = &self.box2d;
        if !(b.x1 < b.x2 && b.y1 < b.y2) {
            return Err(format!("degenerate 2D box {:?}", b.to_array()));
        }
        if self.dims_hwl.iter().any(|&d| !(d > 0.0)) {
            return Err(format!("non-positive dimensions {:?}", self.dims_hwl));
        }
        if !(-std::f64::consts::PI..=std::f64::consts::PI).contains(&self.rotation_y) {
            return Err(format!("rotation_y {} outside [-pi, pi]", self.rotation_y));
        }
        if !(0..=3).contains(&self.occlusion) {
            return Err(format!("occlusion level {} outside 0..=3", self.occlusion));
        }
        Ok(())
    }
}

/// Parses a KITTI label file. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn parse_label_file(text: &str) -> Result<Vec<ObjectLabel>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 15 && fields.len() != 16 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 15 or 16 fields, found {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("field {} is not a number: {:?}", i + 1, fields[i]),
            })
        };
        let occlusion = fields[2].parse::<f64>().ok().filter(|v| v.fract() == 0.0);
        let Some(occlusion) = occlusion else {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("occlusion is not an integer: {:?}", fields[2]),
            });
        };
        out.push(ObjectLabel {
            class_name: fields[0].to_string(),
            truncation: num(1)?,
            occlusion: occlusion as i32,
            alpha: num(3)?,
            box2d: Box2D::new(num(4)?, num(5)?, num(6)?, num(7)?),
            dims_hwl: [num(8)?, num(9)?, num(10)?],
            location_xyz: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
            score: if fields.len() == 16 { Some(num(15)?) } else { None },
        });
    }
    Ok(out)
}

/// Writes labels back in devkit layout, two decimals per real.
pub fn serialize_labels(labels: &[ObjectLabel]) -> String {
    let mut s = String::new();
    for l in labels {
        let b = &l.box2d;
        write!(
            s,
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            l.class_name,
            l.truncation,
            l.occlusion,
            l.alpha,
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            l.dims_hwl[0],
            l.dims_hwl[1],
            l.dims_hwl[2],
            l.location_xyz[0],
            l.location_xyz[1],
            l.location_xyz[2],
            l.rotation_y,
        )
        .unwrap();
        if let Some(score) = l.score {
            write!(s, " {score:.2}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Reads `P2:` and `P3:` from a KITTI calibration file.
pub fn parse_calib_file(text: &str) -> Result<CameraCalib> {
    let find = |key: &str| -> Result<[[f64; 4]; 3]> {
        let prefix = format!("{key}:");
        let line = text
            .lines()
            .map(str::trim_start)
            .find(|l| l.starts_with(&prefix))
            .ok_or_else(|| Error::Calib {
                key: key.into(),
                msg: "missing".into(),
            })?;
        let values = line[prefix.len()..]
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Calib {
                key: key.into(),
                msg: format!("bad number: {e}"),
            })?;
        if values.len() != 12 {
            return Err(Error::Calib {
                key: key.into(),
                msg: format!("expected 12 values, found {}", values.len()),
            });
        }
        let mut m = [[0.0; 4]; 3];
        for (i, v) in values.into_iter().enumerate() {
            m[i / 4][i % 4] = v;
        }
        Ok(m)
    };
    CameraCalib::from_matrices(find("P2")?, find("P3")?)
}

pub fn read_label_file(path: &Path) -> Result<Vec<ObjectLabel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_file(&text)
}

pub fn read_calib_file(path: &Path) -> Result<CameraCalib> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_calib_file(&text)
}

/// KITTI evaluation difficulty. Ordered from strictest to loosest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

impl Difficulty {
    pub const EVALUATED: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    /// Devkit thresholds `(min box height px, max occlusion, max truncation)`,
    /// from the KITTI object development kit (`eval.cpp`).
    pub fn thresholds(self) -> Option<(f64, i32, f64)> {
        match self {
            Difficulty::Easy => Some((40.0, 0, 0.15)),
            Difficulty::Moderate => Some((25.0, 1, 0.30)),
            Difficulty::Hard => Some((25.0, 2, 0.50)),
            Difficulty::Ignored => None,
        }
    }

    pub fn min_height(self) -> f64 {
        self.thresholds().map_or(f64::INFINITY, |t| t.0)
    }

    /// Whether an object classified as `level` is evaluated at this
    /// difficulty. Levels are nested: Moderate includes Easy objects.
    pub fn admits(self, level: Difficulty) -> bool {
        self != Difficulty::Ignored && level <= self
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Moderate => "Moderate",
            Difficulty::Hard => "Hard",
            Difficulty::Ignored => "Ignored",
        }
    }
}

/// Strictest difficulty whose thresholds the label satisfies.
pub fn classify_difficulty(label: &ObjectLabel) -> Difficulty {
    let height = label.box2d.y2 - label.box2d.y1;
    for level in Difficulty::EVALUATED {
        let (min_h, max_occ, max_trunc) = level.thresholds().unwrap();
        if height >= min_h && label.occlusion <= max_occ && label.truncation <= max_trunc {
            return level;
        }
    }
    Difficulty::Ignored
}

/// Left/right images with their calibration and annotations.
#[derive(Debug, Clone)]
pub struct StereoFrame {
    pub left: RgbImage,
    pub right: RgbImage,
    pub calib: CameraCalib,
    pub labels: Vec<ObjectLabel>,
}

impl StereoFrame {
    pub fn new(left: RgbImage, right: RgbImage, calib: CameraCalib, labels: Vec<ObjectLabel>) -> Result<Self> {
        if left.dimensions() != right.dimensions() {
            return Err(Error::Shape(format!(
                "left {:?} and right {:?} differ",
                left.dimensions(),
                right.dimensions()
            )));
        }
        if left.width() == 0 || left.height() == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        Ok(Self {
            left,
            right,
            calib,
            labels,
        })
    }

    pub fn height(&self) -> u32 {
        self.left.height()
    }

    pub fn width(&self) -> u32 {
        self.left.width()
    }
}

/// Crop and resize parameters resolved for a concrete image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessTransform {
    pub crop_top: u32,
    pub scale_x: f64,
    pub scale_y: f64,
    pub target: (u32, u32),
}

impl PreprocessTransform {
    pub fn new(height: u32, width: u32, crop_top: u32, target: (u32, u32)) -> Result<Self> {
        if crop_top >= height {
            return Err(Error::InvalidCrop { crop_top, height });
        }
        let (th, tw) = target;
        if th == 0 || tw == 0 || th % 16 != 0 || tw % 16 != 0 {
            return Err(Error::Domain(format!(
                "target {th}x{tw} must be non-empty and divisible by 16"
            )));
        }
        Ok(Self {
            crop_top,
            scale_x: tw as f64 / width as f64,
            scale_y: th as f64 / (height - crop_top) as f64,
            target,
        })
    }

    pub fn apply_point(&self, u: f64, v: f64) -> (f64, f64) {
        (u * self.scale_x, (v - self.crop_top as f64) * self.scale_y)
    }

    pub fn apply_box(&self, b: &Box2D) -> Box2D {
        let (x1, y1) = self.apply_point(b.x1, b.y1);
        let (x2, y2) = self.apply_point(b.x2, b.y2);
        Box2D::new(x1, y1, x2, y2).clipped(self.target.1 as f64, self.target.0 as f64)
    }

    pub fn apply_calib(&self, calib: &CameraCalib) -> Result<CameraCalib> {
        calib.cropped_and_scaled(self.crop_top as f64, self.scale_x, self.scale_y)
    }

    /// Crops then bilinearly resamples. Destination pixel `(x', y')` reads the
    /// source at `(x' / sx, y' / sy + crop_top)`, the same map the calibration
    /// update uses.
    pub fn apply_image(&self, img: &RgbImage) -> RgbImage {
        let (th, tw) = self.target;
        if self.crop_top == 0 && (img.height(), img.width()) == (th, tw) {
            return img.clone();
        }
        let (w, h) = (img.width() as usize, img.height() as usize);
        let crop = self.crop_top as f64;
        RgbImage::from_fn(tw, th, |x, y| {
            let sx = (x as f64 / self.scale_x).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 / self.scale_y + crop).clamp(0.0, (h - 1) as f64);
            let x0 = (sx.floor() as usize).min(w.saturating_sub(2));
            let y0 = (sy.floor() as usize).min(h.saturating_sub(2));
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let mut px = [0u8; 3];
            for (ch, out) in px.iter_mut().enumerate() {
                let get = |xx: usize, yy: usize| img.get_pixel(xx as u32, yy as u32)[ch] as f64;
                let top = get(x0, y0) * (1.0 - fx) + get(x1, y0) * fx;
                let bot = get(x0, y1) * (1.0 - fx) + get(x1, y1) * fx;
                *out = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
            }
            Rgb(px)
        })
    }

    /// Moves 2D boxes into the preprocessed frame. 3D fields are unchanged.
    pub fn apply_labels(&self, labels: &[ObjectLabel]) -> Vec<ObjectLabel> {
        labels
            .iter()
            .map(|l| ObjectLabel {
                box2d: self.apply_box(&l.box2d),
                ..l.clone()
            })
            .collect()
    }
}

/// Crops `crop_top` rows and resamples both views to `target = (h, w)`.
pub fn preprocess_pair(
    frame: &StereoFrame,
    crop_top: u32,
    target: (u32, u32),
) -> Result<(RgbImage, RgbImage, CameraCalib)> {
    let t = PreprocessTransform::new(frame.height(), frame.width(), crop_top, target)?;
    Ok((
        t.apply_image(&frame.left),
        t.apply_image(&frame.right),
        t.apply_calib(&frame.calib)?,
    ))
}
