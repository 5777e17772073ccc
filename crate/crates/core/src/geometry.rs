//! Box geometry: projection, overlap metrics and scale-mode conversion.
//!
//! Camera frame follows KITTI: x right, y down, z forward. Bird's-eye
//! view (BEV) works in the (x, z) plane.

use serde::{Deserialize, Serialize};

use crate::kitti_io::{CameraCalib, ObjectLabel};
use crate::{Error, Result};

/// Polygon areas below this are treated as no overlap.
pub const AREA_EPS: f64 = 1e-12;

/// Axis-aligned pixel box, corners inclusive of `x1, y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn intersection_area(&self, other: &Box2D) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Smallest box containing both.
    pub fn enclosing(&self, other: &Box2D) -> Box2D {
        Box2D::new(
            self.x1.min(other.x1),
            self.y1.min(other.y1),
            self.x2.max(other.x2),
            self.y2.max(other.y2),
        )
    }

    /// Box scaled into `[0, 1]` coordinates of a `width x height` image.
    pub fn normalized(&self, width: f64, height: f64) -> Box2D {
        Box2D::new(
            self.x1 / width,
            self.y1 / height,
            self.x2 / width,
            self.y2 / height,
        )
    }

    pub fn clipped(&self, width: f64, height: f64) -> Box2D {
        Box2D::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Metric 3D box. `center` is the geometric center, not KITTI's bottom center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// Height, width, length in meters.
    pub dims_hwl: [f64; 3],
    /// Rotation around the camera y axis.
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], dims_hwl: [f64; 3], yaw: f64) -> Self {
        Self {
            center,
            dims_hwl,
            yaw,
        }
    }

    /// Lifts the label's bottom-center location by half the height.
    /// Up is -y in the camera frame.
    pub fn from_label(label: &ObjectLabel) -> Box3D {
        let [x, y, z] = label.location_xyz;
        let h = label.dims_hwl[0];
        Box3D::new([x, y - 0.5 * h, z], label.dims_hwl, label.rotation_y)
    }

    pub fn height(&self) -> f64 {
        self.dims_hwl[0]
    }

    pub fn volume(&self) -> f64 {
        self.dims_hwl.iter().product()
    }

    /// Vertical extent `(top, bottom)` along camera y.
    pub fn y_range(&self) -> (f64, f64) {
        let half = 0.5 * self.height();
        (self.center[1] - half, self.center[1] + half)
    }

    /// BEV footprint, counter-clockwise in (x, z).
    pub fn bev(&self) -> BevPolygon {
        let [_, w, l] = self.dims_hwl;
        let (s, c) = self.yaw.sin_cos();
        let (cx, cz) = (self.center[0], self.center[2]);
        let local = [
            (0.5 * l, 0.5 * w),
            (-0.5 * l, 0.5 * w),
            (-0.5 * l, -0.5 * w),
            (0.5 * l, -0.5 * w),
        ];
        let mut vertices = local.map(|(x, z)| (cx + c * x + s * z, cz - s * x + c * z));
        if signed_area(&vertices) < 0.0 {
            vertices.reverse();
        }
        BevPolygon { vertices }
    }

    /// The eight corners in camera coordinates.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let [h, w, l] = self.dims_hwl;
        let (s, c) = self.yaw.sin_cos();
        let mut out = [[0.0; 3]; 8];
        let mut k = 0;
        for dx in [-0.5, 0.5] {
            for dy in [-0.5, 0.5] {
                for dz in [-0.5, 0.5] {
                    let (x, y, z) = (dx * l, dy * h, dz * w);
                    out[k] = [
                        self.center[0] + c * x + s * z,
                        self.center[1] + y,
                        self.center[2] - s * x + c * z,
                    ];
                    k += 1;
                }
            }
        }
        out
    }
}

/// Rotated rectangle footprint in the (x, z) plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevPolygon {
    pub vertices: [(f64, f64); 4],
}

impl BevPolygon {
    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }
}

fn signed_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

/// Sutherland–Hodgman: clips `subject` against the convex CCW `clip` polygon.
fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output: Vec<(f64, f64)> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let s_cur = side(cur);
            let s_prev = side(prev);
            if s_cur >= 0.0 {
                if s_prev < 0.0 {
                    output.push(intersect(prev, cur, s_prev, s_cur));
                }
                output.push(cur);
            } else if s_prev >= 0.0 {
                output.push(intersect(prev, cur, s_prev, s_cur));
            }
        }
    }
    output
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

/// Area of the intersection of two BEV footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let pa = a.bev();
    let pb = b.bev();
    let area = signed_area(&clip_convex(&pa.vertices, &pb.vertices)).abs();
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

/// Projects a camera-frame point through the left projection matrix.
pub fn project_point(calib: &CameraCalib, xyz: [f64; 3]) -> Result<(f64, f64)> {
    if !(xyz[2] > 0.0) {
        return Err(Error::BehindCamera(xyz[2]));
    }
    let p = &calib.p2;
    let h = [xyz[0], xyz[1], xyz[2], 1.0];
    let row = |r: usize| (0..4).map(|c| p[r][c] * h[c]).sum::<f64>();
    let w = row(2);
    if !(w > 0.0) {
        return Err(Error::BehindCamera(w));
    }
    Ok((row(0) / w, row(1) / w))
}

/// Tight 2D box around the projected corners of a 3D box. All corners must
/// be in front of the camera.
pub fn project_box(calib: &CameraCalib, b: &Box3D) -> Result<Box2D> {
    let mut out = Box2D::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for corner in b.corners() {
        let (u, v) = project_point(calib, corner)?;
        out.x1 = out.x1.min(u);
        out.y1 = out.y1.min(v);
        out.x2 = out.x2.max(u);
        out.y2 = out.y2.max(v);
    }
    Ok(out)
}

pub fn iou2d(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU. Degenerate (zero-area enclosing) pairs give 0.
pub fn giou2d(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let enclosing = a.enclosing(b).area();
    if enclosing <= 0.0 {
        return 0.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    iou - (enclosing - union) / enclosing
}

pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.bev().area() + b.bev().area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a_top, a_bot) = a.y_range();
    let (b_top, b_bot) = b.y_range();
    let overlap_h = a_bot.min(b_bot) - a_top.max(b_top);
    if overlap_h <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * overlap_h;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

fn check_depth_focal(depth: f64, focal: f64) -> Result<()> {
    if !(depth > 0.0) || !(focal > 0.0) {
        return Err(Error::Domain(format!(
            "depth ({depth}) and focal ({focal}) must be positive"
        )));
    }
    Ok(())
}

/// Pinhole inversion of a projected (pixel) height and width to meters.
/// Length has no image-plane counterpart and is not handled here.
pub fn absolute_from_projected_scale(
    proj_h: f64,
    proj_w: f64,
    depth: f64,
    focal: f64,
) -> Result<(f64, f64)> {
    check_depth_focal(depth, focal)?;
    Ok((proj_h * depth / focal, proj_w * depth / focal))
}

pub fn projected_from_absolute_scale(h: f64, w: f64, depth: f64, focal: f64) -> Result<(f64, f64)> {
    check_depth_focal(depth, focal)?;
    Ok((h * focal / depth, w * focal / depth))
}

/// The two 3D-size parameterizations a detection head may regress.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Absolute,
    Projected,
}

impl ScaleMode {
    /// Converts a predicted `[h, w, l]` triple to meters. In projected mode
    /// `h` and `w` are pixels; `l` passes through unchanged.
    pub fn to_absolute(self, dims: [f64; 3], depth: f64, focal: f64) -> Result<[f64; 3]> {
        match self {
            ScaleMode::Absolute => Ok(dims),
            ScaleMode::Projected => {
                let (h, w) = absolute_from_projected_scale(dims[0], dims[1], depth, focal)?;
                Ok([h, w, dims[2]])
            }
        }
    }
}
