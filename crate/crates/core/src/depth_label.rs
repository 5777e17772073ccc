//! Object-level depth maps and the ground truth for depth sampling points.
//!
//! Every object's 2D box is painted with its 3D-center depth; where boxes
//! overlap the nearer object wins. An occluded object is then sampled at the
//! center of the tallest rectangle left visible in its box, instead of at its
//! projected 3D center (which may sit on the occluder).
//!
//! Coordinates: a map at scale `s` has pixel `(x, y)` covering image area
//! `[x*s, (x+1)*s) x [y*s, (y+1)*s)`. A box covers the map pixels whose
//! centers fall inside it. Sample points use normalized continuous image
//! coordinates `uv = (x / W, y / H)`.

use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::geometry::{project_point, Box2D};
use crate::kitti_io::{CameraCalib, ObjectLabel};
use crate::losses::BinTargetMap;
use crate::stereo_core::FeatureMap;
use crate::{Error, Result};

/// Logit given to the target bin when painting hard one-hot maps. Large
/// enough that the softmax is exactly one-hot in f64.
pub const ONE_HOT_LOGIT: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DepthMapScale {
    #[serde(rename = "4")]
    Quarter,
    #[serde(rename = "16")]
    Sixteenth,
}

impl DepthMapScale {
    pub fn factor(self) -> u32 {
        match self {
            DepthMapScale::Quarter => 4,
            DepthMapScale::Sixteenth => 16,
        }
    }

    pub fn from_factor(factor: u32) -> Option<Self> {
        match factor {
            4 => Some(DepthMapScale::Quarter),
            16 => Some(DepthMapScale::Sixteenth),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Sample at the projected 3D center.
    Center,
    /// Sample at the center of the visible region.
    Offset,
}

/// Image size and the map resolution derived from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapGeometry {
    pub image_w: u32,
    pub image_h: u32,
    pub scale: DepthMapScale,
}

impl MapGeometry {
    pub fn new(image_w: u32, image_h: u32, scale: DepthMapScale) -> Self {
        Self {
            image_w,
            image_h,
            scale,
        }
    }

    pub fn factor(&self) -> f64 {
        self.scale.factor() as f64
    }

    pub fn map_w(&self) -> usize {
        self.image_w.div_ceil(self.scale.factor()) as usize
    }

    pub fn map_h(&self) -> usize {
        self.image_h.div_ceil(self.scale.factor()) as usize
    }

    /// Map pixels whose centers fall inside `b`, or `None` if there are none.
    pub fn pixel_span(&self, b: &Box2D) -> Option<PixelRect> {
        let s = self.factor();
        let span = |lo: f64, hi: f64, n: usize| -> Option<(usize, usize)> {
            let first = (lo / s - 0.5).ceil().max(0.0);
            let end = ((hi / s - 0.5).ceil()).min(n as f64);
            (first.is_finite() && end.is_finite() && end > first).then(|| (first as usize, end as usize))
        };
        let (x0, x1) = span(b.x1, b.x2, self.map_w())?;
        let (y0, y1) = span(b.y1, b.y2, self.map_h())?;
        Some(PixelRect { x0, y0, x1, y1 })
    }

    /// Continuous map coordinates to normalized image coordinates.
    pub fn map_to_uv(&self, mx: f64, my: f64) -> [f64; 2] {
        let s = self.factor();
        [mx * s / self.image_w as f64, my * s / self.image_h as f64]
    }

    pub fn image_to_uv(&self, x: f64, y: f64) -> [f64; 2] {
        [x / self.image_w as f64, y / self.image_h as f64]
    }

    pub fn uv_to_image(&self, uv: [f64; 2]) -> (f64, f64) {
        (uv[0] * self.image_w as f64, uv[1] * self.image_h as f64)
    }

    /// Normalized image coordinates to the align-corners grid coordinates of
    /// a map with this geometry, so that a map pixel center is hit exactly.
    pub fn uv_to_grid(&self, uv: [f64; 2]) -> [f64; 2] {
        let s = self.factor();
        let px = uv[0] * self.image_w as f64 / s - 0.5;
        let py = uv[1] * self.image_h as f64 / s - 0.5;
        let norm = |p: f64, n: usize| if n > 1 { p / (n - 1) as f64 } else { 0.0 };
        [norm(px, self.map_w()), norm(py, self.map_h())]
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    /// Center in continuous pixel coordinates (pixel `i` spans `[i, i+1)`).
    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1) as f64, 0.5 * (self.y0 + self.y1) as f64)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    fn offset_by(&self, dx: usize, dy: usize) -> PixelRect {
        PixelRect {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }
}

/// Rendered object-level depth map. Background depth is `+inf` with
/// instance `-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectDepthMap {
    pub geometry: MapGeometry,
    pub w: usize,
    pub h: usize,
    pub depth: Vec<f64>,
    pub instance: Vec<i32>,
}

impl ObjectDepthMap {
    pub fn depth_at(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.w + x]
    }

    pub fn instance_at(&self, x: usize, y: usize) -> i32 {
        self.instance[y * self.w + x]
    }

    /// 16-bit image, depth in centimeters, 0 for background.
    pub fn to_png16_cm(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        ImageBuffer::from_fn(self.w as u32, self.h as u32, |x, y| {
            let d = self.depth_at(x as usize, y as usize);
            let cm = if d.is_finite() {
                (d * 100.0).round().clamp(1.0, u16::MAX as f64) as u16
            } else {
                0
            };
            Luma([cm])
        })
    }

    pub fn save_png16_cm(&self, path: &Path) -> Result<()> {
        self.to_png16_cm().save(path)?;
        Ok(())
    }
}

/// Whether a label takes part in depth-map rendering.
pub fn is_renderable(label: &ObjectLabel) -> bool {
    !label.is_dont_care() && label.center_depth() > 0.0 && label.box2d.x1 < label.box2d.x2 && label.box2d.y1 < label.box2d.y2
}

/// Paints every box with its object's center depth; the nearer object wins.
/// Equal depths keep the earlier label. Labels that are DontCare, behind the
/// camera or outside the image are skipped. Instance ids are label indices.
pub fn render_object_depth_map(labels: &[ObjectLabel], geometry: MapGeometry) -> ObjectDepthMap {
    let (w, h) = (geometry.map_w(), geometry.map_h());
    let mut depth = vec![f64::INFINITY; w * h];
    let mut instance = vec![-1; w * h];
    for (id, label) in labels.iter().enumerate() {
        if !is_renderable(label) {
            continue;
        }
        let Some(span) = geometry.pixel_span(&label.box2d) else {
            continue;
        };
        let d = label.center_depth();
        for y in span.y0..span.y1 {
            for x in span.x0..span.x1 {
                let i = y * w + x;
                if d < depth[i] {
                    depth[i] = d;
                    instance[i] = id as i32;
                }
            }
        }
    }
    ObjectDepthMap {
        geometry,
        w,
        h,
        depth,
        instance,
    }
}

/// Target box pixels not covered by any nearer occluder, stored over the
/// target's pixel span.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityMask {
    pub span: PixelRect,
    pub cells: Vec<bool>,
}

impl VisibilityMask {
    pub fn is_visible(&self, x: usize, y: usize) -> bool {
        self.span.contains(x, y) && self.cells[(y - self.span.y0) * self.span.width() + (x - self.span.x0)]
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Occluders at the same or greater depth than the target are ignored.
pub fn visibility_mask(target: &ObjectLabel, occluders: &[ObjectLabel], geometry: &MapGeometry) -> Option<VisibilityMask> {
    let span = geometry.pixel_span(&target.box2d)?;
    let mut cells = vec![true; span.width() * span.height()];
    for occ in occluders {
        if !is_renderable(occ) || occ.center_depth() >= target.center_depth() {
            continue;
        }
        let Some(o) = geometry.pixel_span(&occ.box2d) else {
            continue;
        };
        for y in o.y0.max(span.y0)..o.y1.min(span.y1) {
            for x in o.x0.max(span.x0)..o.x1.min(span.x1) {
                cells[(y - span.y0) * span.width() + (x - span.x0)] = false;
            }
        }
    }
    Some(VisibilityMask { span, cells })
}

/// Among all all-true sub-rectangles of a row-major `w x h` mask, the one
/// with the largest height; ties go to the wider, then the leftmost, then the
/// topmost. Runs in `O(w h)` with a column-height histogram.
pub fn tallest_rectangle(mask: &[bool], w: usize, h: usize) -> Option<PixelRect> {
    assert_eq!(mask.len(), w * h, "mask size");
    let mut heights = vec![0usize; w];
    let mut tallest = 0;
    for row in mask.chunks(w.max(1)) {
        for (hc, &m) in heights.iter_mut().zip(row) {
            *hc = if m { *hc + 1 } else { 0 };
            tallest = tallest.max(*hc);
        }
    }
    if tallest == 0 {
        return None;
    }
    heights.iter_mut().for_each(|v| *v = 0);
    let mut best: Option<PixelRect> = None;
    let better = |cand: &PixelRect, cur: &Option<PixelRect>| match cur {
        None => true,
        Some(b) => (cand.width(), std::cmp::Reverse(cand.x0), std::cmp::Reverse(cand.y0))
            > (b.width(), std::cmp::Reverse(b.x0), std::cmp::Reverse(b.y0)),
    };
    for (y, row) in mask.chunks(w).enumerate() {
        for (hc, &m) in heights.iter_mut().zip(row) {
            *hc = if m { *hc + 1 } else { 0 };
        }
        let mut x = 0;
        while x < w {
            if heights[x] < tallest {
                x += 1;
                continue;
            }
            let start = x;
            while x < w && heights[x] >= tallest {
                x += 1;
            }
            let cand = PixelRect {
                x0: start,
                y0: y + 1 - tallest,
                x1: x,
                y1: y + 1,
            };
            if better(&cand, &best) {
                best = Some(cand);
            }
        }
    }
    best
}

/// Ground-truth (or predicted) depth sampling location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    /// Normalized continuous image coordinates.
    pub uv: [f64; 2],
    /// Displacement from the projected 3D center, divided by the 2D box
    /// width and height.
    pub offset: [f64; 2],
    /// Chosen visible rectangle in map pixels.
    pub visible_rect: Option<PixelRect>,
    /// Set when nothing of the object is visible and the box center was used.
    pub fallback: bool,
}

/// Projected 3D (geometric) center in image pixels; the 2D box center if the
/// object is not in front of the camera.
pub fn projected_center(label: &ObjectLabel, calib: &CameraCalib) -> (f64, f64) {
    let [x, y, z] = label.location_xyz;
    project_point(calib, [x, y - 0.5 * label.dims_hwl[0], z]).unwrap_or_else(|_| label.box2d.center())
}

fn offset_from_center(target: &ObjectLabel, calib: &CameraCalib, px: f64, py: f64) -> [f64; 2] {
    let (cx, cy) = projected_center(target, calib);
    let (bw, bh) = (target.box2d.width(), target.box2d.height());
    let norm = |d: f64, n: f64| if n > 0.0 { d / n } else { 0.0 };
    [norm(px - cx, bw), norm(py - cy, bh)]
}

/// Inverse of the offset encoding: image pixel position of a sample point.
pub fn sample_position_from_offset(target: &ObjectLabel, calib: &CameraCalib, offset: [f64; 2]) -> (f64, f64) {
    let (cx, cy) = projected_center(target, calib);
    (cx + offset[0] * target.box2d.width(), cy + offset[1] * target.box2d.height())
}

/// Center of the tallest visible rectangle of `target` after removing the
/// boxes of nearer `occluders`. Falls back to the 2D box center (flagged)
/// when nothing is visible.
pub fn visible_sample_point(
    target: &ObjectLabel,
    occluders: &[ObjectLabel],
    calib: &CameraCalib,
    geometry: &MapGeometry,
) -> SamplePoint {
    let rect = visibility_mask(target, occluders, geometry).and_then(|mask| {
        tallest_rectangle(&mask.cells, mask.span.width(), mask.span.height())
            .map(|r| r.offset_by(mask.span.x0, mask.span.y0))
    });
    match rect {
        Some(r) => {
            let (mx, my) = r.center();
            let uv = geometry.map_to_uv(mx, my);
            let (px, py) = geometry.uv_to_image(uv);
            SamplePoint {
                uv,
                offset: offset_from_center(target, calib, px, py),
                visible_rect: Some(r),
                fallback: false,
            }
        }
        None => {
            let (px, py) = target.box2d.center();
            SamplePoint {
                uv: geometry.image_to_uv(px, py),
                offset: offset_from_center(target, calib, px, py),
                visible_rect: None,
                fallback: true,
            }
        }
    }
}

/// Sample point at the projected 3D center (zero offset).
pub fn center_sample_point(target: &ObjectLabel, calib: &CameraCalib, geometry: &MapGeometry) -> SamplePoint {
    let (px, py) = projected_center(target, calib);
    SamplePoint {
        uv: geometry.image_to_uv(px, py),
        offset: [0.0, 0.0],
        visible_rect: None,
        fallback: false,
    }
}

/// Linearly increasing depth discretization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBinSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub n_bins: usize,
}

impl Default for DepthBinSpec {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            d_max: 60.0,
            n_bins: 80,
        }
    }
}

impl DepthBinSpec {
    pub fn new(d_min: f64, d_max: f64, n_bins: usize) -> Result<Self> {
        if !(d_min < d_max) || !d_min.is_finite() || !d_max.is_finite() || n_bins < 2 {
            return Err(Error::Domain(format!(
                "invalid bin spec [{d_min}, {d_max}] with {n_bins} bins"
            )));
        }
        Ok(Self { d_min, d_max, n_bins })
    }

    fn k_k1(&self) -> f64 {
        (self.n_bins * (self.n_bins + 1)) as f64
    }

    /// `d_min + (d_max - d_min) * i (i + 1) / (K (K + 1))` for `i` in `0..=K`.
    pub fn edge(&self, i: usize) -> f64 {
        if i >= self.n_bins {
            return self.d_max;
        }
        self.d_min + (self.d_max - self.d_min) * (i * (i + 1)) as f64 / self.k_k1()
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.n_bins).map(|i| self.edge(i)).collect()
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        0.5 * (self.edge(k) + self.edge(k + 1))
    }

    pub fn bin_width(&self, k: usize) -> f64 {
        self.edge(k + 1) - self.edge(k)
    }

    /// Bin containing `depth`; out-of-range depths clamp to the end bins.
    pub fn encode(&self, depth: f64) -> usize {
        if !(depth > self.d_min) {
            return 0;
        }
        if depth >= self.d_max {
            return self.n_bins - 1;
        }
        let t = (depth - self.d_min) / (self.d_max - self.d_min);
        let guess = ((-1.0 + (1.0 + 4.0 * t * self.k_k1()).sqrt()) / 2.0).floor() as usize;
        let mut k = guess.min(self.n_bins - 1);
        // fix up floating-point slop at the edges
        while k > 0 && depth < self.edge(k) {
            k -= 1;
        }
        while k + 1 < self.n_bins && depth >= self.edge(k + 1) {
            k += 1;
        }
        k
    }

    /// Expected bin center under a probability vector.
    pub fn decode(&self, probs: &[f64]) -> Result<f64> {
        if probs.len() != self.n_bins {
            return Err(Error::Shape(format!(
                "{} probabilities for {} bins",
                probs.len(),
                self.n_bins
            )));
        }
        Ok(probs.iter().enumerate().map(|(k, p)| p * self.bin_center(k)).sum())
    }

    pub fn one_hot(&self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_bins];
        v[k.min(self.n_bins - 1)] = 1.0;
        v
    }
}

/// Per-pixel bin targets of a rendered map; background is ignored.
pub fn bin_targets(map: &ObjectDepthMap, spec: &DepthBinSpec) -> BinTargetMap {
    let targets = map
        .depth
        .iter()
        .map(|&d| d.is_finite().then(|| spec.encode(d)))
        .collect();
    BinTargetMap {
        h: map.h,
        w: map.w,
        targets,
    }
}

/// Hard one-hot logits: `logit` on the target bin, zero elsewhere (so ignored
/// pixels are uniform).
pub fn one_hot_logits(targets: &BinTargetMap, n_bins: usize, logit: f64) -> FeatureMap {
    FeatureMap::from_fn(targets.h, targets.w, n_bins, |y, x, c| {
        match targets.targets[y * targets.w + x] {
            Some(k) if k == c => logit,
            _ => 0.0,
        }
    })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Bilinear footprint of one grid coordinate: the four neighbors and their
/// weights, plus d(grid px)/d(uv) for gradient use.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Footprint {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// `w - 1` (resp. `h - 1`) inside `[0, 1]`, zero where the coordinate clamps.
    du_scale: f64,
    dv_scale: f64,
}

/// Cell along one axis. On a node line the lower-index cell is used
/// (`fx == 1`), which fixes the one-sided gradient there.
fn axis(u: f64, n: usize) -> (usize, usize, f64, f64) {
    if n == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let span = (n - 1) as f64;
    let inside = (0.0..=1.0).contains(&u);
    let p = u.clamp(0.0, 1.0) * span;
    let i0 = ((p.ceil() as isize) - 1).clamp(0, n as isize - 2) as usize;
    (i0, i0 + 1, p - i0 as f64, if inside { span } else { 0.0 })
}

fn footprint(map: &FeatureMap, uv: [f64; 2]) -> Footprint {
    let (x0, x1, fx, du_scale) = axis(uv[0], map.w);
    let (y0, y1, fy, dv_scale) = axis(uv[1], map.h);
    Footprint {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        du_scale,
        dv_scale,
    }
}

impl Footprint {
    fn taps(&self) -> [(usize, usize, f64); 4] {
        [
            (self.y0, self.x0, (1.0 - self.fx) * (1.0 - self.fy)),
            (self.y0, self.x1, self.fx * (1.0 - self.fy)),
            (self.y1, self.x0, (1.0 - self.fx) * self.fy),
            (self.y1, self.x1, self.fx * self.fy),
        ]
    }
}

/// Bilinear sample, align-corners: `uv = (0, 0)` is pixel `(0, 0)` and
/// `(1, 1)` is pixel `(w - 1, h - 1)`. Coordinates outside clamp to the border.
pub fn grid_sample_point(map: &FeatureMap, uv: [f64; 2]) -> Vec<f64> {
    let fp = footprint(map, uv);
    let mut out = vec![0.0; map.c];
    for (y, x, wgt) in fp.taps() {
        for (o, v) in out.iter_mut().zip(map.pixel(y, x)) {
            *o += wgt * v;
        }
    }
    out
}

pub fn grid_sample_bilinear(map: &FeatureMap, points: &[[f64; 2]]) -> Vec<Vec<f64>> {
    points.iter().map(|&uv| grid_sample_point(map, uv)).collect()
}

/// Analytic partials of one bilinear sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGradient {
    /// `(y, x, weight)`: d out[c] / d map[y, x, c] for every channel `c`.
    pub map_weights: [(usize, usize, f64); 4],
    /// d out[c] / d u, per channel.
    pub d_du: Vec<f64>,
    /// d out[c] / d v, per channel.
    pub d_dv: Vec<f64>,
}

pub fn grid_sample_gradients(map: &FeatureMap, uv: [f64; 2]) -> SampleGradient {
    let fp = footprint(map, uv);
    let c = map.c;
    let (p00, p01) = (map.pixel(fp.y0, fp.x0), map.pixel(fp.y0, fp.x1));
    let (p10, p11) = (map.pixel(fp.y1, fp.x0), map.pixel(fp.y1, fp.x1));
    let mut d_du = vec![0.0; c];
    let mut d_dv = vec![0.0; c];
    for ch in 0..c {
        let dx = (1.0 - fp.fy) * (p01[ch] - p00[ch]) + fp.fy * (p11[ch] - p10[ch]);
        let dy = (1.0 - fp.fx) * (p10[ch] - p00[ch]) + fp.fx * (p11[ch] - p01[ch]);
        d_du[ch] = fp.du_scale * dx;
        d_dv[ch] = fp.dv_scale * dy;
    }
    SampleGradient {
        map_weights: fp.taps(),
        d_du,
        d_dv,
    }
}

/// Reads a `(h, w, n_bins)` logit map at a sample point: bilinear sample,
/// softmax over bins, expected bin center.
pub fn sample_object_depth(
    bin_logits: &FeatureMap,
    point: &SamplePoint,
    spec: &DepthBinSpec,
    geometry: &MapGeometry,
) -> Result<f64> {
    if (bin_logits.h, bin_logits.w, bin_logits.c) != (geometry.map_h(), geometry.map_w(), spec.n_bins) {
        return Err(Error::Shape(format!(
            "bin map {:?} does not match geometry {}x{}x{}",
            bin_logits.shape(),
            geometry.map_h(),
            geometry.map_w(),
            spec.n_bins
        )));
    }
    let logits = grid_sample_point(bin_logits, geometry.uv_to_grid(point.uv));
    spec.decode(&softmax(&logits))
}

/// One object of a per-frame label artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectArtifact {
    pub id: usize,
    #[serde(rename = "class")]
    pub class_name: String,
    pub center_depth_m: f64,
    pub sample_uv: [f64; 2],
    pub offset: [f64; 2],
    pub visible_rect: Option<PixelRect>,
    pub fallback_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelArtifact {
    pub frame: String,
    pub image_size: [u32; 2],
    pub depth_map_scale: DepthMapScale,
    pub sampling_mode: SamplingMode,
    pub objects: Vec<ObjectArtifact>,
}

/// Sample points for every renderable object of a frame.
pub fn build_label_artifact(
    frame: &str,
    labels: &[ObjectLabel],
    calib: &CameraCalib,
    geometry: &MapGeometry,
    mode: SamplingMode,
) -> LabelArtifact {
    let objects = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| is_renderable(l) && geometry.pixel_span(&l.box2d).is_some())
        .map(|(id, label)| {
            let point = match mode {
                SamplingMode::Offset => visible_sample_point(label, labels, calib, geometry),
                SamplingMode::Center => center_sample_point(label, calib, geometry),
            };
            ObjectArtifact {
                id,
                class_name: label.class_name.clone(),
                center_depth_m: label.center_depth(),
                sample_uv: point.uv,
                offset: point.offset,
                visible_rect: point.visible_rect,
                fallback_flag: point.fallback,
            }
        })
        .collect();
    LabelArtifact {
        frame: frame.to_string(),
        image_size: [geometry.image_w, geometry.image_h],
        depth_map_scale: geometry.scale,
        sampling_mode: mode,
        objects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calib() -> CameraCalib {
        CameraCalib::from_matrices(
            [[700.0, 0.0, 16.0, 0.0], [0.0, 700.0, 12.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            [[700.0, 0.0, 16.0, -378.0], [0.0, 700.0, 12.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        )
        .unwrap()
    }

    fn obj(x1: f64, y1: f64, x2: f64, y2: f64, depth: f64) -> ObjectLabel {
        ObjectLabel::car(Box2D::new(x1, y1, x2, y2), [1.5, 1.6, 3.9], [0.0, 1.0, depth], 0.0)
    }

    fn unit_geom(w: u32, h: u32) -> MapGeometry {
        // Scale factor 4 on a 4x-upscaled box keeps the pixel math integral.
        MapGeometry::new(w, h, DepthMapScale::Quarter)
    }

    #[test]
    fn single_and_empty_scene() {
        let g = unit_geom(64, 48);
        let map = render_object_depth_map(&[obj(8.0, 8.0, 24.0, 20.0, 10.0)], g);
        assert_eq!((map.w, map.h), (16, 12));
        for y in 0..map.h {
            for x in 0..map.w {
                let inside = (2..6).contains(&x) && (2..5).contains(&y);
                assert_eq!(map.depth_at(x, y) == 10.0, inside, "({x}, {y})");
                assert_eq!(map.instance_at(x, y) == 0, inside);
            }
        }
        let empty = render_object_depth_map(&[], g);
        assert!(empty.depth.iter().all(|d| d.is_infinite()));
        assert!(empty.instance.iter().all(|&i| i == -1));
    }

    #[test]
    fn overlap_keeps_the_nearer_object() {
        // cols 0-10 at depth 10, cols 5-15 at depth 5 (scale-4 map pixels)
        let g = unit_geom(64, 16);
        let a = obj(0.0, 0.0, 44.0, 16.0, 10.0);
        let b = obj(20.0, 0.0, 64.0, 16.0, 5.0);
        let map = render_object_depth_map(&[a, b], g);
        for x in 0..16 {
            let expected = if x < 5 { 10.0 } else { 5.0 };
            assert_eq!(map.depth_at(x, 0), expected, "col {x}");
        }
        assert_eq!(map.instance_at(7, 2), 1);
        assert_eq!(map.instance_at(2, 2), 0);
    }

    #[test]
    fn dont_care_and_offscreen_boxes_are_skipped() {
        let g = unit_geom(32, 32);
        let mut dc = obj(0.0, 0.0, 32.0, 32.0, 3.0);
        dc.class_name = "DontCare".into();
        let off = obj(100.0, 100.0, 120.0, 120.0, 4.0);
        let map = render_object_depth_map(&[dc, off], g);
        assert!(map.instance.iter().all(|&i| i == -1));
    }

    #[test]
    fn unoccluded_point_is_box_center() {
        let g = MapGeometry::new(32, 24, DepthMapScale::Quarter);
        let c = calib();
        let t = obj(4.0, 4.0, 28.0, 20.0, 20.0);
        let p = visible_sample_point(&t, &[], &c, &g);
        assert!(!p.fallback);
        assert_eq!(p.visible_rect, Some(PixelRect { x0: 1, y0: 1, x1: 7, y1: 5 }));
        assert_eq!(g.uv_to_image(p.uv), (16.0, 12.0));
        // offset is measured from the projected center
        let (cx, cy) = projected_center(&t, &c);
        let expected = [(16.0 - cx) / 24.0, (12.0 - cy) / 16.0];
        assert!((p.offset[0] - expected[0]).abs() < 1e-12 && (p.offset[1] - expected[1]).abs() < 1e-12);
        let (sx, sy) = sample_position_from_offset(&t, &c, p.offset);
        assert!((sx - 16.0).abs() < 1e-9 && (sy - 12.0).abs() < 1e-9);
    }

    #[test]
    fn side_occluded_box() {
        // box [0,10]^2 at unit scale, occluder over columns 0-6
        let g = MapGeometry::new(40, 40, DepthMapScale::Quarter);
        let scale = 4.0;
        let t = obj(0.0, 0.0, 10.0 * scale, 10.0 * scale, 20.0);
        let occ = obj(0.0, 0.0, 6.0 * scale, 10.0 * scale, 10.0);
        let p = visible_sample_point(&t, &[occ], &calib(), &g);
        assert_eq!(p.visible_rect, Some(PixelRect { x0: 6, y0: 0, x1: 10, y1: 10 }));
        let (x, y) = g.uv_to_image(p.uv);
        assert_eq!((x / scale, y / scale), (8.0, 5.0));
    }

    #[test]
    fn farther_boxes_do_not_occlude_and_full_cover_falls_back() {
        let g = unit_geom(40, 40);
        let t = obj(0.0, 0.0, 40.0, 40.0, 20.0);
        let behind = obj(0.0, 0.0, 40.0, 40.0, 30.0);
        assert!(!visible_sample_point(&t, &[behind], &calib(), &g).fallback);
        let front = obj(0.0, 0.0, 40.0, 40.0, 5.0);
        let p = visible_sample_point(&t, &[front], &calib(), &g);
        assert!(p.fallback);
        assert_eq!(p.visible_rect, None);
        assert_eq!(g.uv_to_image(p.uv), (20.0, 20.0));
    }

    /// Exhaustive oracle: best of all all-true rectangles by
    /// (height, width, -left, -top).
    fn brute_force(mask: &[bool], w: usize, h: usize) -> Option<PixelRect> {
        let mut best: Option<(usize, usize, std::cmp::Reverse<usize>, std::cmp::Reverse<usize>)> = None;
        for y0 in 0..h {
            for y1 in y0 + 1..=h {
                for x0 in 0..w {
                    for x1 in x0 + 1..=w {
                        let full = (y0..y1).all(|y| (x0..x1).all(|x| mask[y * w + x]));
                        if !full {
                            break;
                        }
                        let key = (y1 - y0, x1 - x0, std::cmp::Reverse(x0), std::cmp::Reverse(y0));
                        if best.map_or(true, |b| key > b) {
                            best = Some(key);
                        }
                    }
                }
            }
        }
        best.map(|(hh, ww, x0, y0)| PixelRect { x0: x0.0, y0: y0.0, x1: x0.0 + ww, y1: y0.0 + hh })
    }

    #[test]
    fn tallest_rectangle_matches_brute_force() {
        let mut s = 12345u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            s
        };
        for _ in 0..300 {
            let w = (next() % 12 + 1) as usize;
            let h = (next() % 12 + 1) as usize;
            let density = next() % 10;
            let mask: Vec<bool> = (0..w * h).map(|_| next() % 10 >= density.min(8)).collect();
            assert_eq!(tallest_rectangle(&mask, w, h), brute_force(&mask, w, h), "{w}x{h} {mask:?}");
        }
        // L-shape: top-left quadrant removed
        let (w, h) = (6, 6);
        let mask: Vec<bool> = (0..w * h).map(|i| !(i / w < 3 && i % w < 3)).collect();
        assert_eq!(tallest_rectangle(&mask, w, h), Some(PixelRect { x0: 3, y0: 0, x1: 6, y1: 6 }));
        assert_eq!(tallest_rectangle(&[false; 4], 2, 2), None);
    }

    #[test]
    fn lid_edges_and_boundaries() {
        let spec = DepthBinSpec::default();
        let edges = spec.edges();
        assert_eq!(edges.len(), 81);
        assert_eq!(edges[0], 1.0);
        assert_eq!(edges[80], 60.0);
        assert!(edges.windows(2).all(|e| e[0] < e[1]));
        // widths grow linearly
        let w0 = spec.bin_width(0);
        for k in 1..80 {
            assert!((spec.bin_width(k) - (k + 1) as f64 * w0).abs() < 1e-9);
        }
        assert_eq!(spec.encode(1.0), 0);
        assert_eq!(spec.encode(60.0), 79);
        assert_eq!(spec.encode(-3.0), 0);
        assert_eq!(spec.encode(500.0), 79);
        for k in 0..80 {
            assert_eq!(spec.encode(spec.edge(k)), k);
            assert_eq!(spec.decode(&spec.one_hot(k)).unwrap(), spec.bin_center(k));
        }
        assert!(DepthBinSpec::new(5.0, 5.0, 10).is_err());
        assert!(DepthBinSpec::new(1.0, 5.0, 1).is_err());
        assert!(spec.decode(&[1.0]).is_err());
    }

    #[test]
    fn lid_round_trip_within_half_bin() {
        let spec = DepthBinSpec::default();
        for i in 0..1000 {
            let d = 1.0 + 59.0 * (i as f64 + 0.37) / 1000.0;
            let k = spec.encode(d);
            assert!(spec.edge(k) <= d && d < spec.edge(k + 1));
            let back = spec.decode(&spec.one_hot(k)).unwrap();
            assert!((back - d).abs() <= 0.5 * spec.bin_width(k) + 1e-12);
        }
    }

    fn ramp_map() -> FeatureMap {
        FeatureMap::from_fn(3, 4, 2, |y, x, c| (10 * y + x) as f64 + 100.0 * c as f64)
    }

    #[test]
    fn grid_sample_nodes_and_midpoints() {
        let m = ramp_map();
        for y in 0..3 {
            for x in 0..4 {
                let uv = [x as f64 / 3.0, y as f64 / 2.0];
                let v = grid_sample_point(&m, uv);
                assert!((v[0] - m.get(y, x, 0)).abs() < 1e-12 && (v[1] - m.get(y, x, 1)).abs() < 1e-12);
            }
        }
        let mid = grid_sample_point(&m, [0.5 / 3.0, 0.5]);
        assert!((mid[0] - 0.5 * (m.get(1, 0, 0) + m.get(1, 1, 0))).abs() < 1e-12);
        // clamping
        assert_eq!(grid_sample_point(&m, [-2.0, 7.0]), m.pixel(2, 0).to_vec());
    }

    #[test]
    fn gradient_basics() {
        let flat = FeatureMap::from_fn(4, 5, 3, |_, _, _| 2.5);
        let g = grid_sample_gradients(&flat, [0.37, 0.61]);
        assert!(g.d_du.iter().chain(&g.d_dv).all(|&v| v == 0.0));
        let total: f64 = g.map_weights.iter().map(|t| t.2).sum();
        assert!((total - 1.0).abs() < 1e-15);
        // a node line uses the lower cell: d/du on the ramp is (w-1) * slope either way
        let m = ramp_map();
        let on_line = grid_sample_gradients(&m, [1.0 / 3.0, 0.25]);
        assert!((on_line.d_du[0] - 3.0).abs() < 1e-12);
        assert_eq!(on_line.map_weights[0].1, 0);
        // clamped coordinates have zero uv gradient
        let outside = grid_sample_gradients(&m, [1.5, 0.5]);
        assert_eq!(outside.d_du, vec![0.0, 0.0]);
    }

    #[test]
    fn constant_bin_field_decodes_to_bin_center() {
        let spec = DepthBinSpec::default();
        let g = MapGeometry::new(64, 32, DepthMapScale::Quarter);
        let k = 37;
        let targets = BinTargetMap {
            h: g.map_h(),
            w: g.map_w(),
            targets: vec![Some(k); g.map_h() * g.map_w()],
        };
        let logits = one_hot_logits(&targets, spec.n_bins, ONE_HOT_LOGIT);
        for uv in [[0.0, 0.0], [0.31, 0.77], [1.0, 1.0], [0.5, 0.5]] {
            let p = SamplePoint { uv, offset: [0.0; 2], visible_rect: None, fallback: false };
            let d = sample_object_depth(&logits, &p, &spec, &g).unwrap();
            assert!((d - spec.bin_center(k)).abs() < 1e-9);
        }
        let wrong = MapGeometry::new(64, 64, DepthMapScale::Quarter);
        let p = SamplePoint { uv: [0.5; 2], offset: [0.0; 2], visible_rect: None, fallback: false };
        assert!(sample_object_depth(&logits, &p, &spec, &wrong).is_err());
    }

    #[test]
    fn offset_sampling_reads_the_occluded_object() {
        // Far car whose center is hidden by a near car on its left half.
        let g = MapGeometry::new(128, 64, DepthMapScale::Quarter);
        let spec = DepthBinSpec::default();
        let c = CameraCalib::from_matrices(
            [[700.0, 0.0, 64.0, 0.0], [0.0, 700.0, 32.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            [[700.0, 0.0, 64.0, -378.0], [0.0, 700.0, 32.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        )
        .unwrap();
        let mut far = obj(40.0, 16.0, 88.0, 48.0, 30.0);
        far.location_xyz = [0.0, 0.75, 30.0];
        let near = obj(20.0, 8.0, 72.0, 60.0, 10.0);
        let labels = vec![far.clone(), near.clone()];
        let map = render_object_depth_map(&labels, g);
        let logits = one_hot_logits(&bin_targets(&map, &spec), spec.n_bins, ONE_HOT_LOGIT);
        let half = |d: f64| 0.5 * spec.bin_width(spec.encode(d));

        let center = center_sample_point(&far, &c, &g);
        let at_center = sample_object_depth(&logits, &center, &spec, &g).unwrap();
        assert!((at_center - 10.0).abs() <= half(10.0), "center sampling hits the occluder: {at_center}");

        let offset = visible_sample_point(&far, &labels, &c, &g);
        let at_offset = sample_object_depth(&logits, &offset, &spec, &g).unwrap();
        assert!((at_offset - 30.0).abs() <= half(30.0), "offset sampling: {at_offset}");
    }

    #[test]
    fn artifact_serializes_expected_keys() {
        let g = unit_geom(64, 48);
        let labels = vec![obj(8.0, 8.0, 24.0, 20.0, 10.0), obj(16.0, 8.0, 40.0, 30.0, 20.0)];
        let art = build_label_artifact("000001", &labels, &calib(), &g, SamplingMode::Offset);
        let json = serde_json::to_value(&art).unwrap();
        let o = &json["objects"][1];
        for key in ["id", "class", "center_depth_m", "sample_uv", "offset", "visible_rect", "fallback_flag"] {
            assert!(o.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["depth_map_scale"], "4");
        assert_eq!(json["sampling_mode"], "offset");
        let back: LabelArtifact = serde_json::from_value(json).unwrap();
        assert_eq!(back, art);
    }

    #[test]
    fn depth_png_in_centimeters() {
        let g = unit_geom(16, 16);
        let map = render_object_depth_map(&[obj(0.0, 0.0, 8.0, 8.0, 12.345)], g);
        let png = map.to_png16_cm();
        assert_eq!(png.get_pixel(0, 0)[0], 1235);
        assert_eq!(png.get_pixel(3, 3)[0], 0);
    }
}
