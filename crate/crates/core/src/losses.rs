//! Training-loss terms, evaluated on explicit tensors.

use std::f64::consts::{PI, SQRT_2};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::depth_label::softmax;
use crate::matching::{clamp_prob, FocalParams};
use crate::stereo_core::{FeatureMap, DISPARITY_HEAD_CHANNELS};
use crate::{Error, Result};

pub const HEADING_BINS: usize = 12;

/// Per-pixel depth-bin targets; `None` pixels are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinTargetMap {
    pub h: usize,
    pub w: usize,
    pub targets: Vec<Option<usize>>,
}

impl BinTargetMap {
    pub fn valid_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Binary α-balanced focal loss averaged over all positions.
pub fn focal_loss(probs: &[f64], targets: &[bool], fp: &FocalParams) -> Result<f64> {
    if probs.len() != targets.len() {
        return Err(Error::Shape(format!("{} probabilities for {} targets", probs.len(), targets.len())));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| if t { fp.positive_cost(p) } else { fp.negative_cost(p) })
        .sum();
    Ok(sum / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPrediction {
    pub d: f64,
    /// Log-scale uncertainty.
    pub sigma: f64,
}

/// `sqrt(2) e^(-sigma) |d - gt| + sigma`
pub fn depth_uncertainty_loss(pred: &DepthPrediction, gt_depth: f64) -> f64 {
    SQRT_2 * (-pred.sigma).exp() * (pred.d - gt_depth).abs() + pred.sigma
}

/// Heading bin and in-bin residual of an angle. Bin `k` is centered on
/// `k * 2pi / 12`.
pub fn angle_to_bin(angle: f64) -> (usize, f64) {
    let per_bin = 2.0 * PI / HEADING_BINS as f64;
    let a = angle.rem_euclid(2.0 * PI);
    let shifted = (a + per_bin / 2.0).rem_euclid(2.0 * PI);
    let bin = ((shifted / per_bin) as usize).min(HEADING_BINS - 1);
    (bin, shifted - (bin as f64 * per_bin + per_bin / 2.0))
}

pub fn bin_to_angle(bin: usize, residual: f64) -> f64 {
    let per_bin = 2.0 * PI / HEADING_BINS as f64;
    let a = bin as f64 * per_bin + residual;
    if a > PI {
        a - 2.0 * PI
    } else {
        a
    }
}

/// Network outputs for one matched query. 2D quantities are in normalized
/// image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionPred {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub proj_center: [f64; 2],
    pub offset: [f64; 2],
    pub dims_hwl: [f64; 3],
    pub heading_logits: [f64; HEADING_BINS],
    pub heading_residuals: [f64; HEADING_BINS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub proj_center: [f64; 2],
    pub offset: [f64; 2],
    pub dims_hwl: [f64; 3],
    pub heading: f64,
}

fn l1<const N: usize>(a: &[f64; N], b: &[f64; N]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Cross-entropy over heading bins plus L1 on the residual of the target bin.
pub fn heading_loss(logits: &[f64; HEADING_BINS], residuals: &[f64; HEADING_BINS], heading: f64) -> f64 {
    let (bin, res) = angle_to_bin(heading);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    (lse - logits[bin]) + (residuals[bin] - res).abs()
}

/// `(reg_2d, reg_3d)` for one matched pair.
pub fn regression_losses(pred: &RegressionPred, gt: &RegressionTarget) -> (f64, f64) {
    let reg_2d = l1(&pred.center, &gt.center)
        + l1(&pred.size, &gt.size)
        + l1(&pred.proj_center, &gt.proj_center)
        + l1(&pred.offset, &gt.offset);
    let reg_3d = l1(&pred.dims_hwl, &gt.dims_hwl) + heading_loss(&pred.heading_logits, &pred.heading_residuals, gt.heading);
    (reg_2d, reg_3d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapLoss {
    pub value: f64,
    pub n_valid: usize,
}

/// Softmax focal loss of a `(h, w, bins)` logit map against bin targets,
/// averaged over valid pixels. No valid pixels gives 0 (logged).
pub fn depth_map_loss(pred_logits: &FeatureMap, target: &BinTargetMap, fp: &FocalParams) -> Result<MapLoss> {
    if (pred_logits.h, pred_logits.w) != (target.h, target.w) || target.targets.len() != target.h * target.w {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {}x{}",
            pred_logits.shape(),
            target.h,
            target.w
        )));
    }
    let mut sum = 0.0;
    let mut n_valid = 0;
    for (i, t) in target.targets.iter().enumerate() {
        let Some(k) = *t else { continue };
        if k >= pred_logits.c {
            return Err(Error::Domain(format!("target bin {k} of {}", pred_logits.c)));
        }
        let p = softmax(pred_logits.pixel(i / target.w, i % target.w));
        let pt = clamp_prob(p[k]);
        sum += -fp.alpha * (1.0 - pt).powf(fp.gamma) * pt.ln();
        n_valid += 1;
    }
    if n_valid == 0 {
        warn!("depth map loss: no valid pixels");
        return Ok(MapLoss { value: 0.0, n_valid });
    }
    Ok(MapLoss {
        value: sum / n_valid as f64,
        n_valid,
    })
}

/// Cross-entropy of a `(h, w, 96)` logit map against nearest-bin disparity,
/// averaged over valid pixels.
pub fn disparity_loss(pred_logits: &FeatureMap, gt_disp: &[f64], valid: &[bool]) -> Result<MapLoss> {
    let n = pred_logits.h * pred_logits.w;
    if gt_disp.len() != n || valid.len() != n {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} disparities and {} mask entries",
            pred_logits.shape(),
            gt_disp.len(),
            valid.len()
        )));
    }
    let bins = pred_logits.c;
    let mut sum = 0.0;
    let mut n_valid = 0;
    for i in 0..n {
        if !valid[i] {
            continue;
        }
        let d = gt_disp[i];
        if !(0.0..bins as f64).contains(&d) {
            return Err(Error::Domain(format!("disparity {d} outside [0, {bins})")));
        }
        let k = (d.round() as usize).min(bins - 1);
        let logits = pred_logits.pixel(i / pred_logits.w, i % pred_logits.w);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        sum += lse - logits[k];
        n_valid += 1;
    }
    if n_valid == 0 {
        return Ok(MapLoss { value: 0.0, n_valid });
    }
    Ok(MapLoss {
        value: sum / n_valid as f64,
        n_valid,
    })
}

/// Number of bins the disparity head classifies into.
pub const DISPARITY_BINS: usize = DISPARITY_HEAD_CHANNELS;

/// Raw loss sums: object terms summed over matched pairs, global terms as
/// per-map means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub reg_2d: f64,
    pub reg_3d: f64,
    pub depth_obj: f64,
    pub depth_map: f64,
    pub disp: f64,
}

/// Object terms are per-pair means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg_2d: f64,
    pub reg_3d: f64,
    pub depth_obj: f64,
    pub depth_map: f64,
    pub disp: f64,
    pub obj: f64,
    pub global: f64,
    pub total: f64,
}

pub fn total_loss(parts: &LossParts, n: usize) -> Result<LossBreakdown> {
    if n == 0 {
        return Err(Error::Domain("object loss normalizer must be at least 1".into()));
    }
    let n = n as f64;
    let (cls, reg_2d, reg_3d, depth_obj) = (parts.cls / n, parts.reg_2d / n, parts.reg_3d / n, parts.depth_obj / n);
    let obj = cls + reg_2d + reg_3d + depth_obj;
    let global = parts.depth_map + parts.disp;
    Ok(LossBreakdown {
        cls,
        reg_2d,
        reg_3d,
        depth_obj,
        depth_map: parts.depth_map,
        disp: parts.disp,
        obj,
        global,
        total: obj + global,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn focal_closed_forms() {
        let fp = FocalParams::default();
        let v = focal_loss(&[0.6], &[true], &fp).unwrap();
        assert!((v - 0.25 * 0.16 * -(0.6f64).ln()).abs() < 1e-15);
        assert!((v - 0.02043).abs() < 1e-5);
        let perfect = focal_loss(&[1.0, 0.0, 0.0], &[true, false, false], &fp).unwrap();
        assert!(perfect < 1e-7);
        let half = FocalParams::new(0.5, 0.0).unwrap();
        let (p, t) = ([0.2, 0.7, 0.9], [true, false, true]);
        let ce: f64 = p.iter().zip(t).map(|(&p, t): (&f64, bool)| if t { -p.ln() } else { -(1.0 - p).ln() }).sum::<f64>() / 3.0;
        assert!((focal_loss(&p, &t, &half).unwrap() - 0.5 * ce).abs() < 1e-14);
        assert!(focal_loss(&[0.5], &[], &fp).is_err());
    }

    #[test]
    fn uncertainty_closed_forms() {
        let l = |d, s, g| depth_uncertainty_loss(&DepthPrediction { d, sigma: s }, g);
        assert_eq!(l(10.0, 0.0, 10.0), 0.0);
        assert!((l(11.0, 0.0, 10.0) - SQRT_2).abs() < 1e-15);
        assert!((l(8.0, 1.0, 10.0) - 2.04053).abs() < 1e-5);
        assert!((l(8.0, 1.0, 10.0) - (2.0 * SQRT_2 / 1f64.exp() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn uncertainty_minimized_at_log_scaled_error() {
        for err in [0.3, 1.0, 4.0] {
            let star = (SQRT_2 * err).ln();
            let f = |s: f64| depth_uncertainty_loss(&DepthPrediction { d: err, sigma: s }, 0.0);
            let best = (-4000..4000).map(|i| i as f64 * 1e-3).min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
            assert!((best - star).abs() < 2e-3, "{best} vs {star}");
            assert!(f(star) >= star);
        }
    }

    #[test]
    fn heading_bins_round_trip() {
        for i in -50..50 {
            let a = i as f64 * 0.0731;
            let (bin, res) = angle_to_bin(a);
            assert!(bin < HEADING_BINS);
            assert!(res.abs() <= PI / 12.0 + 1e-12);
            let back = bin_to_angle(bin, res);
            let diff = (back - a).rem_euclid(2.0 * PI);
            assert!(diff < 1e-9 || (2.0 * PI - diff) < 1e-9);
        }
        assert_eq!(angle_to_bin(0.0), (0, 0.0));
        assert_eq!(angle_to_bin(PI / 2.0).0, 3);
    }

    fn sample_pair() -> (RegressionPred, RegressionTarget) {
        let gt = RegressionTarget {
            center: [0.4, 0.5],
            size: [0.1, 0.2],
            proj_center: [0.41, 0.52],
            offset: [-0.1, 0.05],
            dims_hwl: [1.5, 1.6, 3.9],
            heading: 0.3,
        };
        let (bin, res) = angle_to_bin(gt.heading);
        let mut logits = [0.0; HEADING_BINS];
        logits[bin] = 100.0;
        let mut residuals = [0.0; HEADING_BINS];
        residuals[bin] = res;
        let pred = RegressionPred {
            center: gt.center,
            size: gt.size,
            proj_center: gt.proj_center,
            offset: gt.offset,
            dims_hwl: gt.dims_hwl,
            heading_logits: logits,
            heading_residuals: residuals,
        };
        (pred, gt)
    }

    #[test]
    fn regression_zero_and_hand_sum() {
        let (mut pred, gt) = sample_pair();
        let (r2, r3) = regression_losses(&pred, &gt);
        assert_eq!(r2, 0.0);
        assert!(r3 < 1e-40);
        pred.center[0] += 0.01;
        pred.size[1] -= 0.02;
        pred.proj_center[1] += 0.03;
        pred.offset[0] -= 0.04;
        pred.dims_hwl[2] += 0.5;
        let (bin, res) = angle_to_bin(gt.heading);
        pred.heading_residuals[bin] = res + 0.07;
        let (r2, r3) = regression_losses(&pred, &gt);
        assert!((r2 - (0.01 + 0.02 + 0.03 + 0.04)).abs() < 1e-12);
        assert!((r3 - (0.5 + 0.07)).abs() < 1e-12);
    }

    #[test]
    fn heading_cross_entropy_uniform() {
        let v = heading_loss(&[0.0; HEADING_BINS], &[0.0; HEADING_BINS], 0.0);
        assert!((v - (HEADING_BINS as f64).ln()).abs() < 1e-12);
    }

    fn scalar_depth_map_oracle(logits: &FeatureMap, targets: &BinTargetMap, fp: &FocalParams) -> f64 {
        let mut acc = Vec::new();
        for y in 0..targets.h {
            for x in 0..targets.w {
                if let Some(k) = targets.targets[y * targets.w + x] {
                    let z: f64 = (0..logits.c).map(|c| logits.get(y, x, c).exp()).sum();
                    let p = logits.get(y, x, k).exp() / z;
                    acc.push(-fp.alpha * (1.0 - p).powf(fp.gamma) * p.ln());
                }
            }
        }
        acc.iter().sum::<f64>() / acc.len() as f64
    }

    #[test]
    fn depth_map_loss_cases() {
        let fp = FocalParams::default();
        let mut s = 7u64;
        let mut rnd = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        let logits = FeatureMap::from_fn(4, 4, 5, |_, _, _| rnd());
        let targets = BinTargetMap {
            h: 4,
            w: 4,
            targets: (0..16).map(|i| if i % 3 == 0 { None } else { Some(i % 5) }).collect(),
        };
        let got = depth_map_loss(&logits, &targets, &fp).unwrap();
        assert_eq!(got.n_valid, 10);
        assert!((got.value - scalar_depth_map_oracle(&logits, &targets, &fp)).abs() < 1e-12);

        let one_hot = crate::depth_label::one_hot_logits(&targets, 5, 100.0);
        assert!(depth_map_loss(&one_hot, &targets, &fp).unwrap().value < 1e-12);

        let empty = BinTargetMap { h: 4, w: 4, targets: vec![None; 16] };
        assert_eq!(depth_map_loss(&logits, &empty, &fp).unwrap(), MapLoss { value: 0.0, n_valid: 0 });
        let bad = BinTargetMap { h: 2, w: 8, targets: vec![None; 16] };
        assert!(depth_map_loss(&logits, &bad, &fp).is_err());
    }

    #[test]
    fn disparity_loss_cases() {
        let uniform = FeatureMap::zeros(3, 4, DISPARITY_BINS);
        let gt: Vec<f64> = (0..12).map(|i| i as f64 * 7.3).collect();
        let valid = vec![true; 12];
        let v = disparity_loss(&uniform, &gt, &valid).unwrap();
        assert!((v.value - 96f64.ln()).abs() < 1e-12);
        assert!((v.value - 4.5643).abs() < 1e-4);

        let correct = FeatureMap::from_fn(3, 4, DISPARITY_BINS, |y, x, c| {
            if c == gt[y * 4 + x].round() as usize { 100.0 } else { 0.0 }
        });
        assert!(disparity_loss(&correct, &gt, &valid).unwrap().value < 1e-30);

        let mut s = 3u64;
        let logits = FeatureMap::from_fn(2, 3, 6, |_, _, _| {
            s = s.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            (s >> 40) as f64 / (1u64 << 24) as f64
        });
        let gt: [f64; 6] = [0.2, 5.4, 2.5, 3.49, 1.0, 4.9];
        let valid = [true, true, false, true, true, false];
        let mut acc = 0.0;
        for i in [0, 1, 3, 4] {
            let (y, x) = (i / 3, i % 3);
            let z: f64 = (0..6).map(|c| logits.get(y, x, c).exp()).sum();
            acc += -(logits.get(y, x, gt[i].round() as usize).exp() / z).ln();
        }
        let got = disparity_loss(&logits, &gt, &valid).unwrap();
        assert!((got.value - acc / 4.0).abs() < 1e-12);
        assert!(disparity_loss(&logits, &[7.0; 6], &[true; 6]).is_err());
    }

    #[test]
    fn aggregation_closed_form() {
        let parts = LossParts {
            cls: 1.0,
            reg_2d: 2.0,
            reg_3d: 3.0,
            depth_obj: 0.0,
            depth_map: 4.0,
            disp: 5.0,
        };
        let b = total_loss(&parts, 2).unwrap();
        assert_eq!(b.obj, 3.0);
        assert_eq!(b.global, 9.0);
        assert_eq!(b.total, 12.0);
        assert_eq!(total_loss(&LossParts::default(), 1).unwrap().total, 0.0);
        assert!(total_loss(&parts, 0).is_err());
    }

    proptest! {
        #[test]
        fn focal_decreases_with_target_mass(p in 0.01f64..0.98, step in 0.001f64..0.01, t in any::<bool>()) {
            let fp = FocalParams::default();
            let q = p + step;
            let (a, b) = if t { (p, q) } else { (q, p) };
            prop_assert!(focal_loss(&[b], &[t], &fp).unwrap() <= focal_loss(&[a], &[t], &fp).unwrap());
        }

        #[test]
        fn depth_map_loss_decreases_with_target_logit(base in -3.0f64..3.0, bump in 0.01f64..2.0, k in 0usize..4) {
            let fp = FocalParams::default();
            let targets = BinTargetMap { h: 1, w: 1, targets: vec![Some(k)] };
            let map = |extra: f64| FeatureMap::from_fn(1, 1, 4, |_, _, c| if c == k { base + extra } else { 0.3 * c as f64 });
            let lo = depth_map_loss(&map(bump), &targets, &fp).unwrap().value;
            let hi = depth_map_loss(&map(0.0), &targets, &fp).unwrap().value;
            prop_assert!(lo <= hi);
        }

        #[test]
        fn total_is_linear(c in 0.0f64..5.0, r2 in 0.0f64..5.0, r3 in 0.0f64..5.0, d in 0.0f64..5.0, n in 1usize..10) {
            let parts = LossParts { cls: c, reg_2d: r2, reg_3d: r3, depth_obj: d, depth_map: 1.0, disp: 2.0 };
            let doubled = LossParts { cls: 2.0 * c, reg_2d: 2.0 * r2, reg_3d: 2.0 * r3, depth_obj: 2.0 * d, ..parts };
            let a = total_loss(&parts, n).unwrap();
            let b = total_loss(&doubled, n).unwrap();
            prop_assert!((b.obj - 2.0 * a.obj).abs() < 1e-12);
            prop_assert!((a.total - (a.obj + 3.0)).abs() < 1e-12);
        }

        #[test]
        fn l1_terms_are_homogeneous(e in prop::array::uniform4(-1.0f64..1.0)) {
            let (pred0, gt) = sample_pair();
            let shifted = |k: f64| {
                let mut p = pred0.clone();
                p.center[0] += k * e[0];
                p.size[1] += k * e[1];
                p.proj_center[0] += k * e[2];
                p.dims_hwl[1] += k * e[3];
                regression_losses(&p, &gt)
            };
            let (a2, a3) = shifted(1.0);
            let (b2, b3) = shifted(2.0);
            prop_assert!((b2 - 2.0 * a2).abs() < 1e-9);
            prop_assert!((b3 - 2.0 * a3).abs() < 1e-9);
        }
    }
}
