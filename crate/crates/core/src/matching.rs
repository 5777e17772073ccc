//! Prediction/ground-truth bipartite matching for set-based detection.

use serde::{Deserialize, Serialize};

use crate::geometry::{giou2d, Box2D};
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) || !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(Error::Domain(format!("focal params alpha={alpha} gamma={gamma}")));
        }
        Ok(Self { alpha, gamma })
    }

    /// `-alpha (1-p)^gamma ln p`
    pub fn positive_cost(&self, p: f64) -> f64 {
        let p = clamp_prob(p);
        -self.alpha * (1.0 - p).powf(self.gamma) * p.ln()
    }

    /// `-(1-alpha) p^gamma ln(1-p)`
    pub fn negative_cost(&self, p: f64) -> f64 {
        let p = clamp_prob(p);
        -(1.0 - self.alpha) * p.powf(self.gamma) * (1.0 - p).ln()
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Sign conventions of the classification and box costs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostConvention {
    /// Positive costs throughout; overlap enters as `1 - GIoU`.
    #[default]
    Standard,
    /// Formula as typeset: the negative branch keeps `+(1-alpha) p^gamma ln(1-p)`
    /// and overlap enters as `+GIoU`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub l1: f64,
    pub giou: f64,
    pub convention: CostConvention,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            convention: CostConvention::Standard,
        }
    }
}

/// Inputs of one image's matching problem. Boxes are in pixels and are
/// normalized by the image size for the L1 term.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchProblem {
    /// `n_pred x n_classes` per-class sigmoid probabilities.
    pub class_probs: Vec<Vec<f64>>,
    pub pred_boxes: Vec<Box2D>,
    pub gt_boxes: Vec<Box2D>,
    pub gt_classes: Vec<usize>,
    pub image_w: f64,
    pub image_h: f64,
}

impl MatchProblem {
    pub fn n_pred(&self) -> usize {
        self.pred_boxes.len()
    }

    pub fn n_gt(&self) -> usize {
        self.gt_boxes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let shape = |msg: String| Err(Error::Shape(msg));
        if self.class_probs.len() != self.n_pred() {
            return shape(format!("{} prob rows for {} predictions", self.class_probs.len(), self.n_pred()));
        }
        if self.gt_classes.len() != self.n_gt() {
            return shape(format!("{} gt classes for {} gt boxes", self.gt_classes.len(), self.n_gt()));
        }
        let k = self.class_probs.first().map_or(0, Vec::len);
        if self.class_probs.iter().any(|r| r.len() != k) {
            return shape("ragged class probabilities".into());
        }
        if let Some(&c) = self.gt_classes.iter().find(|&&c| c >= k) {
            return shape(format!("gt class {c} out of {k} classes"));
        }
        if !(self.image_w > 0.0 && self.image_h > 0.0) {
            return Err(Error::Domain("image size must be positive".into()));
        }
        Ok(())
    }
}

/// Classification cost of one prediction for a ground-truth class: the focal
/// positive branch on that class plus the negative branch on every other class.
pub fn class_cost(probs: &[f64], gt_class: usize, fp: &FocalParams, convention: CostConvention) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            if k == gt_class {
                fp.positive_cost(p)
            } else {
                match convention {
                    CostConvention::Standard => fp.negative_cost(p),
                    CostConvention::Literal => -fp.negative_cost(p),
                }
            }
        })
        .sum()
}

/// `n_pred x n_gt` matching costs.
pub fn match_cost_matrix(p: &MatchProblem, fp: &FocalParams, weights: &MatchWeights) -> Result<Vec<Vec<f64>>> {
    p.validate()?;
    let l1 = |a: &Box2D, b: &Box2D| -> f64 {
        let (a, b) = (a.normalized(p.image_w, p.image_h), b.normalized(p.image_w, p.image_h));
        a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
    };
    Ok(p.pred_boxes
        .iter()
        .zip(&p.class_probs)
        .map(|(pb, probs)| {
            p.gt_boxes
                .iter()
                .zip(&p.gt_classes)
                .map(|(gb, &gc)| {
                    let g = giou2d(pb, gb);
                    let overlap = match weights.convention {
                        CostConvention::Standard => 1.0 - g,
                        CostConvention::Literal => g,
                    };
                    class_cost(probs, gc, fp, weights.convention) + weights.l1 * l1(pb, gb) + weights.giou * overlap
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(pred, gt)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn gt_for_pred(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| p.1)
    }
}

/// Rows are assigned to distinct columns, `rows <= cols`. Returns the column
/// of every row. Shortest augmenting path with potentials, `O(rows^2 cols)`.
fn solve_rows(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let (n, m) = (rows.len(), cols.len());
    debug_assert!(n <= m);
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost[rows[i - 1]][cols[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = cols[j - 1];
        }
    }
    let total = (0..n).map(|i| cost[rows[i]][col_of[i]]).sum();
    (total, col_of)
}

/// Minimum-cost assignment of every ground truth (column) to a distinct
/// prediction (row). Among optimal assignments the lexicographically
/// smallest is returned, reading the assignment as the per-prediction
/// sequence of gt indices with "unmatched" ordered last.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if m > n {
        return Err(Error::Shape(format!("{m} ground truths exceed {n} predictions")));
    }
    for (i, row) in cost.iter().enumerate() {
        if let Some(j) = row.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite { row: i, col: j });
        }
    }
    if m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    // Transposed view: gts are the rows of the solver.
    let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
    let all_gts: Vec<usize> = (0..m).collect();
    let all_preds: Vec<usize> = (0..n).collect();
    let (optimum, _) = solve_rows(&t, &all_gts, &all_preds);
    let tol = 1e-9 * (1.0 + optimum.abs());

    // Fix predictions one at a time to the smallest choice that keeps the
    // remaining problem optimal.
    let mut free_gts = all_gts;
    let mut fixed_cost = 0.0;
    let mut pairs = Vec::with_capacity(m);
    for i in 0..n {
        if free_gts.is_empty() {
            break;
        }
        let later: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for (slot, &g) in free_gts.iter().enumerate() {
            let rest: Vec<usize> = free_gts.iter().copied().filter(|&x| x != g).collect();
            if rest.len() > later.len() {
                continue;
            }
            let (sub, _) = solve_rows(&t, &rest, &later);
            if fixed_cost + cost[i][g] + sub <= optimum + tol {
                chosen = Some(slot);
                break;
            }
        }
        match chosen {
            Some(slot) => {
                let g = free_gts.remove(slot);
                fixed_cost += cost[i][g];
                pairs.push((i, g));
            }
            None => {
                // leaving prediction i unmatched must be optimal
                debug_assert!(free_gts.len() <= later.len());
            }
        }
    }
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok(Assignment { pairs, total_cost })
}
