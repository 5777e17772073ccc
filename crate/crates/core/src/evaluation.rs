//! KITTI-protocol average precision at 40 recall positions.
//!
//! Detections are matched per frame in descending score order. Ground truths
//! outside the evaluated difficulty, or of a neighbouring class (Van for
//! Car, Person_sitting for Pedestrian), are ignored: a detection that lands
//! on one is neither a true nor a false positive. The same holds for
//! detections inside DontCare regions and detections shorter than the
//! difficulty's minimum box height.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou2d, iou_3d, iou_bev, Box2D, Box3D};
use crate::kitti_io::{classify_difficulty, read_label_file, Difficulty, ObjectLabel};
use crate::{Error, Result};

/// Recall positions used for interpolation.
pub const RECALL_POSITIONS: usize = 40;

pub const DEFAULT_CLASSES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "3d")]
    Box3D,
    #[serde(rename = "bev")]
    Bev,
    #[serde(rename = "2d")]
    Box2D,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Box3D, Metric::Bev, Metric::Box2D];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Box3D => "AP_3D",
            Metric::Bev => "AP_BEV",
            Metric::Box2D => "AP_2D",
        }
    }

    pub fn overlap(self, det: &Detection, gt: &GtEntry) -> f64 {
        match self {
            Metric::Box3D => iou_3d(&det.box3d, &gt.box3d),
            Metric::Bev => iou_bev(&det.box3d, &gt.box3d),
            Metric::Box2D => iou2d(&det.box2d, &gt.box2d),
        }
    }
}

/// Overlap a detection must exceed to count, per class.
pub fn iou_threshold(class_name: &str, car_threshold: f64) -> f64 {
    if class_name == "Car" {
        car_threshold
    } else {
        0.5
    }
}

/// Ground-truth class whose objects are ignored rather than penalized when
/// evaluating `class_name`.
pub fn neighbour_class(class_name: &str) -> Option<&'static str> {
    match class_name {
        "Car" => Some("Van"),
        "Pedestrian" => Some("Person_sitting"),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_name: String,
    pub box2d: Box2D,
    pub box3d: Box3D,
    pub score: f64,
}

impl Detection {
    /// A missing score (plain ground-truth files used as predictions) is 1.
    pub fn from_label(label: &ObjectLabel) -> Self {
        Self {
            class_name: label.class_name.clone(),
            box2d: label.box2d,
            box3d: Box3D::from_label(label),
            score: label.score.unwrap_or(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtEntry {
    pub box2d: Box2D,
    pub box3d: Box3D,
    pub ignored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetOutcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    /// Outcome of every detection, in input order.
    pub outcomes: Vec<DetOutcome>,
    /// Detection matched to each ground truth.
    pub gt_match: Vec<Option<usize>>,
}

/// Greedy matching of one frame. `min_height` applies to unmatched
/// detections only.
pub fn match_frame(
    dets: &[Detection],
    gts: &[GtEntry],
    dont_care: &[Box2D],
    overlap: impl Fn(&Detection, &GtEntry) -> f64,
    threshold: f64,
    min_height: f64,
) -> FrameMatch {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut outcomes = vec![DetOutcome::FalsePositive; dets.len()];
    let mut gt_match = vec![None; gts.len()];
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (g, gt) in gts.iter().enumerate() {
            let ov = overlap(det, gt);
            if !(ov > threshold) {
                continue;
            }
            if gt.ignored {
                hits_ignored = true;
            } else if gt_match[g].is_none() && best.map_or(true, |(_, b)| ov > b) {
                best = Some((g, ov));
            }
        }
        outcomes[d] = if let Some((g, _)) = best {
            gt_match[g] = Some(d);
            DetOutcome::TruePositive
        } else if hits_ignored || in_dont_care(&det.box2d, dont_care, threshold) || det.box2d.height() < min_height {
            DetOutcome::Ignored
        } else {
            DetOutcome::FalsePositive
        };
    }
    FrameMatch { outcomes, gt_match }
}

/// Fraction of the detection's own area inside a DontCare box.
fn in_dont_care(b: &Box2D, dont_care: &[Box2D], threshold: f64) -> bool {
    let area = b.area();
    area > 0.0 && dont_care.iter().any(|dc| b.intersection_area(dc) / area > threshold)
}

/// Scored outcomes and the number of evaluated ground truths for one cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellStats {
    /// `(score, is_true_positive)`.
    pub scored: Vec<(f64, bool)>,
    pub n_gt: usize,
}

impl CellStats {
    pub fn merge(&mut self, other: CellStats) {
        self.scored.extend(other.scored);
        self.n_gt += other.n_gt;
    }

    pub fn tp(&self) -> usize {
        self.scored.iter().filter(|s| s.1).count()
    }

    pub fn fp(&self) -> usize {
        self.scored.len() - self.tp()
    }
}

/// `(true positives, detections kept)` at every distinct score threshold,
/// highest first.
pub fn pr_curve(scored: &[(f64, bool)]) -> Vec<(usize, usize)> {
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0, 0);
    for (i, &(score, hit)) in sorted.iter().enumerate() {
        tp += hit as usize;
        seen += 1;
        if sorted.get(i + 1).map_or(true, |next| next.0 != score) {
            out.push((tp, seen));
        }
    }
    out
}

/// AP in percent: mean over recall positions `k/40` of the best precision
/// reached at recall `>= k/40`. `None` when there are no ground truths.
pub fn ap_r40(scored: &[(f64, bool)], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let curve = pr_curve(scored);
    let mut total = 0.0;
    for k in 1..=RECALL_POSITIONS {
        // recall tp / n_gt >= k / 40, compared exactly
        let best = curve
            .iter()
            .filter(|(tp, _)| tp * RECALL_POSITIONS >= k * n_gt)
            .map(|&(tp, seen)| tp as f64 / seen as f64)
            .fold(0.0, f64::max);
        total += best;
    }
    Some(100.0 * total / RECALL_POSITIONS as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub classes: Vec<String>,
    pub metrics: Vec<Metric>,
    /// 0.7 by default; 0.5 for the looser car variant.
    pub car_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            metrics: Metric::ALL.to_vec(),
            car_threshold: 0.7,
        }
    }
}

/// One frame's ground truth and predictions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalFrame {
    pub id: String,
    pub gt: Vec<ObjectLabel>,
    pub pred: Vec<ObjectLabel>,
}

fn frame_cell(frame: &EvalFrame, class: &str, difficulty: Difficulty, metric: Metric, threshold: f64) -> CellStats {
    let neighbour = neighbour_class(class);
    let gts: Vec<GtEntry> = frame
        .gt
        .iter()
        .filter(|l| l.class_name == class || Some(l.class_name.as_str()) == neighbour)
        .map(|l| GtEntry {
            box2d: l.box2d,
            box3d: Box3D::from_label(l),
            ignored: l.class_name != class || !difficulty.admits(classify_difficulty(l)),
        })
        .collect();
    let dont_care: Vec<Box2D> = frame.gt.iter().filter(|l| l.is_dont_care()).map(|l| l.box2d).collect();
    let dets: Vec<Detection> = frame
        .pred
        .iter()
        .filter(|l| l.class_name == class)
        .map(Detection::from_label)
        .collect();
    let m = match_frame(&dets, &gts, &dont_care, |d, g| metric.overlap(d, g), threshold, difficulty.min_height());
    CellStats {
        scored: dets
            .iter()
            .zip(&m.outcomes)
            .filter(|(_, o)| **o != DetOutcome::Ignored)
            .map(|(d, o)| (d.score, *o == DetOutcome::TruePositive))
            .collect(),
        n_gt: gts.iter().filter(|g| !g.ignored).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApCell {
    pub class: String,
    pub difficulty: Difficulty,
    pub metric: Metric,
    pub threshold: f64,
    /// `None` when the cell has no ground truth.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub cells: Vec<ApCell>,
}

impl ApResult {
    pub fn get(&self, class: &str, difficulty: Difficulty, metric: Metric) -> Option<&ApCell> {
        self.cells
            .iter()
            .find(|c| c.class == class && c.difficulty == difficulty && c.metric == metric)
    }

    pub fn ap(&self, class: &str, difficulty: Difficulty, metric: Metric) -> Option<f64> {
        self.get(class, difficulty, metric).and_then(|c| c.ap)
    }

    /// Aligned text table: one row per class and metric, columns
    /// Easy / Moderate / Hard.
    pub fn to_table(&self) -> String {
        let mut rows: BTreeMap<(String, Metric), [Option<f64>; 3]> = BTreeMap::new();
        let mut order = Vec::new();
        for c in &self.cells {
            let key = (c.class.clone(), c.metric);
            if !rows.contains_key(&key) {
                order.push(key.clone());
            }
            let slot = Difficulty::EVALUATED.iter().position(|d| *d == c.difficulty).unwrap_or(0);
            rows.entry(key).or_insert([None; 3])[slot] = c.ap;
        }
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:<8} {:>8} {:>8} {:>8}", "class", "metric", "Easy", "Mod", "Hard");
        for key in order {
            let vals = rows[&key];
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                out,
                "{:<12} {:<8} {:>8} {:>8} {:>8}",
                key.0,
                key.1.name(),
                fmt(vals[0]),
                fmt(vals[1]),
                fmt(vals[2])
            );
        }
        out
    }
}

/// AP for every class x difficulty x metric. Frames are matched in parallel;
/// the result does not depend on frame order.
pub fn evaluate_frames(frames: &[EvalFrame], config: &EvalConfig) -> ApResult {
    let mut cells = Vec::new();
    for class in &config.classes {
        let threshold = iou_threshold(class, config.car_threshold);
        for &metric in &config.metrics {
            for difficulty in Difficulty::EVALUATED {
                let stats = frames
                    .par_iter()
                    .map(|f| frame_cell(f, class, difficulty, metric, threshold))
                    .reduce(CellStats::default, |mut a, b| {
                        a.merge(b);
                        a
                    });
                let tp = stats.tp();
                cells.push(ApCell {
                    class: class.clone(),
                    difficulty,
                    metric,
                    threshold,
                    ap: ap_r40(&stats.scored, stats.n_gt),
                    n_gt: stats.n_gt,
                    tp,
                    fp: stats.fp(),
                    fn_: stats.n_gt - tp,
                });
            }
        }
    }
    ApResult { cells }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub result: ApResult,
    pub frames: usize,
    /// Prediction files without a ground-truth counterpart; skipped.
    pub unmatched_predictions: Vec<String>,
}

fn label_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn label_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.txt"))
}

/// Loads every ground-truth frame of `gt_dir` and its prediction file from
/// `pred_dir`. A missing prediction file counts as no detections.
pub fn load_frames(pred_dir: &Path, gt_dir: &Path) -> Result<(Vec<EvalFrame>, Vec<String>)> {
    let gt_ids = label_ids(gt_dir)?;
    let pred_ids = label_ids(pred_dir)?;
    let unmatched: Vec<String> = pred_ids.iter().filter(|id| gt_ids.binary_search(id).is_err()).cloned().collect();
    let frames = gt_ids
        .par_iter()
        .map(|id| {
            let gt = read_label_file(&label_path(gt_dir, id))?;
            let pred_path = label_path(pred_dir, id);
            let pred = if pred_path.exists() {
                read_label_file(&pred_path)?
            } else {
                Vec::new()
            };
            Ok(EvalFrame { id: id.clone(), gt, pred })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((frames, unmatched))
}

pub fn evaluate_benchmark(pred_dir: &Path, gt_dir: &Path, config: &EvalConfig) -> Result<BenchmarkReport> {
    let (frames, unmatched_predictions) = load_frames(pred_dir, gt_dir)?;
    Ok(BenchmarkReport {
        result: evaluate_frames(&frames, config),
        frames: frames.len(),
        unmatched_predictions,
    })
}
