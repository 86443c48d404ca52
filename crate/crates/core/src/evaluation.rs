//! Patch-level accuracy/precision/recall/F1, pixel-level IoU and threshold
//! sweeps. Ratios with a zero denominator are `None` rather than 0 or 1.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ScoreMap;
use crate::models::{Model, ModelKind};
use crate::patching::{extract_patch, PatchGrid};
use crate::raster::{Mask, Raster};

/// Probability cut for the patch classifier.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions, {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fn_ += 1,
            _ => return Err(Error::invalid(format!("labels must be 0/1, got ({p}, {t})"))),
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn f1_score(precision: f64, recall: f64) -> Option<f64> {
    let s = precision + recall;
    (s > 0.0).then(|| 2.0 * precision * recall / s)
}

pub fn prf(c: &ConfusionCounts) -> Result<Prf> {
    let total = c.total();
    if total == 0 {
        return Err(Error::Empty("no evaluated samples".into()));
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) => f1_score(p, r),
        _ => None,
    };
    Ok(Prf {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        precision,
        recall,
        f1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Iou {
    /// Mean over classes present in prediction or truth.
    pub mean: Option<f64>,
    /// IoU of class 0 and class 1; `None` for a class absent from both.
    pub per_class: [Option<f64>; 2],
}

impl Iou {
    pub fn foreground(&self) -> Option<f64> {
        self.per_class[1]
    }
}

/// IoU over label slices of equal length.
pub fn iou_labels(pred: &[u8], truth: &[u8]) -> Result<Iou> {
    let c = confusion(pred, truth)?;
    Ok(iou_from_confusion(&c))
}

fn iou_from_confusion(c: &ConfusionCounts) -> Iou {
    let fg = ratio(c.tp, c.tp + c.fp + c.fn_);
    let bg = ratio(c.tn, c.tn + c.fp + c.fn_);
    let present: Vec<f64> = [bg, fg].into_iter().flatten().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Iou {
        mean,
        per_class: [bg, fg],
    }
}

pub fn mean_iou(pred: &Mask, truth: &Mask) -> Result<Iou> {
    truth.check_dims(pred.width(), pred.height())?;
    iou_labels(pred.data(), truth.data())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub mean_iou: Option<f64>,
    pub foreground_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub points: Vec<SweepPoint>,
    /// Smallest cutoff attaining the best mean IoU.
    pub best_threshold: f64,
    pub best_mean_iou: f64,
    /// Smallest cutoff attaining the best foreground IoU (if ever defined).
    pub best_foreground_threshold: Option<f64>,
    pub best_foreground_iou: Option<f64>,
}

/// Mean IoU at `steps` evenly spaced cutoffs in `[0, 1]`.
pub fn sweep_threshold(sm: &ScoreMap, truth: &Mask, steps: usize) -> Result<Sweep> {
    truth.check_dims(sm.width(), sm.height())?;
    sweep_pairs(sm.values(), truth.data(), steps)
}

/// As [`sweep_threshold`], restricted to pixels where `region` is 1.
pub fn sweep_threshold_region(sm: &ScoreMap, truth: &Mask, region: &Mask, steps: usize) -> Result<Sweep> {
    truth.check_dims(sm.width(), sm.height())?;
    region.check_dims(sm.width(), sm.height())?;
    let (scores, labels): (Vec<f32>, Vec<u8>) = sm
        .values()
        .iter()
        .zip(truth.data())
        .zip(region.data())
        .filter(|(_, &r)| r == 1)
        .map(|((&s, &t), _)| (s, t))
        .unzip();
    if scores.is_empty() {
        return Err(Error::Empty("evaluation region is empty".into()));
    }
    sweep_pairs(&scores, &labels, steps)
}

pub fn sweep_pairs(scores: &[f32], truth: &[u8], steps: usize) -> Result<Sweep> {
    if steps < 2 {
        return Err(Error::invalid("threshold sweep needs at least 2 steps"));
    }
    if scores.len() != truth.len() {
        return Err(Error::shape("score and label counts differ"));
    }
    let points: Vec<SweepPoint> = (0..steps)
        .into_par_iter()
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            let mut c = ConfusionCounts::default();
            for (&s, &y) in scores.iter().zip(truth) {
                match (s >= t as f32, y == 1) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, false) => c.tn += 1,
                    (false, true) => c.fn_ += 1,
                }
            }
            let iou = iou_from_confusion(&c);
            SweepPoint {
                threshold: t,
                mean_iou: iou.mean,
                foreground_iou: iou.foreground(),
            }
        })
        .collect();
    let mut best = (0.0, f64::NEG_INFINITY);
    let mut best_fg: Option<(f64, f64)> = None;
    for p in &points {
        if let Some(m) = p.mean_iou {
            if m > best.1 {
                best = (p.threshold, m);
            }
        }
        if let Some(f) = p.foreground_iou {
            if best_fg.is_none_or(|(_, b)| f > b) {
                best_fg = Some((p.threshold, f));
            }
        }
    }
    if !best.1.is_finite() {
        return Err(Error::Empty("no pixels to evaluate".into()));
    }
    Ok(Sweep {
        points,
        best_threshold: best.0,
        best_mean_iou: best.1,
        best_foreground_threshold: best_fg.map(|b| b.0),
        best_foreground_iou: best_fg.map(|b| b.1),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    Patch,
    Pixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: EvalKind,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub mean_iou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub threshold: f64,
    pub population: usize,
    pub confusion: ConfusionCounts,
}

impl EvalReport {
    pub fn from_labels(kind: EvalKind, pred: &[u8], truth: &[u8], threshold: f64) -> Result<Self> {
        let c = confusion(pred, truth)?;
        let m = prf(&c)?;
        let iou = iou_from_confusion(&c);
        Ok(Self {
            kind,
            accuracy: Some(m.accuracy),
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            mean_iou: iou.mean,
            per_class_iou: iou.per_class.to_vec(),
            threshold,
            population: c.total(),
            confusion: c,
        })
    }

    /// Plain-text table; patch reports follow the accuracy/F1/precision/
    /// recall layout, pixel reports the mean-IoU layout.
    pub fn render_table(&self, label: &str) -> String {
        let f = |v: Option<f64>, digits: usize| v.map_or("n/a".to_string(), |x| format!("{x:.digits$}"));
        let (headers, cells): (Vec<&str>, Vec<String>) = match self.kind {
            EvalKind::Patch => (
                vec!["network (dataset)", "Accuracy (%)", "F1 Score", "Precision", "Recall"],
                vec![
                    label.to_string(),
                    f(self.accuracy.map(|a| a * 100.0), 1),
                    f(self.f1, 3),
                    f(self.precision, 3),
                    f(self.recall, 3),
                ],
            ),
            EvalKind::Pixel => (
                vec!["Method", "Mean IOU", "IOU bg", "IOU fg", "Threshold"],
                vec![
                    label.to_string(),
                    f(self.mean_iou, 4),
                    f(self.per_class_iou.first().copied().flatten(), 4),
                    f(self.per_class_iou.get(1).copied().flatten(), 4),
                    format!("{:.3}", self.threshold),
                ],
            ),
        };
        let widths: Vec<usize> = headers.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
        let mut out = String::new();
        let row = |out: &mut String, items: &[String]| {
            let parts: Vec<String> = items
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, &w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join(" | ").trim_end());
        };
        row(&mut out, &headers.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        let _ = writeln!(out, "{}", widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
        row(&mut out, &cells);
        let _ = writeln!(out, "population: {}", self.population);
        out
    }
}

/// Probability of each listed cell, in list order.
pub fn patch_probabilities(model: &Model, r: &Raster, grid: &PatchGrid, cells: &[usize]) -> Result<Vec<f64>> {
    if model.kind() != ModelKind::PatchClassifier {
        return Err(Error::invalid("expected a patch classifier"));
    }
    cells
        .par_iter()
        .map(|&i| Ok(model.forward(&extract_patch(r, grid, i)?)?.item() as f64))
        .collect()
}

/// Cuts test-cell probabilities at 0.5 and scores them against `labels`
/// (indexed by grid cell).
pub fn evaluate_patch_classifier(
    model: &Model,
    r: &Raster,
    grid: &PatchGrid,
    test: &[usize],
    labels: &[u8],
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test split is empty".into()));
    }
    if labels.len() != grid.len() {
        return Err(Error::shape(format!("{} labels for {} cells", labels.len(), grid.len())));
    }
    let probs = patch_probabilities(model, r, grid, test)?;
    let pred: Vec<u8> = probs.iter().map(|&p| (p >= DECISION_THRESHOLD) as u8).collect();
    let truth: Vec<u8> = test.iter().map(|&i| labels[i]).collect();
    EvalReport::from_labels(EvalKind::Patch, &pred, &truth, DECISION_THRESHOLD)
}

/// Pixel metrics of a score map cut at `t`.
pub fn evaluate_score_map(sm: &ScoreMap, truth: &Mask, t: f64) -> Result<EvalReport> {
    let pred = crate::inference::threshold(sm, t)?;
    truth.check_dims(pred.width(), pred.height())?;
    EvalReport::from_labels(EvalKind::Pixel, pred.data(), truth.data(), t)
}
