//! Scoring for both tasks: confusion-count change metrics with the change
//! class as positive, and endpoint-error statistics for dense flow. Counts
//! add across samples, so split-level scores aggregate micro-style.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DenseFlow;

/// Pixel counts over the valid region. Change is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    #[serde(rename = "tp")]
    pub true_positive: u64,
    #[serde(rename = "fp")]
    pub false_positive: u64,
    #[serde(rename = "fn")]
    pub false_negative: u64,
    #[serde(rename = "tn")]
    pub true_negative: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.false_negative + self.true_negative
    }

    /// Micro-aggregation is plain addition of counts.
    pub fn add(&mut self, other: &ConfusionCounts) {
        self.true_positive += other.true_positive;
        self.false_positive += other.false_positive;
        self.false_negative += other.false_negative;
        self.true_negative += other.true_negative;
    }
}

pub fn confusion(
    pred: &Array2<bool>,
    gt: &Array2<bool>,
    valid: &Array2<bool>,
) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() || pred.dim() != valid.dim() {
        return Err(Error::validation(format!(
            "confusion shapes disagree: pred {:?}, gt {:?}, valid {:?}",
            pred.dim(),
            gt.dim(),
            valid.dim()
        )));
    }
    let mut c = ConfusionCounts::default();
    for ((p, g), &ok) in pred.iter().zip(gt.iter()).zip(valid.iter()) {
        if !ok {
            continue;
        }
        match (p, g) {
            (true, true) => c.true_positive += 1,
            (true, false) => c.false_positive += 1,
            (false, true) => c.false_negative += 1,
            (false, false) => c.true_negative += 1,
        }
    }
    Ok(c)
}

/// Precision, recall, F1 and IoU for one class, with every 0/0 mapped to 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_scores(tp: u64, fp: u64, fn_: u64) -> ClassScores {
    ClassScores {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        iou: ratio(tp, tp + fp + fn_),
    }
}

/// All change-detection rates derived from one confusion matrix.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChangeScores {
    pub oa: f64,
    pub change: ClassScores,
    pub nochange: ClassScores,
    pub mf1: f64,
    pub miou: f64,
}

pub fn change_metrics(c: &ConfusionCounts) -> ChangeScores {
    let change = class_scores(c.true_positive, c.false_positive, c.false_negative);
    // For the no-change class the roles of positive and negative swap.
    let nochange = class_scores(c.true_negative, c.false_negative, c.false_positive);
    ChangeScores {
        oa: ratio(c.true_positive + c.true_negative, c.total()),
        change,
        nochange,
        mf1: 0.5 * (change.f1 + nochange.f1),
        miou: 0.5 * (change.iou + nochange.iou),
    }
}

/// Endpoint-error statistics over the intersected validity region.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpeStats {
    pub mean: f64,
    pub below_1px: f64,
    pub below_3px: f64,
    /// Share of pixels that entered the statistics.
    pub valid_fraction: f64,
}

pub fn flow_epe(pred: &DenseFlow, gt: &DenseFlow) -> Result<EpeStats> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::validation(format!(
            "flow grids disagree: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut sum = 0.0;
    let mut below1 = 0u64;
    let mut below3 = 0u64;
    let mut count = 0u64;
    for ((y, x), &ok) in gt.valid.indexed_iter() {
        if !ok || !pred.valid[(y, x)] {
            continue;
        }
        let du = pred.u[(y, x)] - gt.u[(y, x)];
        let dv = pred.v[(y, x)] - gt.v[(y, x)];
        let e = (du * du + dv * dv).sqrt();
        sum += e;
        if e < 1.0 {
            below1 += 1;
        }
        if e < 3.0 {
            below3 += 1;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::validation(
            "no pixel is valid in both flows; endpoint error is undefined",
        ));
    }
    Ok(EpeStats {
        mean: sum / count as f64,
        below_1px: below1 as f64 / count as f64,
        below_3px: below3 as f64 / count as f64,
        valid_fraction: count as f64 / (gt.height() * gt.width()) as f64,
    })
}

pub const REPORT_VERSION: &str = "changeflow-report/1";

/// Split-level evaluation summary written as JSON next to the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub config_hash: String,
    /// Counts are summed over the split before rates are derived.
    pub aggregation: String,
    pub samples: usize,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub oa: f64,
    pub f1_change: f64,
    pub f1_nochange: f64,
    pub mf1: f64,
    pub iou_change: f64,
    pub iou_nochange: f64,
    pub miou: f64,
    pub epe_mean: f64,
    pub epe_below_1px: f64,
    pub epe_below_3px: f64,
    pub epe_valid_fraction: f64,
}

impl MetricsReport {
    pub fn new(
        config_hash: &str,
        samples: usize,
        threshold: f64,
        counts: ConfusionCounts,
        epe: EpeStats,
    ) -> MetricsReport {
        let s = change_metrics(&counts);
        MetricsReport {
            version: REPORT_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            aggregation: "micro".to_string(),
            samples,
            threshold,
            counts,
            oa: s.oa,
            f1_change: s.change.f1,
            f1_nochange: s.nochange.f1,
            mf1: s.mf1,
            iou_change: s.change.iou,
            iou_nochange: s.nochange.iou,
            miou: s.miou,
            epe_mean: epe.mean,
            epe_below_1px: epe.below_1px,
            epe_below_3px: epe.below_3px,
            epe_valid_fraction: epe.valid_fraction,
        }
    }
}
