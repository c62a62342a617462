//! Binary classification metrics with theft (1) as the positive class.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{truth} labels for {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("value {value} at index {index} is not binary")]
    NonBinaryValue { index: usize, value: u8 },
    #[error("labels contain a single class")]
    SingleClassLabels,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The same counts with normal as the positive class.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

fn check_binary(v: &[u8]) -> Result<()> {
    match v.iter().position(|&x| x > 1) {
        Some(index) => Err(MetricsError::NonBinaryValue { index, value: v[index] }),
        None => Ok(()),
    }
}

pub fn confusion(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch {
            truth: y_true.len(),
            pred: y_pred.len(),
        });
    }
    check_binary(y_true)?;
    check_binary(y_pred)?;
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        match (t, p) {
            (1, 1) => cm.tp += 1,
            (0, 1) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            _ => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when any ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn class_metrics(cm: &ConfusionMatrix) -> ClassMetrics {
    let mut degenerate = false;
    let precision = ratio(cm.tp, cm.tp + cm.fp, &mut degenerate);
    let recall = ratio(cm.tp, cm.tp + cm.fn_, &mut degenerate);
    if precision + recall == 0.0 {
        degenerate = true;
    }
    let f1 = f1_score(precision, recall);
    ClassMetrics {
        precision,
        recall,
        f1,
        support: cm.tp + cm.fn_,
        degenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub normal: ClassMetrics,
    pub theft: ClassMetrics,
    pub accuracy: f64,
    pub total: u64,
}

pub fn classification_report(cm: &ConfusionMatrix) -> ClassificationReport {
    let mut degenerate = false;
    ClassificationReport {
        normal: class_metrics(&cm.swapped()),
        theft: class_metrics(cm),
        accuracy: ratio(cm.tp + cm.tn, cm.total(), &mut degenerate),
        total: cm.total(),
    }
}

fn check_scores(scores: &[f64], y: &[u8]) -> Result<usize> {
    if scores.len() != y.len() {
        return Err(MetricsError::LengthMismatch {
            truth: y.len(),
            pred: scores.len(),
        });
    }
    check_binary(y)?;
    let pos = y.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == y.len() {
        return Err(MetricsError::SingleClassLabels);
    }
    Ok(pos)
}

/// Mann–Whitney U over average ranks; ties count ½.
pub fn roc_auc(scores: &[f64], y: &[u8]) -> Result<f64> {
    let pos = check_scores(scores, y)?;
    let neg = y.len() - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps tied averages integral
    let mut rank2_sum: u128 = 0;
    let mut k = 0;
    while k < order.len() {
        let mut j = k;
        while j < order.len() && scores[order[j]] == scores[order[k]] {
            j += 1;
        }
        let avg2 = (k + 1 + j) as u128;
        let p_in_group = order[k..j].iter().filter(|&&i| y[i] == 1).count() as u128;
        rank2_sum += avg2 * p_in_group;
        k = j;
    }
    let u2 = rank2_sum - (pos as u128) * (pos as u128 + 1);
    Ok(u2 as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Threshold groups in descending score order: (threshold, tp, fp) after
/// including every record scoring at least the threshold.
fn cumulative(scores: &[f64], y: &[u8]) -> Vec<(f64, u64, u64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if y[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        out.push((s, tp, fp));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// `(fpr, tpr)` per unique threshold, preceded by the origin.
pub fn roc_curve(scores: &[f64], y: &[u8]) -> Result<Vec<CurvePoint>> {
    let pos = check_scores(scores, y)? as f64;
    let neg = y.len() as f64 - pos;
    let mut pts = vec![CurvePoint {
        threshold: f64::INFINITY,
        x: 0.0,
        y: 0.0,
    }];
    pts.extend(cumulative(scores, y).into_iter().map(|(t, tp, fp)| CurvePoint {
        threshold: t,
        x: fp as f64 / neg,
        y: tp as f64 / pos,
    }));
    Ok(pts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `x` = recall, `y` = precision; recall nondecreasing.
    pub points: Vec<CurvePoint>,
    pub auprc: f64,
}

/// One point per unique threshold; `AUPRC = Σ (R_k − R_{k−1})·P_k`.
pub fn pr_curve(scores: &[f64], y: &[u8]) -> Result<PrCurve> {
    let pos = check_scores(scores, y)? as f64;
    let mut points = Vec::new();
    let mut auprc = 0.0;
    let mut prev_recall = 0.0;
    for (t, tp, fp) in cumulative(scores, y) {
        let recall = tp as f64 / pos;
        let precision = tp as f64 / (tp + fp) as f64;
        auprc += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push(CurvePoint {
            threshold: t,
            x: recall,
            y: precision,
        });
    }
    Ok(PrCurve { points, auprc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub model: String,
    pub threshold: f64,
    pub confusion: ConfusionMatrix,
    pub report: ClassificationReport,
    /// `None` when the evaluated labels hold a single class.
    pub roc_auc: Option<f64>,
    pub auprc: Option<f64>,
    #[serde(skip)]
    pub roc: Vec<CurvePoint>,
    #[serde(skip)]
    pub pr: Vec<CurvePoint>,
}

/// Full evaluation of one model's scores, flagging `score >= threshold`.
pub fn evaluate(model: &str, scores: &[f64], y: &[u8], threshold: f64) -> Result<ReportBundle> {
    let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
    evaluate_predictions(model, scores, y, &pred, threshold)
}

pub fn evaluate_predictions(model: &str, scores: &[f64], y: &[u8], pred: &[u8], threshold: f64) -> Result<ReportBundle> {
    let cm = confusion(y, pred)?;
    let (roc_auc, auprc, roc, pr) = match (roc_auc(scores, y), pr_curve(scores, y), roc_curve(scores, y)) {
        (Ok(a), Ok(p), Ok(r)) => (Some(a), Some(p.auprc), r, p.points),
        (Err(MetricsError::SingleClassLabels), ..) => (None, None, Vec::new(), Vec::new()),
        (Err(e), ..) | (_, Err(e), _) | (.., Err(e)) => return Err(e),
    };
    Ok(ReportBundle {
        model: model.to_string(),
        threshold,
        confusion: cm,
        report: classification_report(&cm),
        roc_auc,
        auprc,
        roc,
        pr,
    })
}
