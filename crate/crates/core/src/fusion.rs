//! Weighted score fusion and F1-maximizing threshold calibration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("fusion weights sum to {0}, expected 1")]
    WeightSumViolation(f64),
    #[error("fusion weight `{0}` is negative")]
    NegativeWeight(&'static str),
    #[error("score `{name}` = {value} lies outside [0, 1]")]
    ScoreOutOfRange { name: &'static str, value: f64 },
    #[error("calibration labels contain a single class")]
    SingleClassLabels,
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
}

pub type Result<T> = std::result::Result<T, FusionError>;

pub const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.4,
            gamma: 0.2,
        }
    }
}

impl FusionWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) {
                return Err(FusionError::NegativeWeight(name));
            }
        }
        let sum = self.alpha + self.beta + self.gamma;
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(FusionError::WeightSumViolation(sum));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTriple {
    pub p_gnn: f64,
    pub p_rf: f64,
    pub s_norm: f64,
    pub key: (String, usize),
}

impl ScoreTriple {
    pub fn new(p_gnn: f64, p_rf: f64, s_norm: f64, key: (String, usize)) -> Result<Self> {
        for (name, value) in [("p_gnn", p_gnn), ("p_rf", p_rf), ("s_norm", s_norm)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(FusionError::ScoreOutOfRange { name, value });
            }
        }
        Ok(Self { p_gnn, p_rf, s_norm, key })
    }
}

/// `α·P_GNN + β·P_RF + γ·S_norm`.
pub fn hybrid_score(t: &ScoreTriple, w: &FusionWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.alpha * t.p_gnn + w.beta * t.p_rf + w.gamma * t.s_norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedThreshold {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Scans every unique score plus {0, 1}, predicting positive when
/// `score >= τ`. Equal F1 resolves to the larger τ.
pub fn calibrate_threshold(scores: &[f64], labels: &[u8]) -> Result<CalibratedThreshold> {
    if scores.len() != labels.len() {
        return Err(FusionError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(FusionError::SingleClassLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let eval = |tau: f64, tp: usize, fp: usize| {
        let fn_ = positives - tp;
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        CalibratedThreshold {
            tau,
            precision: if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 },
            recall: tp as f64 / positives as f64,
            f1,
        }
    };

    // τ = 1 first when no score reaches it, so it wins ties
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<CalibratedThreshold> = None;
    let mut consider = |c: CalibratedThreshold| {
        if best.is_none_or(|b| c.f1 > b.f1) {
            best = Some(c);
        }
    };
    if scores.iter().all(|&s| s < 1.0) {
        consider(eval(1.0, 0, 0));
    }
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        consider(eval(s, tp, fp));
    }
    if scores.iter().all(|&s| s > 0.0) {
        consider(eval(0.0, tp, fp));
    }
    Ok(best.expect("at least one candidate"))
}

/// 1 iff `score >= τ`.
pub fn apply_flag(scores: &[f64], t: &CalibratedThreshold) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= t.tau)).collect()
}
