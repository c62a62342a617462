//! Two-layer graph convolutional classifier.
//!
//! ```text
//! H¹ = dropout(ReLU(Â·X·W⁰ + b⁰))
//! out = log_softmax(Â·H¹·W¹ + b¹)
//! ```
//!
//! Trained full-graph with Adam on a class-weighted NLL over the train mask.
//! Test nodes take part in propagation but never in the loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{Artifact, ArtifactError};
use crate::graph::{NormalizedAdjacency, TemporalGraph};
use crate::matrix::Matrix;
use crate::optim::{Adam, AdamConfig};

pub const CLASSES: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum GcnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in layer {0}")]
    NonFiniteActivation(usize),
    #[error("loss mask selects no nodes")]
    EmptyMask,
    #[error("training mask contains a single class")]
    SingleClassTrainSet,
    #[error("training loss diverged at epoch {0}")]
    DivergedLoss(usize),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, GcnError>;

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    /// `F × hidden`
    pub w0: Matrix,
    pub b0: Vec<f64>,
    /// `hidden × 2`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// When false, biases stay at zero and receive no updates.
    pub use_bias: bool,
}

impl GcnParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(in_dim: usize, hidden: usize, use_bias: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
            )
        };
        let w0 = glorot(in_dim, hidden);
        let w1 = glorot(hidden, CLASSES);
        Self {
            w0,
            b0: vec![0.0; hidden],
            w1,
            b1: vec![0.0; CLASSES],
            use_bias,
        }
    }

    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        Self {
            w0: Matrix::zeros(in_dim, hidden),
            b0: vec![0.0; hidden],
            w1: Matrix::zeros(hidden, CLASSES),
            b1: vec![0.0; CLASSES],
            use_bias: true,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w0.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w0.cols()
    }

    fn check(&self, a: &NormalizedAdjacency, x: &Matrix) -> Result<()> {
        if x.rows() != a.n() {
            return Err(GcnError::ShapeMismatch(format!(
                "{} feature rows for {} nodes",
                x.rows(),
                a.n()
            )));
        }
        if x.cols() != self.in_dim() {
            return Err(GcnError::ShapeMismatch(format!(
                "{} features, model expects {}",
                x.cols(),
                self.in_dim()
            )));
        }
        if self.w1.rows() != self.hidden() || self.w1.cols() != CLASSES || self.b0.len() != self.hidden() {
            return Err(GcnError::ShapeMismatch("inconsistent parameter shapes".into()));
        }
        Ok(())
    }

    pub fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new(
            "gcn",
            serde_json::json!({
                "in_dim": self.in_dim(),
                "hidden": self.hidden(),
                "classes": CLASSES,
                "use_bias": self.use_bias,
            }),
        );
        a.push("w0", &[self.in_dim(), self.hidden()], self.w0.as_slice().to_vec());
        a.push("b0", &[self.hidden()], self.b0.clone());
        a.push("w1", &[self.hidden(), CLASSES], self.w1.as_slice().to_vec());
        a.push("b1", &[CLASSES], self.b1.clone());
        a
    }

    pub fn from_artifact(a: &Artifact) -> std::result::Result<Self, ArtifactError> {
        a.expect_kind("gcn")?;
        let shaped = |name: &str, want: &[usize]| -> std::result::Result<Vec<f64>, ArtifactError> {
            let (s, d) = a.tensor(name)?;
            if s != want {
                return Err(ArtifactError::BadShape(name.to_string()));
            }
            Ok(d.to_vec())
        };
        let f = a.meta["in_dim"].as_u64().unwrap_or(0) as usize;
        let h = a.meta["hidden"].as_u64().unwrap_or(0) as usize;
        Ok(Self {
            w0: Matrix::from_vec(f, h, shaped("w0", &[f, h])?),
            b0: shaped("b0", &[h])?,
            w1: Matrix::from_vec(h, CLASSES, shaped("w1", &[h, CLASSES])?),
            b1: shaped("b1", &[CLASSES])?,
            use_bias: a.meta["use_bias"].as_bool().unwrap_or(true),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Dropout active with its mask drawn from `seed`.
    Train { dropout: f64, seed: u64 },
    Eval,
}

/// Inverted-dropout multipliers (0 or `1/(1−p)`), one per hidden activation.
pub fn dropout_mask(len: usize, p: f64, seed: u64) -> Vec<f64> {
    if p <= 0.0 {
        return vec![1.0; len];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

fn log_softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for r in 0..z.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

struct ForwardCache {
    ax: Matrix,
    z0: Matrix,
    h1: Matrix,
    logp: Matrix,
}

fn forward_with(
    a: &NormalizedAdjacency,
    ax: Matrix,
    p: &GcnParams,
    mask: Option<&[f64]>,
) -> Result<ForwardCache> {
    let mut z0 = ax.matmul(&p.w0);
    if p.use_bias {
        z0.add_row_vector(&p.b0);
    }
    if !z0.is_finite() {
        return Err(GcnError::NonFiniteActivation(1));
    }
    let mut h1 = z0.clone();
    for (i, v) in h1.as_mut_slice().iter_mut().enumerate() {
        *v = v.max(0.0) * mask.map_or(1.0, |m| m[i]);
    }
    let mut z1 = a.matmul(&h1.matmul(&p.w1));
    if p.use_bias {
        z1.add_row_vector(&p.b1);
    }
    if !z1.is_finite() {
        return Err(GcnError::NonFiniteActivation(2));
    }
    let logp = log_softmax_rows(&z1);
    Ok(ForwardCache { ax, z0, h1, logp })
}

/// Log-probabilities `N × 2`.
pub fn gcn_forward(a: &NormalizedAdjacency, x: &Matrix, p: &GcnParams, mode: Mode) -> Result<Matrix> {
    p.check(a, x)?;
    let mask = match mode {
        Mode::Train { dropout, seed } => Some(dropout_mask(a.n() * p.hidden(), dropout, seed)),
        Mode::Eval => None,
    };
    Ok(forward_with(a, a.matmul(x), p, mask.as_deref())?.logp)
}

/// Weighted mean `Σ w_{y_i}·(−logp[i][y_i]) / Σ w_{y_i}` over masked nodes.
pub fn weighted_nll(logp: &Matrix, y: &[u8], weights: [f64; 2], mask: &[bool]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..logp.rows() {
        if !mask[i] {
            continue;
        }
        let c = y[i] as usize;
        num += weights[c] * -logp.get(i, c);
        den += weights[c];
    }
    if den == 0.0 {
        return Err(GcnError::EmptyMask);
    }
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnGradients {
    pub w0: Matrix,
    pub b0: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
}

/// Loss and analytic gradients. `dropout` is an optional multiplier mask
/// from [`dropout_mask`]. `ax` may carry a precomputed `Â·X`.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_gradients(
    a: &NormalizedAdjacency,
    x: &Matrix,
    ax: Option<&Matrix>,
    p: &GcnParams,
    y: &[u8],
    weights: [f64; 2],
    mask: &[bool],
    dropout: Option<&[f64]>,
) -> Result<(f64, GcnGradients)> {
    p.check(a, x)?;
    let ax = ax.cloned().unwrap_or_else(|| a.matmul(x));
    let cache = forward_with(a, ax, p, dropout)?;
    let loss = weighted_nll(&cache.logp, y, weights, mask)?;
    let den: f64 = (0..y.len()).filter(|&i| mask[i]).map(|i| weights[y[i] as usize]).sum();

    let n = a.n();
    let mut dz1 = Matrix::zeros(n, CLASSES);
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let c = y[i] as usize;
        let s = weights[c] / den;
        for k in 0..CLASSES {
            let prob = cache.logp.get(i, k).exp();
            let onehot = if k == c { 1.0 } else { 0.0 };
            dz1.set(i, k, s * (prob - onehot));
        }
    }
    let b1 = if p.use_bias { dz1.column_sums() } else { vec![0.0; CLASSES] };
    let g = a.matmul(&dz1);
    let w1 = cache.h1.t_matmul(&g);
    let mut dz0 = g.matmul_t(&p.w1);
    for (i, v) in dz0.as_mut_slice().iter_mut().enumerate() {
        let active = cache.z0.as_slice()[i] > 0.0;
        *v *= if active { dropout.map_or(1.0, |m| m[i]) } else { 0.0 };
    }
    let b0 = if p.use_bias { dz0.column_sums() } else { vec![0.0; p.hidden()] };
    let w0 = cache.ax.t_matmul(&dz0);
    Ok((loss, GcnGradients { w0, b0, w1, b1 }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcnTrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub dropout: f64,
    /// `[normal, theft]`; defaults to inverse class frequency on the train mask.
    pub class_weights: Option<[f64; 2]>,
    pub use_bias: bool,
}

impl Default for GcnTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            lr: 0.01,
            weight_decay: 5e-4,
            epochs: 60,
            dropout: 0.2,
            class_weights: None,
            use_bias: true,
        }
    }
}

impl GcnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(GcnError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GcnError::InvalidConfig(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.epochs == 0 || self.hidden == 0 {
            return Err(GcnError::InvalidConfig("epochs and hidden must be at least 1".into()));
        }
        Ok(())
    }
}

/// `w_c = n / (2·n_c)` over the masked nodes.
pub fn inverse_frequency_weights(y: &[u8], mask: &[bool]) -> Result<[f64; 2]> {
    let mut counts = [0usize; 2];
    for (i, &l) in y.iter().enumerate() {
        if mask[i] {
            counts[l as usize] += 1;
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(GcnError::SingleClassTrainSet);
    }
    let n = (counts[0] + counts[1]) as f64;
    Ok([n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)])
}

#[derive(Debug, Clone)]
pub struct TrainedGcn {
    pub params: GcnParams,
    /// Train-mask loss at each epoch, before that epoch's update.
    pub loss_history: Vec<f64>,
    pub class_weights: [f64; 2],
    pub optimizer_steps: u64,
}

pub fn train_gcn(g: &TemporalGraph, a: &NormalizedAdjacency, cfg: &GcnTrainConfig, seed: u64) -> Result<TrainedGcn> {
    cfg.validate()?;
    let weights = inverse_frequency_weights(&g.y, &g.train_mask)?;
    let weights = cfg.class_weights.unwrap_or(weights);
    let x = &g.x.values;
    let ax = a.matmul(x);
    let mut params = GcnParams::init(x.cols(), cfg.hidden, cfg.use_bias, seed);
    let sizes = [params.w0.as_slice().len(), params.b0.len(), params.w1.as_slice().len(), params.b1.len()];
    let mut opt = Adam::new(
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::with_lr(cfg.lr)
        },
        &sizes,
    );
    let decay = [true, false, true, false];
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mask = dropout_mask(a.n() * cfg.hidden, cfg.dropout, seed.wrapping_add(1 + epoch as u64));
        let (loss, grads) = loss_and_gradients(a, x, Some(&ax), &params, &g.y, weights, &g.train_mask, Some(&mask))?;
        if !loss.is_finite() {
            return Err(GcnError::DivergedLoss(epoch + 1));
        }
        history.push(loss);
        let GcnParams { w0, b0, w1, b1, .. } = &mut params;
        let mut ps: [&mut [f64]; 4] = [w0.as_mut_slice(), b0, w1.as_mut_slice(), b1];
        opt.step(
            &mut ps,
            &[grads.w0.as_slice(), &grads.b0, grads.w1.as_slice(), &grads.b1],
            &decay,
        );
    }
    Ok(TrainedGcn {
        params,
        loss_history: history,
        class_weights: weights,
        optimizer_steps: opt.steps(),
    })
}

/// Theft-class probability per node, eval mode.
pub fn gcn_predict_proba(g: &TemporalGraph, a: &NormalizedAdjacency, p: &GcnParams) -> Result<Vec<f64>> {
    let logp = gcn_forward(a, &g.x.values, p, Mode::Eval)?;
    Ok((0..logp.rows()).map(|i| logp.get(i, 1).exp()).collect())
}
