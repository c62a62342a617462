//! LSTM autoencoder for temporal anomaly scoring.
//!
//! The encoder LSTM reads a `T × d` window; its final hidden state is mapped
//! linearly to a latent vector `z`. The decoder LSTM receives `z` at every
//! step and a linear head projects each decoder hidden state back to `d`
//! channels. The anomaly score of a window is
//! `S = (1/T) Σ_t ‖x_t − x̂_t‖²`.
//!
//! Gradients are computed by hand-written backpropagation through time.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{Artifact, ArtifactError};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Error, PartialEq)]
pub enum LstmError {
    #[error("series of length {len} is shorter than the window {window}")]
    SeriesTooShort { len: usize, window: usize },
    #[error("window length must be at least 2 and stride at least 1")]
    InvalidWindow,
    #[error("no training windows")]
    EmptyTrainingSet,
    #[error("training loss diverged at epoch {0}")]
    DivergedLoss(usize),
    #[error("window shape {found:?} does not match the model's {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("score range is degenerate (min = max = {0})")]
    DegenerateRange(f64),
    #[error("window contains non-finite values")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, LstmError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceWindow {
    /// Row-major `steps × dim`.
    pub values: Vec<f64>,
    pub steps: usize,
    pub dim: usize,
    /// `(state, t of the last step)`.
    pub origin: (String, usize),
}

impl SequenceWindow {
    pub fn new(values: Vec<f64>, steps: usize, dim: usize, origin: (String, usize)) -> Result<Self> {
        if steps < 2 || values.len() != steps * dim {
            return Err(LstmError::InvalidWindow);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LstmError::NonFinite);
        }
        Ok(Self {
            values,
            steps,
            dim,
            origin,
        })
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }
}

/// Sliding windows over one state's series (`series[k]` is the channel
/// vector at time `k`). Window `j` covers `[j·stride, j·stride + T)`.
pub fn make_windows(
    state: &str,
    series: &[Vec<f64>],
    window: usize,
    stride: usize,
) -> Result<Vec<SequenceWindow>> {
    if window < 2 || stride == 0 {
        return Err(LstmError::InvalidWindow);
    }
    if series.len() < window {
        return Err(LstmError::SeriesTooShort {
            len: series.len(),
            window,
        });
    }
    let dim = series[0].len();
    let count = (series.len() - window) / stride + 1;
    (0..count)
        .map(|j| {
            let start = j * stride;
            let values: Vec<f64> = series[start..start + window].iter().flatten().copied().collect();
            SequenceWindow::new(values, window, dim, (state.to_string(), start + window - 1))
        })
        .collect()
}

/// `(1/T) Σ_t ‖x_t − x̂_t‖²` over row-major `T × dim` buffers.
pub fn reconstruction_mse(x: &[f64], x_hat: &[f64], dim: usize) -> f64 {
    assert_eq!(x.len(), x_hat.len());
    let steps = x.len() / dim.max(1);
    let sq: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum();
    sq / steps as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub latent: usize,
    pub window: usize,
}

pub const TENSOR_NAMES: [&str; 10] = [
    "enc_w", "enc_u", "enc_b", "lat_w", "lat_b", "dec_w", "dec_u", "dec_b", "out_w", "out_b",
];
const ENC_W: usize = 0;
const ENC_U: usize = 1;
const ENC_B: usize = 2;
const LAT_W: usize = 3;
const LAT_B: usize = 4;
const DEC_W: usize = 5;
const DEC_U: usize = 6;
const DEC_B: usize = 7;
const OUT_W: usize = 8;
const OUT_B: usize = 9;

impl LstmShape {
    /// `(rows, cols)` of each tensor, in [`TENSOR_NAMES`] order.
    pub fn tensor_shapes(&self) -> [(usize, usize); 10] {
        let (d, h, l) = (self.input_dim, self.hidden, self.latent);
        [
            (4 * h, d),
            (4 * h, h),
            (4 * h, 1),
            (l, h),
            (l, 1),
            (4 * h, l),
            (4 * h, h),
            (4 * h, 1),
            (d, h),
            (d, 1),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmAeParams {
    pub shape: LstmShape,
    /// Parameter tensors in [`TENSOR_NAMES`] order. LSTM gate blocks are
    /// stacked input, forget, cell, output.
    pub tensors: Vec<Vec<f64>>,
    /// Min and max training-window score from the final training pass.
    pub score_range: Option<(f64, f64)>,
    pub seed: u64,
}

impl LstmAeParams {
    /// Uniform `±1/√h` initialization from `seed`.
    pub fn init(shape: LstmShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (shape.hidden as f64).sqrt();
        let tensors = shape
            .tensor_shapes()
            .iter()
            .map(|(r, c)| (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect())
            .collect();
        Self {
            shape,
            tensors,
            score_range: None,
            seed,
        }
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new(
            "lstm_autoencoder",
            serde_json::json!({
                "shape": self.shape,
                "seed": self.seed,
                "score_min": self.score_range.map(|r| r.0),
                "score_max": self.score_range.map(|r| r.1),
            }),
        );
        for ((name, (r, c)), t) in TENSOR_NAMES
            .iter()
            .zip(self.shape.tensor_shapes())
            .zip(&self.tensors)
        {
            a.push(name, &[r, c], t.clone());
        }
        a
    }

    pub fn from_artifact(a: &Artifact) -> std::result::Result<Self, ArtifactError> {
        a.expect_kind("lstm_autoencoder")?;
        let shape: LstmShape = serde_json::from_value(a.meta["shape"].clone())?;
        let seed = a.meta["seed"].as_u64().unwrap_or(0);
        let score_range = match (a.meta["score_min"].as_f64(), a.meta["score_max"].as_f64()) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            _ => None,
        };
        let mut tensors = Vec::new();
        for (name, (r, c)) in TENSOR_NAMES.iter().zip(shape.tensor_shapes()) {
            let (s, d) = a.tensor(name)?;
            if s != [r, c] {
                return Err(ArtifactError::BadShape(name.to_string()));
            }
            tensors.push(d.to_vec());
        }
        Ok(Self {
            shape,
            tensors,
            score_range,
            seed,
        })
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out = W·x + U·h + b` for gate pre-activations (`W` is `4h × in`).
#[inline]
fn gate_preact(w: &[f64], u: &[f64], b: &[f64], x: &[f64], h: &[f64], out: &mut [f64]) {
    let nin = x.len();
    let nh = h.len();
    for (r, o) in out.iter_mut().enumerate() {
        let wr = &w[r * nin..(r + 1) * nin];
        let ur = &u[r * nh..(r + 1) * nh];
        let mut acc = b[r];
        for (a, v) in wr.iter().zip(x) {
            acc += a * v;
        }
        for (a, v) in ur.iter().zip(h) {
            acc += a * v;
        }
        *o = acc;
    }
}

/// Per-step activations kept for backpropagation. Each buffer holds `T`
/// consecutive length-`h` blocks.
struct LstmTrace {
    gates: Vec<f64>,
    cells: Vec<f64>,
    hidden: Vec<f64>,
}

fn lstm_forward(
    w: &[f64],
    u: &[f64],
    b: &[f64],
    hidden: usize,
    steps: usize,
    input: impl Fn(usize) -> Vec<f64>,
) -> LstmTrace {
    let h = hidden;
    let mut gates = vec![0.0; steps * 4 * h];
    let mut cells = vec![0.0; steps * h];
    let mut hs = vec![0.0; steps * h];
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut pre = vec![0.0; 4 * h];
    for t in 0..steps {
        let x = input(t);
        gate_preact(w, u, b, &x, &h_prev, &mut pre);
        let g = &mut gates[t * 4 * h..(t + 1) * 4 * h];
        for k in 0..h {
            let ig = sigmoid(pre[k]);
            let fg = sigmoid(pre[h + k]);
            let cg = pre[2 * h + k].tanh();
            let og = sigmoid(pre[3 * h + k]);
            g[k] = ig;
            g[h + k] = fg;
            g[2 * h + k] = cg;
            g[3 * h + k] = og;
            let c = fg * c_prev[k] + ig * cg;
            cells[t * h + k] = c;
            hs[t * h + k] = og * c.tanh();
        }
        c_prev.copy_from_slice(&cells[t * h..(t + 1) * h]);
        h_prev.copy_from_slice(&hs[t * h..(t + 1) * h]);
    }
    LstmTrace {
        gates,
        cells,
        hidden: hs,
    }
}

/// BPTT through one LSTM layer. `dh_out[t]` is the loss gradient arriving at
/// hidden state `t` from outside the recurrence. Accumulates into the weight
/// gradients and returns `∂L/∂x_t` summed over steps when `sum_inputs`, else
/// per step.
#[allow(clippy::too_many_arguments)]
fn lstm_backward(
    trace: &LstmTrace,
    w: &[f64],
    u: &[f64],
    hidden: usize,
    steps: usize,
    input: &dyn Fn(usize) -> Vec<f64>,
    dh_out: &[f64],
    gw: &mut [f64],
    gu: &mut [f64],
    gb: &mut [f64],
    dx: &mut [f64],
    sum_inputs: bool,
) {
    let h = hidden;
    let nin = w.len() / (4 * h);
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut da = vec![0.0; 4 * h];
    let zeros = vec![0.0; h];
    for t in (0..steps).rev() {
        let g = &trace.gates[t * 4 * h..(t + 1) * 4 * h];
        let c = &trace.cells[t * h..(t + 1) * h];
        let c_prev = if t > 0 {
            &trace.cells[(t - 1) * h..t * h]
        } else {
            &zeros[..]
        };
        let h_prev = if t > 0 {
            &trace.hidden[(t - 1) * h..t * h]
        } else {
            &zeros[..]
        };
        for k in 0..h {
            let dh = dh_out[t * h + k] + dh_next[k];
            let (ig, fg, cg, og) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
            let tc = c[k].tanh();
            let dc = dc_next[k] + dh * og * (1.0 - tc * tc);
            da[k] = dc * cg * ig * (1.0 - ig);
            da[h + k] = dc * c_prev[k] * fg * (1.0 - fg);
            da[2 * h + k] = dc * ig * (1.0 - cg * cg);
            da[3 * h + k] = dh * tc * og * (1.0 - og);
            dc_next[k] = dc * fg;
        }
        let x = input(t);
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        let dx_t = if sum_inputs {
            &mut dx[..nin]
        } else {
            &mut dx[t * nin..(t + 1) * nin]
        };
        for (r, &d) in da.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[r] += d;
            let gwr = &mut gw[r * nin..(r + 1) * nin];
            let wr = &w[r * nin..(r + 1) * nin];
            for i in 0..nin {
                gwr[i] += d * x[i];
                dx_t[i] += d * wr[i];
            }
            let gur = &mut gu[r * h..(r + 1) * h];
            let ur = &u[r * h..(r + 1) * h];
            for i in 0..h {
                gur[i] += d * h_prev[i];
                dh_next[i] += d * ur[i];
            }
        }
    }
}

struct Forward {
    enc: LstmTrace,
    z: Vec<f64>,
    dec: LstmTrace,
    output: Vec<f64>,
}

fn forward(p: &LstmAeParams, x: &[f64]) -> Forward {
    let s = p.shape;
    let (d, h, l, steps) = (s.input_dim, s.hidden, s.latent, x.len() / s.input_dim);
    let t = &p.tensors;
    let enc = lstm_forward(&t[ENC_W], &t[ENC_U], &t[ENC_B], h, steps, |k| {
        x[k * d..(k + 1) * d].to_vec()
    });
    let h_last = &enc.hidden[(steps - 1) * h..steps * h];
    let z: Vec<f64> = (0..l)
        .map(|r| {
            t[LAT_B][r]
                + t[LAT_W][r * h..(r + 1) * h]
                    .iter()
                    .zip(h_last)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect();
    let dec = lstm_forward(&t[DEC_W], &t[DEC_U], &t[DEC_B], h, steps, |_| z.clone());
    let mut output = vec![0.0; steps * d];
    for k in 0..steps {
        let hk = &dec.hidden[k * h..(k + 1) * h];
        for r in 0..d {
            output[k * d + r] = t[OUT_B][r]
                + t[OUT_W][r * h..(r + 1) * h]
                    .iter()
                    .zip(hk)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
        }
    }
    Forward { enc, z, dec, output }
}

/// Adds `scale · ∂S/∂θ` for one window to `grads` and returns `S`.
fn accumulate_gradients(p: &LstmAeParams, x: &[f64], scale: f64, grads: &mut [Vec<f64>]) -> f64 {
    let s = p.shape;
    let (d, h, l, steps) = (s.input_dim, s.hidden, s.latent, x.len() / s.input_dim);
    let t = &p.tensors;
    let f = forward(p, x);
    let loss = reconstruction_mse(x, &f.output, d);

    let mut dh_dec = vec![0.0; steps * h];
    for k in 0..steps {
        let hk = &f.dec.hidden[k * h..(k + 1) * h];
        for r in 0..d {
            let dy = scale * 2.0 * (f.output[k * d + r] - x[k * d + r]) / steps as f64;
            grads[OUT_B][r] += dy;
            let row = &t[OUT_W][r * h..(r + 1) * h];
            let grow = &mut grads[OUT_W][r * h..(r + 1) * h];
            for i in 0..h {
                grow[i] += dy * hk[i];
                dh_dec[k * h + i] += dy * row[i];
            }
        }
    }

    let mut dz = vec![0.0; l];
    let z = f.z.clone();
    {
        let (left, right) = grads.split_at_mut(DEC_U);
        let gw = &mut left[DEC_W];
        let (gu, rest) = right.split_at_mut(1);
        lstm_backward(
            &f.dec,
            &t[DEC_W],
            &t[DEC_U],
            h,
            steps,
            &|_| z.clone(),
            &dh_dec,
            gw,
            &mut gu[0],
            &mut rest[0],
            &mut dz,
            true,
        );
    }

    let h_last = &f.enc.hidden[(steps - 1) * h..steps * h];
    let mut dh_enc = vec![0.0; steps * h];
    for r in 0..l {
        grads[LAT_B][r] += dz[r];
        let row = &t[LAT_W][r * h..(r + 1) * h];
        let grow = &mut grads[LAT_W][r * h..(r + 1) * h];
        for i in 0..h {
            grow[i] += dz[r] * h_last[i];
            dh_enc[(steps - 1) * h + i] += dz[r] * row[i];
        }
    }

    let mut dx = vec![0.0; steps * d];
    {
        let (left, right) = grads.split_at_mut(ENC_U);
        let gw = &mut left[ENC_W];
        let (gu, rest) = right.split_at_mut(1);
        lstm_backward(
            &f.enc,
            &t[ENC_W],
            &t[ENC_U],
            h,
            steps,
            &|k| x[k * d..(k + 1) * d].to_vec(),
            &dh_enc,
            gw,
            &mut gu[0],
            &mut rest[0],
            &mut dx,
            false,
        );
    }
    loss
}

fn check_window(p: &LstmAeParams, w: &SequenceWindow) -> Result<()> {
    let expected = (p.shape.window, p.shape.input_dim);
    if (w.steps, w.dim) != expected {
        return Err(LstmError::ShapeMismatch {
            expected,
            found: (w.steps, w.dim),
        });
    }
    Ok(())
}

/// Mean window loss and its gradient with respect to every tensor.
pub fn loss_and_gradients(p: &LstmAeParams, windows: &[SequenceWindow]) -> Result<(f64, Vec<Vec<f64>>)> {
    if windows.is_empty() {
        return Err(LstmError::EmptyTrainingSet);
    }
    let mut grads = p.zeros_like();
    let scale = 1.0 / windows.len() as f64;
    let mut loss = 0.0;
    for w in windows {
        check_window(p, w)?;
        loss += accumulate_gradients(p, &w.values, scale, &mut grads);
    }
    Ok((loss * scale, grads))
}

pub fn reconstruct(p: &LstmAeParams, w: &SequenceWindow) -> Result<Vec<f64>> {
    check_window(p, w)?;
    Ok(forward(p, &w.values).output)
}

pub fn anomaly_score(p: &LstmAeParams, w: &SequenceWindow) -> Result<f64> {
    check_window(p, w)?;
    Ok(reconstruction_mse(&w.values, &forward(p, &w.values).output, w.dim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmAeConfig {
    pub window: usize,
    pub hidden: usize,
    pub latent: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Windows per Adam step; 0 means one full-batch step per epoch.
    pub batch_size: usize,
    pub early_stop_tol: f64,
    /// Spacing between training windows.
    pub train_stride: usize,
    /// Upper bound on training windows, taken evenly spaced; 0 = no bound.
    pub max_train_windows: usize,
    /// Training-score quantile used as the standalone detection threshold.
    pub threshold_quantile: f64,
}

impl Default for LstmAeConfig {
    fn default() -> Self {
        Self {
            window: 24,
            hidden: 32,
            latent: 8,
            epochs: 100,
            lr: 1e-3,
            batch_size: 0,
            early_stop_tol: 1e-6,
            train_stride: 1,
            max_train_windows: 0,
            threshold_quantile: 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAutoencoder {
    pub params: LstmAeParams,
    /// Mean training loss per epoch (average over that epoch's batches).
    pub loss_history: Vec<f64>,
    /// Score of every training window after the final update.
    pub training_scores: Vec<f64>,
    pub optimizer_steps: u64,
}

pub fn train_autoencoder(windows: &[SequenceWindow], cfg: &LstmAeConfig, seed: u64) -> Result<TrainedAutoencoder> {
    if windows.is_empty() {
        return Err(LstmError::EmptyTrainingSet);
    }
    let shape = LstmShape {
        input_dim: windows[0].dim,
        hidden: cfg.hidden,
        latent: cfg.latent,
        window: windows[0].steps,
    };
    let mut params = LstmAeParams::init(shape, seed);
    for w in windows {
        check_window(&params, w)?;
    }
    let sizes: Vec<usize> = params.tensors.iter().map(Vec::len).collect();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_ba7c);
    let batch = if cfg.batch_size == 0 {
        windows.len()
    } else {
        cfg.batch_size.min(windows.len())
    };
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let decay = [false; 10];

    for epoch in 0..cfg.epochs {
        if batch < windows.len() {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = params.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            let mut loss = 0.0;
            for &i in chunk {
                loss += accumulate_gradients(&params, &windows[i].values, scale, &mut grads);
            }
            if !loss.is_finite() {
                return Err(LstmError::DivergedLoss(epoch + 1));
            }
            epoch_loss += loss;
            let mut ps: Vec<&mut [f64]> = params.tensors.iter_mut().map(Vec::as_mut_slice).collect();
            let gs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            opt.step(&mut ps, &gs, &decay);
        }
        let mean = epoch_loss / windows.len() as f64;
        if !mean.is_finite() || !params.is_finite() {
            return Err(LstmError::DivergedLoss(epoch + 1));
        }
        let improvement = history.last().map(|&prev: &f64| prev - mean);
        history.push(mean);
        if let Some(delta) = improvement {
            if delta < cfg.early_stop_tol {
                break;
            }
        }
    }

    let training_scores: Vec<f64> = windows
        .iter()
        .map(|w| reconstruction_mse(&w.values, &forward(&params, &w.values).output, w.dim))
        .collect();
    let lo = training_scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = training_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    params.score_range = Some((lo, hi));
    Ok(TrainedAutoencoder {
        params,
        loss_history: history,
        training_scores,
        optimizer_steps: opt.steps(),
    })
}

/// `(s − min)/(max − min)` clipped to `[0, 1]`.
pub fn normalize_scores(scores: &[f64], min: f64, max: f64) -> Result<Vec<f64>> {
    if !(max > min) {
        return Err(LstmError::DegenerateRange(min));
    }
    Ok(scores
        .iter()
        .map(|s| ((s - min) / (max - min)).clamp(0.0, 1.0))
        .collect())
}

/// Flag = 1 iff score > threshold.
pub fn classify_by_threshold(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s > threshold)).collect()
}
