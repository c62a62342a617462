//! Engineered features: rolling aggregates, the expected-load model, the grid
//! imbalance index, a voltage-drop proxy, standard scaling and column
//! alignment.

use std::collections::HashMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingestion::Dataset;
use crate::matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("series is empty")]
    EmptySeries,
    #[error("window must be at least 1")]
    ZeroWindow,
    #[error("expected-load coefficients are not fitted{0}")]
    UnfittedCoefficients(String),
    #[error("load must be non-negative, got {0}")]
    NegativeLoad(f64),
    #[error("feature names do not match: expected {expected:?}, found {found:?}")]
    NameMismatch {
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("feature matrix has no rows")]
    EmptyMatrix,
    #[error("row count {found} does not match the {expected} records")]
    RowCountMismatch { expected: usize, found: usize },
    #[error("duplicate feature name `{0}`")]
    DuplicateName(String),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

pub const DEFAULT_EPSILON: f64 = 1e-5;

pub mod names {
    pub const RESIDENTIAL: &str = "residential";
    pub const COMMERCIAL: &str = "commercial";
    pub const INDUSTRIAL: &str = "industrial";
    pub const TOTAL: &str = "total";
    pub const TEMPERATURE: &str = "temperature";
    pub const ROLLING_MEAN: &str = "rolling_mean_total";
    pub const ROLLING_STD: &str = "rolling_std_total";
    pub const MOVING_AVG: &str = "moving_avg_prior";
    pub const EXPECTED_LOAD: &str = "expected_load";
    pub const TEMP_ADJUSTED: &str = "temperature_adjusted_total";
    pub const IMBALANCE: &str = "grid_imbalance_index";
    pub const VOLTAGE_DROP: &str = "voltage_drop_proxy";
    pub const TS_SCORE: &str = "ts_anomaly_score";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub values: Matrix,
    pub row_keys: Vec<(String, usize)>,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>, values: Matrix, row_keys: Vec<(String, usize)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(FeatureError::DuplicateName(n.clone()));
            }
        }
        if names.len() != values.cols() {
            return Err(FeatureError::NameMismatch {
                expected: names.clone(),
                found: vec![format!("<{} columns>", values.cols())],
            });
        }
        if row_keys.len() != values.rows() {
            return Err(FeatureError::RowCountMismatch {
                expected: values.rows(),
                found: row_keys.len(),
            });
        }
        Ok(Self {
            names,
            values,
            row_keys,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.rows()
    }

    pub fn n_features(&self) -> usize {
        self.values.cols()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        self.column_index(name).map(|c| self.values.column(c))
    }

    /// Returns a copy with `values` appended as a new last column.
    pub fn with_column(&self, name: &str, values: &[f64]) -> Result<Self> {
        if values.len() != self.n_rows() {
            return Err(FeatureError::RowCountMismatch {
                expected: self.n_rows(),
                found: values.len(),
            });
        }
        let mut names = self.names.clone();
        names.push(name.to_string());
        let f = self.n_features();
        let mut data = Vec::with_capacity(self.n_rows() * (f + 1));
        for (r, &v) in values.iter().enumerate() {
            data.extend_from_slice(self.values.row(r));
            data.push(v);
        }
        FeatureMatrix::new(
            names,
            Matrix::from_vec(self.n_rows(), f + 1, data),
            self.row_keys.clone(),
        )
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let f = self.n_features();
        let mut data = Vec::with_capacity(rows.len() * f);
        for &r in rows {
            data.extend_from_slice(self.values.row(r));
        }
        Self {
            names: self.names.clone(),
            values: Matrix::from_vec(rows.len(), f, data),
            row_keys: rows.iter().map(|&r| self.row_keys[r].clone()).collect(),
        }
    }
}

/// Trailing rolling mean and population standard deviation. Position `k`
/// uses the `min(k + 1, window)` most recent points.
pub fn rolling_stats(series: &[f64], window: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if window == 0 {
        return Err(FeatureError::ZeroWindow);
    }
    if series.is_empty() {
        return Err(FeatureError::EmptySeries);
    }
    let mut means = Vec::with_capacity(series.len());
    let mut stds = Vec::with_capacity(series.len());
    for k in 0..series.len() {
        let start = (k + 1).saturating_sub(window);
        let w = &series[start..=k];
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        means.push(mean);
        stds.push(var.sqrt());
    }
    Ok((means, stds))
}

/// Mean of the `window` values strictly before each position; the first
/// position has no history and uses its own value.
pub fn prior_moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(FeatureError::ZeroWindow);
    }
    if series.is_empty() {
        return Err(FeatureError::EmptySeries);
    }
    Ok((0..series.len())
        .map(|k| {
            if k == 0 {
                series[0]
            } else {
                let w = &series[k.saturating_sub(window)..k];
                w.iter().sum::<f64>() / w.len() as f64
            }
        })
        .collect())
}

/// Linear expected-load model `Ĉ = a·τ + b·μ + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadCoefficients {
    pub temperature: f64,
    pub moving_avg: f64,
    pub intercept: f64,
}

impl LoadCoefficients {
    pub fn new(temperature: f64, moving_avg: f64, intercept: f64) -> Self {
        Self {
            temperature,
            moving_avg,
            intercept,
        }
    }

    /// Least-squares fit over `(τ, μ, C)` triples. Rank-deficient designs
    /// (e.g. constant temperature) get the minimum-norm solution.
    pub fn fit(temperature: &[f64], moving_avg: &[f64], observed: &[f64]) -> Result<Self> {
        let n = observed.len();
        if n == 0 || temperature.len() != n || moving_avg.len() != n {
            return Err(FeatureError::UnfittedCoefficients(
                ": no training rows".into(),
            ));
        }
        // Columns are centered and scaled before the solve so the SVD
        // tolerance is meaningful regardless of units.
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
        let scale = |v: &[f64], m: f64| {
            let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        };
        let (mt, mm, mc) = (mean(temperature), mean(moving_avg), mean(observed));
        let (st, sm) = (scale(temperature, mt), scale(moving_avg, mm));
        let design = DMatrix::from_fn(n, 2, |r, c| match c {
            0 => (temperature[r] - mt) / st,
            _ => (moving_avg[r] - mm) / sm,
        });
        let rhs = DVector::from_iterator(n, observed.iter().map(|c| c - mc));
        let svd = design.svd(true, true);
        let beta = svd
            .solve(&rhs, 1e-10)
            .map_err(|e| FeatureError::UnfittedCoefficients(format!(": {e}")))?;
        let a = beta[0] / st;
        let b = beta[1] / sm;
        let c = mc - a * mt - b * mm;
        if !(a.is_finite() && b.is_finite() && c.is_finite()) {
            return Err(FeatureError::UnfittedCoefficients(
                ": non-finite solution".into(),
            ));
        }
        Ok(Self::new(a, b, c))
    }
}

/// `max(0, a·τ + b·μ + c)`.
pub fn expected_load(
    temperature: f64,
    moving_avg: f64,
    coeffs: Option<&LoadCoefficients>,
) -> Result<f64> {
    let c = coeffs.ok_or_else(|| FeatureError::UnfittedCoefficients(String::new()))?;
    let raw = c.temperature * temperature + c.moving_avg * moving_avg + c.intercept;
    Ok(raw.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImbalanceInputs {
    pub observed: f64,
    pub expected: f64,
    pub epsilon: f64,
}

impl ImbalanceInputs {
    pub fn new(observed: f64, expected: f64) -> Self {
        Self {
            observed,
            expected,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Grid imbalance index `|(C − Ĉ) / (C + ε)|`.
pub fn imbalance_index(input: ImbalanceInputs) -> f64 {
    ((input.observed - input.expected) / (input.observed + input.epsilon)).abs()
}

/// Linear `r·load` stand-in for a feeder voltage-drop indicator.
pub fn voltage_drop_proxy(load: f64, line_resistance: f64) -> Result<f64> {
    if load < 0.0 {
        return Err(FeatureError::NegativeLoad(load));
    }
    Ok(line_resistance * load)
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(v[lo] + (v[hi] - v[lo]) * frac)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinsorCap {
    pub feature: String,
    pub quantile: f64,
    pub cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub constant: Vec<bool>,
    #[serde(default)]
    pub winsorization: Option<WinsorCap>,
}

impl ScalerParams {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scaler params serialize")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// `μ_f + σ_f·z`, the inverse of [`standardize`].
    pub fn inverse_transform(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        check_names(&self.names, &m.names)?;
        let mut out = m.clone();
        for r in 0..m.n_rows() {
            for (c, v) in out.values.row_mut(r).iter_mut().enumerate() {
                *v = self.means[c] + self.stds[c] * *v;
            }
        }
        Ok(out)
    }
}

fn check_names(expected: &[String], found: &[String]) -> Result<()> {
    if expected != found {
        return Err(FeatureError::NameMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

/// Per-feature mean and population standard deviation.
pub fn fit_scaler(train: &FeatureMatrix) -> Result<ScalerParams> {
    let n = train.n_rows();
    if n == 0 {
        return Err(FeatureError::EmptyMatrix);
    }
    let f = train.n_features();
    let mut means = vec![0.0; f];
    for r in 0..n {
        for (m, v) in means.iter_mut().zip(train.values.row(r)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let mut vars = vec![0.0; f];
    for r in 0..n {
        for ((s, v), m) in vars.iter_mut().zip(train.values.row(r)).zip(&means) {
            *s += (v - m).powi(2);
        }
    }
    let stds: Vec<f64> = vars.iter().map(|s| (s / n as f64).sqrt()).collect();
    // Tiny relative spreads are rounding noise around a constant column.
    let constant = stds
        .iter()
        .zip(&means)
        .map(|(&s, &m)| s <= 1e-12 * m.abs().max(1.0))
        .collect::<Vec<_>>();
    let stds = stds
        .iter()
        .zip(&constant)
        .map(|(&s, &c)| if c { 0.0 } else { s })
        .collect();
    Ok(ScalerParams {
        names: train.names.clone(),
        means,
        stds,
        constant,
        winsorization: None,
    })
}

/// `(x − μ)/σ` per feature; constant features map to 0.
pub fn standardize(m: &FeatureMatrix, s: &ScalerParams) -> Result<FeatureMatrix> {
    check_names(&s.names, &m.names)?;
    let mut out = m.clone();
    for r in 0..m.n_rows() {
        for (c, v) in out.values.row_mut(r).iter_mut().enumerate() {
            *v = if s.constant[c] {
                0.0
            } else {
                (*v - s.means[c]) / s.stds[c]
            };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    pub matrix: FeatureMatrix,
    /// Columns present in the input but not expected.
    pub dropped: usize,
    /// Expected columns that were missing and zero-filled.
    pub inserted: usize,
}

/// Reorders columns to `expected`, zero-filling missing ones and dropping
/// extras.
pub fn align_features(m: &FeatureMatrix, expected: &[String]) -> Aligned {
    let pos: HashMap<&str, usize> = m
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let sources: Vec<Option<usize>> = expected.iter().map(|n| pos.get(n.as_str()).copied()).collect();
    let inserted = sources.iter().filter(|s| s.is_none()).count();
    let dropped = m.names.iter().filter(|n| !expected.contains(n)).count();
    if dropped > 0 {
        warn!("feature alignment dropped {dropped} unexpected column(s)");
    }
    let rows = m.n_rows();
    let mut data = Vec::with_capacity(rows * expected.len());
    for r in 0..rows {
        let row = m.values.row(r);
        data.extend(sources.iter().map(|s| s.map_or(0.0, |c| row[c])));
    }
    Aligned {
        matrix: FeatureMatrix {
            names: expected.to_vec(),
            values: Matrix::from_vec(rows, expected.len(), data),
            row_keys: m.row_keys.clone(),
        },
        dropped,
        inserted,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    pub rolling_window: usize,
    pub epsilon: f64,
    pub winsor_quantile: f64,
    pub line_resistance: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            rolling_window: 12,
            epsilon: DEFAULT_EPSILON,
            winsor_quantile: 0.999,
            line_resistance: 0.01,
        }
    }
}

/// Fitted pieces of the feature transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub coefficients: Vec<(String, LoadCoefficients)>,
    pub winsorization: WinsorCap,
}

/// Computes the raw (unscaled) feature matrix for every record.
///
/// `fit_rows` are the dataset positions whose normal-labeled records fit the
/// per-state expected-load model and the imbalance winsorization cap.
pub fn build_features(
    d: &Dataset,
    fit_rows: &[usize],
    params: &FeatureParams,
) -> Result<(FeatureMatrix, FeatureModel)> {
    let n = d.len();
    if n == 0 {
        return Err(FeatureError::EmptyMatrix);
    }
    let recs = d.records();
    let mut in_fit = vec![false; n];
    for &i in fit_rows {
        in_fit[i] = true;
    }

    let mut roll_mean = vec![0.0; n];
    let mut roll_std = vec![0.0; n];
    let mut prior = vec![0.0; n];
    let mut expected = vec![0.0; n];
    let mut temp_adjusted = vec![0.0; n];
    let mut delta = vec![0.0; n];
    let mut coefficients = Vec::new();

    for s in d.state_index() {
        let r = s.range.clone();
        let total: Vec<f64> = recs[r.clone()].iter().map(|x| x.total).collect();
        let (m, sd) = rolling_stats(&total, params.rolling_window)?;
        let mu = prior_moving_average(&total, params.rolling_window)?;

        let (mut ft, mut fm, mut fc) = (Vec::new(), Vec::new(), Vec::new());
        for (k, i) in r.clone().enumerate() {
            if in_fit[i] && !recs[i].is_theft() {
                ft.push(recs[i].temperature);
                fm.push(mu[k]);
                fc.push(total[k]);
            }
        }
        let coeffs = LoadCoefficients::fit(&ft, &fm, &fc).map_err(|_| {
            FeatureError::UnfittedCoefficients(format!(
                ": state `{}` has no normal training rows",
                s.state
            ))
        })?;
        for (k, i) in r.enumerate() {
            roll_mean[i] = m[k];
            roll_std[i] = sd[k];
            prior[i] = mu[k];
            let e = expected_load(recs[i].temperature, mu[k], Some(&coeffs))?;
            expected[i] = e;
            temp_adjusted[i] = total[k] - coeffs.temperature * recs[i].temperature;
            delta[i] = imbalance_index(ImbalanceInputs {
                observed: total[k],
                expected: e,
                epsilon: params.epsilon,
            });
        }
        coefficients.push((s.state.clone(), coeffs));
    }

    let fit_delta: Vec<f64> = fit_rows.iter().map(|&i| delta[i]).collect();
    let cap = quantile(&fit_delta, params.winsor_quantile).ok_or(FeatureError::EmptyMatrix)?;
    for v in &mut delta {
        *v = v.min(cap);
    }

    let mut names: Vec<String> = [
        names::RESIDENTIAL,
        names::COMMERCIAL,
        names::INDUSTRIAL,
        names::TOTAL,
        names::TEMPERATURE,
        names::ROLLING_MEAN,
        names::ROLLING_STD,
        names::MOVING_AVG,
        names::EXPECTED_LOAD,
        names::TEMP_ADJUSTED,
        names::IMBALANCE,
        names::VOLTAGE_DROP,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend(d.passthrough_names.iter().cloned());

    let f = names.len();
    let mut data = Vec::with_capacity(n * f);
    for (i, rec) in recs.iter().enumerate() {
        data.extend_from_slice(&[
            rec.residential,
            rec.commercial,
            rec.industrial,
            rec.total,
            rec.temperature,
            roll_mean[i],
            roll_std[i],
            prior[i],
            expected[i],
            temp_adjusted[i],
            delta[i],
            voltage_drop_proxy(rec.total, params.line_resistance)?,
        ]);
        data.extend_from_slice(&rec.passthrough);
    }
    let row_keys = recs.iter().map(|r| (r.state_id.clone(), r.t)).collect();
    let matrix = FeatureMatrix::new(names, Matrix::from_vec(n, f, data), row_keys)?;
    Ok((
        matrix,
        FeatureModel {
            coefficients,
            winsorization: WinsorCap {
                feature: names::IMBALANCE.to_string(),
                quantile: params.winsor_quantile,
                cap,
            },
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn fm(names: &[&str], rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::new(
            names.iter().map(|s| s.to_string()).collect(),
            Matrix::from_rows(rows),
            (0..rows.len()).map(|t| ("S".to_string(), t)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rolling_examples() {
        let (m, _) = rolling_stats(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(m, vec![1.0, 1.5, 2.5, 3.5]);
        let (m, s) = rolling_stats(&[5.0; 3], 7).unwrap();
        assert_eq!(m, vec![5.0; 3]);
        assert_eq!(s, vec![0.0; 3]);
        let series = [3.0, -1.0, 8.5];
        let (m, s) = rolling_stats(&series, 1).unwrap();
        assert_eq!(m, series.to_vec());
        assert_eq!(s, vec![0.0; 3]);
        assert_eq!(rolling_stats(&[], 2), Err(FeatureError::EmptySeries));
        assert_eq!(rolling_stats(&[1.0], 0), Err(FeatureError::ZeroWindow));
    }

    #[test]
    fn rolling_mean_of_ramp_is_linear_after_warmup() {
        let ramp: Vec<f64> = (0..40).map(|i| 2.0 * i as f64 + 1.0).collect();
        let (m, _) = rolling_stats(&ramp, 5).unwrap();
        for k in 5..40 {
            assert_abs_diff_eq!(m[k] - m[k - 1], 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn expected_load_examples() {
        let id = LoadCoefficients::new(0.0, 1.0, 0.0);
        assert_eq!(expected_load(17.0, 123.5, Some(&id)).unwrap(), 123.5);
        let lin = LoadCoefficients::new(2.0, 0.0, 10.0);
        assert_eq!(expected_load(5.0, 999.0, Some(&lin)).unwrap(), 20.0);
        let neg = LoadCoefficients::new(-3.0, 0.0, 1.0);
        assert_eq!(expected_load(5.0, 0.0, Some(&neg)).unwrap(), 0.0);
        assert!(matches!(
            expected_load(1.0, 1.0, None),
            Err(FeatureError::UnfittedCoefficients(_))
        ));
    }

    #[test]
    fn load_fit_recovers_exact_linear_model() {
        let temp: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin() * 10.0 + 15.0).collect();
        let mu: Vec<f64> = (0..30).map(|i| 100.0 + (i as f64 * 1.3).cos() * 5.0).collect();
        let c: Vec<f64> = temp.iter().zip(&mu).map(|(t, m)| 1.5 * t + 0.8 * m + 4.0).collect();
        let fit = LoadCoefficients::fit(&temp, &mu, &c).unwrap();
        assert_abs_diff_eq!(fit.temperature, 1.5, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.moving_avg, 0.8, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.intercept, 4.0, epsilon = 1e-6);
    }

    #[test]
    fn load_fit_constant_temperature_is_finite() {
        let fit = LoadCoefficients::fit(&[5.0; 4], &[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0]).unwrap();
        assert_abs_diff_eq!(expected_load(5.0, 2.5, Some(&fit)).unwrap(), 5.0, epsilon = 1e-9);
    }

    #[test]
    fn imbalance_examples() {
        assert_eq!(imbalance_index(ImbalanceInputs::new(42.0, 42.0)), 0.0);
        let d = imbalance_index(ImbalanceInputs::new(100.0, 50.0));
        assert_abs_diff_eq!(d, 50.0 / 100.00001, epsilon = 1e-15);
        assert_abs_diff_eq!(d, 0.4999999, epsilon = 1e-7);
        assert_abs_diff_eq!(imbalance_index(ImbalanceInputs::new(0.0, 10.0)), 1.0e6, epsilon = 1e-6);
    }

    #[test]
    fn imbalance_scale_invariance() {
        for &(c, e) in &[(1.0, 3.0), (10.0, 7.5), (250.0, 400.0)] {
            // Invariance holds as ε → 0; a tiny ε isolates the ratio.
            let idx = |c: f64, e: f64| imbalance_index(ImbalanceInputs { observed: c, expected: e, epsilon: 1e-12 });
            let base = idx(c, e);
            for k in [2.0, 10.0] {
                let scaled = idx(k * c, k * e);
                assert!((scaled - base).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn voltage_proxy_examples() {
        assert_eq!(voltage_drop_proxy(0.0, 0.01).unwrap(), 0.0);
        assert_abs_diff_eq!(voltage_drop_proxy(250.0, 0.01).unwrap(), 2.5, epsilon = 1e-15);
        assert_eq!(
            voltage_drop_proxy(80.0, 0.03).unwrap() * 2.0,
            voltage_drop_proxy(160.0, 0.03).unwrap()
        );
        assert_eq!(voltage_drop_proxy(-1.0, 0.01), Err(FeatureError::NegativeLoad(-1.0)));
    }

    #[test]
    fn scaler_examples() {
        let train = fm(&["a"], &[vec![0.0], vec![2.0]]);
        let s = fit_scaler(&train).unwrap();
        assert_eq!((s.means[0], s.stds[0]), (1.0, 1.0));
        let z = standardize(&fm(&["a"], &[vec![4.0], vec![1.0]]), &s).unwrap();
        assert_eq!(z.values.column(0), vec![3.0, 0.0]);

        let constant = fm(&["c"], &[vec![7.0], vec![7.0], vec![7.0]]);
        let s = fit_scaler(&constant).unwrap();
        assert!(s.constant[0]);
        assert_eq!(standardize(&constant, &s).unwrap().values.column(0), vec![0.0; 3]);
    }

    #[test]
    fn scaler_errors() {
        let empty = FeatureMatrix::new(vec!["a".into()], Matrix::zeros(0, 1), vec![]).unwrap();
        assert_eq!(fit_scaler(&empty), Err(FeatureError::EmptyMatrix));
        let s = fit_scaler(&fm(&["a"], &[vec![1.0]])).unwrap();
        assert!(matches!(
            standardize(&fm(&["b"], &[vec![1.0]]), &s),
            Err(FeatureError::NameMismatch { .. })
        ));
    }

    #[test]
    fn scaler_json_roundtrip() {
        let mut s = fit_scaler(&fm(&["a", "b"], &[vec![0.1, 3.0], vec![0.7, -2.0]])).unwrap();
        s.winsorization = Some(WinsorCap {
            feature: "b".into(),
            quantile: 0.999,
            cap: 2.5,
        });
        assert_eq!(ScalerParams::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn alignment_examples() {
        let m = fm(&["a", "c"], &[vec![1.0, 3.0]]);
        let exp: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let al = align_features(&m, &exp);
        assert_eq!(al.matrix.names, exp);
        assert_eq!(al.matrix.values.row(0), &[1.0, 0.0, 3.0]);
        assert_eq!((al.inserted, al.dropped), (1, 0));

        let same = fm(&["a", "b", "c"], &[vec![1.0, 2.0, 3.0]]);
        assert_eq!(align_features(&same, &exp).matrix, same);

        let extra = fm(&["a", "b", "c", "d"], &[vec![1.0, 2.0, 3.0, 4.0]]);
        let al = align_features(&extra, &exp);
        let oracle = extra.names.iter().filter(|n| !exp.contains(n)).count();
        assert_eq!(al.dropped, oracle);
        assert_eq!(al.dropped, 1);
        assert_eq!(al.matrix.values.row(0), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), Some(2.5));
        assert_eq!(quantile(&[4.0, 1.0], 1.0), Some(4.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    proptest! {
        #[test]
        fn standardize_inverts(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 2..40)) {
            let m = fm(&["x", "y", "z"], &rows);
            let s = fit_scaler(&m).unwrap();
            let z = standardize(&m, &s).unwrap();
            let back = s.inverse_transform(&z).unwrap();
            for (a, b) in back.values.as_slice().iter().zip(m.values.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
            for c in 0..3 {
                if s.constant[c] { continue; }
                let col = z.values.column(c);
                let n = col.len() as f64;
                let mean = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-9);
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn align_idempotent(keep in proptest::collection::vec(any::<bool>(), 5), extra in 0usize..3) {
            let all = ["a", "b", "c", "d", "e"];
            let mut names: Vec<&str> = all.iter().zip(&keep).filter(|(_, k)| **k).map(|(n, _)| *n).collect();
            let extras = ["x", "y", "z"];
            names.extend(&extras[..extra]);
            let row: Vec<f64> = (0..names.len()).map(|i| i as f64 + 1.0).collect();
            let m = fm(&names, &[row]);
            let exp: Vec<String> = all.iter().map(|s| s.to_string()).collect();
            let once = align_features(&m, &exp).matrix;
            let twice = align_features(&once, &exp).matrix;
            prop_assert_eq!(once, twice);
        }
    }
}
