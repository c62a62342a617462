//! Seeded generator for state-level sectoral consumption series.
//!
//! Each state gets its own sector base loads and temperature climate. The
//! temperature follows a 24-step cycle plus a slow drift, and every sector
//! responds linearly to temperature with multiplicative AR(1) noise, so the
//! series are periodic and weather-driven.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ingestion::{ColumnIndex, ConsumptionRecord, Dataset, Schema};

const STATE_CODES: [&str; 48] = [
    "AL", "AZ", "AR", "CA", "CO", "CT", "DE", "FL", "GA", "ID", "IL", "IN", "IA", "KS", "KY", "LA",
    "ME", "MD", "MA", "MI", "MN", "MS", "MO", "MT", "NE", "NV", "NH", "NJ", "NM", "NY", "NC", "ND",
    "OH", "OK", "OR", "PA", "RI", "SC", "SD", "TN", "TX", "UT", "VT", "VA", "WA", "WV", "WI", "WY",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub states: usize,
    pub records_per_state: usize,
    pub seed: u64,
    /// Length of the periodic load cycle, in records.
    pub period: usize,
    /// Standard deviation of the multiplicative noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            states: 2,
            records_per_state: 500,
            seed: 7,
            period: 24,
            noise: 0.02,
        }
    }
}

pub fn state_code(i: usize) -> String {
    STATE_CODES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("S{i:03}"))
}

pub const HEADER: [&str; 7] = [
    "state",
    "t",
    "residential",
    "commercial",
    "industrial",
    "total",
    "temperature",
];

/// Rounds to 4 decimals so the CSV form is compact and exact under reload.
fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

pub fn generate(cfg: &SynthConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let period = cfg.period.max(2) as f64;
    let mut records = Vec::with_capacity(cfg.states * cfg.records_per_state);
    for s in 0..cfg.states {
        let state = state_code(s);
        let bases = [
            rng.gen_range(200.0..2000.0),
            rng.gen_range(150.0..1500.0),
            rng.gen_range(100.0..2500.0),
        ];
        let sensitivity = [
            rng.gen_range(0.015..0.035),
            rng.gen_range(0.008..0.02),
            rng.gen_range(0.002..0.008),
        ];
        let mean_temp = rng.gen_range(8.0..24.0);
        let amplitude = rng.gen_range(4.0..10.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let drift_period = rng.gen_range(300.0..600.0);
        let mut ar = [0.0f64; 3];
        for t in 0..cfg.records_per_state {
            let tf = t as f64;
            let temperature = mean_temp
                + amplitude * (2.0 * PI * tf / period + phase).sin()
                + 3.0 * (2.0 * PI * tf / drift_period).sin()
                + 0.5 * unit.sample(&mut rng);
            let mut sectors = [0.0; 3];
            for k in 0..3 {
                ar[k] = 0.6 * ar[k] + cfg.noise * unit.sample(&mut rng);
                let load = bases[k] * (1.0 + sensitivity[k] * (temperature - mean_temp)) * (1.0 + ar[k]);
                sectors[k] = round4(load.max(0.0));
            }
            let temperature = round4(temperature);
            let total = round4(sectors.iter().sum());
            let raw = vec![
                state.clone(),
                t.to_string(),
                sectors[0].to_string(),
                sectors[1].to_string(),
                sectors[2].to_string(),
                total.to_string(),
                temperature.to_string(),
            ];
            records.push(ConsumptionRecord {
                state_id: state.clone(),
                t,
                time_key: t.to_string(),
                residential: sectors[0],
                commercial: sectors[1],
                industrial: sectors[2],
                total,
                temperature,
                label: None,
                passthrough: Vec::new(),
                raw,
            });
        }
    }
    let header: Vec<String> = HEADER.iter().map(|s| s.to_string()).collect();
    let columns = ColumnIndex::resolve(&header, &Schema::default()).expect("synthetic header matches default schema");
    Dataset::from_records(header, columns, Vec::new(), records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let cfg = SynthConfig {
            states: 3,
            records_per_state: 40,
            ..SynthConfig::default()
        };
        let a = generate(&cfg);
        assert_eq!(a.len(), 120);
        assert_eq!(a.state_index().len(), 3);
        assert_eq!(a, generate(&cfg));
        assert!(a.records().iter().all(|r| r.total >= 0.0 && r.label.is_none()));
    }

    #[test]
    fn csv_reload_is_exact() {
        let d = generate(&SynthConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        d.write_csv(&p, ',').unwrap();
        let back = crate::ingestion::load_csv(&p, &Schema::default()).unwrap();
        assert_eq!(back.records(), d.records());
    }
}
