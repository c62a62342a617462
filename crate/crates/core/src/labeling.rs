//! Synthetic theft injection.
//!
//! Theft is injected as contiguous spans of mutated consumption inside a
//! single state. Exactly `⌊rate·N⌋` records end up labeled 1; every other
//! record is labeled 0 and left untouched.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingestion::Dataset;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("theft rate must lie in [0, 1], got {0}")]
    RateOutOfRange(f64),
    #[error("unknown attack kind `{0}`")]
    UnknownKind(String),
    #[error("factor range [{0}, {1}] must satisfy 0 < min <= max <= 1")]
    InvalidFactorRange(f64, f64),
    #[error("span range [{0}, {1}] must satisfy 1 <= min <= max")]
    InvalidSpanRange(usize, usize),
    #[error("dataset already carries theft labels")]
    AlreadyLabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    PartialReduction,
    Zeroing,
    RandomScale,
    IntermittentCut,
    MeanShiftDown,
    TimeReversal,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::PartialReduction,
        AttackKind::Zeroing,
        AttackKind::RandomScale,
        AttackKind::IntermittentCut,
        AttackKind::MeanShiftDown,
        AttackKind::TimeReversal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::PartialReduction => "partial_reduction",
            AttackKind::Zeroing => "zeroing",
            AttackKind::RandomScale => "random_scale",
            AttackKind::IntermittentCut => "intermittent_cut",
            AttackKind::MeanShiftDown => "mean_shift_down",
            AttackKind::TimeReversal => "time_reversal",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single kind, or `mixed` to draw a kind uniformly per span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMix {
    Single(AttackKind),
    Mixed,
}

impl FromStr for AttackMix {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        if norm == "mixed" {
            return Ok(AttackMix::Mixed);
        }
        AttackKind::ALL
            .iter()
            .find(|k| k.as_str() == norm || format!("{k:?}").to_ascii_lowercase() == norm)
            .map(|&k| AttackMix::Single(k))
            .ok_or_else(|| LabelError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    /// Attack kind name or `mixed`.
    pub kind: String,
    pub rate: f64,
    pub factor_min: f64,
    pub factor_max: f64,
    pub span_min: usize,
    pub span_max: usize,
    /// Overrides the pipeline's derived sub-seed when set.
    pub seed: Option<u64>,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            kind: "mixed".into(),
            rate: 0.07,
            factor_min: 0.1,
            factor_max: 0.8,
            span_min: 8,
            span_max: 24,
            seed: None,
        }
    }
}

impl AttackSpec {
    pub fn validate(&self) -> Result<AttackMix, LabelError> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(LabelError::RateOutOfRange(self.rate));
        }
        if !(self.factor_min > 0.0 && self.factor_min <= self.factor_max && self.factor_max <= 1.0) {
            return Err(LabelError::InvalidFactorRange(self.factor_min, self.factor_max));
        }
        if self.span_min == 0 || self.span_min > self.span_max {
            return Err(LabelError::InvalidSpanRange(self.span_min, self.span_max));
        }
        self.kind.parse()
    }
}

/// One injected span, in dataset record positions.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedSpan {
    pub start: usize,
    pub len: usize,
    pub kind: AttackKind,
    pub factor: f64,
}

#[derive(Debug, Clone)]
pub struct Injection {
    pub dataset: Dataset,
    pub spans: Vec<InjectedSpan>,
}

impl Injection {
    /// `(record position, state, t, kind)` for every theft record.
    pub fn audit_rows(&self) -> Vec<(usize, String, usize, AttackKind)> {
        let recs = self.dataset.records();
        let mut rows: Vec<_> = self
            .spans
            .iter()
            .flat_map(|s| (s.start..s.start + s.len).map(move |i| (i, s.kind)))
            .map(|(i, k)| (i, recs[i].state_id.clone(), recs[i].t, k))
            .collect();
        rows.sort_by_key(|r| r.0);
        rows
    }
}

/// Applies one attack to a channel span in place. `draws` carries the
/// per-record randomness so every channel of a record sees the same draw.
fn mutate(kind: AttackKind, factor: f64, draws: &[f64], span: &mut [f64]) {
    match kind {
        AttackKind::PartialReduction => span.iter_mut().for_each(|v| *v *= factor),
        AttackKind::Zeroing => span.iter_mut().for_each(|v| *v = 0.0),
        AttackKind::RandomScale => span.iter_mut().zip(draws).for_each(|(v, d)| *v *= d),
        AttackKind::IntermittentCut => span
            .iter_mut()
            .zip(draws)
            .for_each(|(v, &d)| *v = if d < 0.5 { 0.0 } else { *v * factor }),
        AttackKind::MeanShiftDown => {
            let mean = span.iter().sum::<f64>() / span.len() as f64;
            span.iter_mut().for_each(|v| *v = (*v - factor * mean).max(0.0));
        }
        AttackKind::TimeReversal => span.reverse(),
    }
}

fn apply_span(d: &mut Dataset, span: &InjectedSpan, draws: &[f64]) {
    let recs = &mut d.records_mut()[span.start..span.start + span.len];
    let accessors: [fn(&mut crate::ingestion::ConsumptionRecord) -> &mut f64; 4] = [
        |r| &mut r.residential,
        |r| &mut r.commercial,
        |r| &mut r.industrial,
        |r| &mut r.total,
    ];
    for get in accessors {
        let mut channel: Vec<f64> = recs.iter_mut().map(|r| *get(r)).collect();
        mutate(span.kind, span.factor, draws, &mut channel);
        for (r, v) in recs.iter_mut().zip(channel) {
            *get(r) = v;
        }
    }
    for r in recs.iter_mut() {
        r.label = Some(1);
    }
}

/// Relabels `⌊rate·N⌋` records as theft and mutates their consumption.
pub fn inject_theft(d: &Dataset, spec: &AttackSpec, seed: u64) -> Result<Injection, LabelError> {
    let mix = spec.validate()?;
    if d.records().iter().any(|r| r.label == Some(1)) {
        return Err(LabelError::AlreadyLabeled);
    }
    let mut out = d.clone();
    for r in out.records_mut() {
        r.label = Some(0);
    }
    let n = out.len();
    let target = (spec.rate * n as f64 + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(seed));
    let mut taken = vec![false; n];
    let mut spans = Vec::new();
    let mut remaining = target;

    // State membership per record, for placing spans inside one state.
    let ranges: Vec<std::ops::Range<usize>> =
        out.state_index().iter().map(|s| s.range.clone()).collect();
    let mut owner = vec![0usize; n];
    for (si, r) in ranges.iter().enumerate() {
        owner[r.clone()].iter_mut().for_each(|o| *o = si);
    }

    let draw_span = |rng: &mut ChaCha8Rng, start: usize, len: usize| -> (InjectedSpan, Vec<f64>) {
        let kind = match mix {
            AttackMix::Single(k) => k,
            AttackMix::Mixed => *AttackKind::ALL.choose(rng).expect("non-empty"),
        };
        let factor = rng.gen_range(spec.factor_min..=spec.factor_max);
        let draws: Vec<f64> = (0..len)
            .map(|_| match kind {
                AttackKind::RandomScale => rng.gen_range(spec.factor_min..=spec.factor_max),
                _ => rng.gen::<f64>(),
            })
            .collect();
        (InjectedSpan { start, len, kind, factor }, draws)
    };

    let mut failures = 0;
    while remaining > 0 && n > 0 && failures < 10_000 {
        let anchor = rng.gen_range(0..n);
        let range = &ranges[owner[anchor]];
        let len = rng
            .gen_range(spec.span_min..=spec.span_max)
            .min(remaining)
            .min(range.len());
        let start = rng.gen_range(range.start..=range.end - len);
        if taken[start..start + len].iter().any(|&t| t) {
            failures += 1;
            continue;
        }
        let (span, draws) = draw_span(&mut rng, start, len);
        apply_span(&mut out, &span, &draws);
        taken[start..start + len].iter_mut().for_each(|t| *t = true);
        remaining -= len;
        spans.push(span);
    }

    // Dense targets: sweep free runs in order until the count is met.
    if remaining > 0 {
        for range in &ranges {
            let mut i = range.start;
            while i < range.end && remaining > 0 {
                if taken[i] {
                    i += 1;
                    continue;
                }
                let mut len = 0;
                while i + len < range.end && !taken[i + len] && len < spec.span_max && len < remaining {
                    len += 1;
                }
                let (span, draws) = draw_span(&mut rng, i, len);
                apply_span(&mut out, &span, &draws);
                taken[i..i + len].iter_mut().for_each(|t| *t = true);
                remaining -= len;
                spans.push(span);
                i += len;
            }
        }
    }
    spans.sort_by_key(|s| s.start);
    Ok(Injection { dataset: out, spans })
}
