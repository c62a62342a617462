//! CSV ingestion, per-state grouping and the chronological train/test split.
//!
//! Rows are grouped by state in order of first appearance and sorted by their
//! time column inside each state. Time values are replaced by dense indices
//! `0..k` per state; the original cell is kept as `time_key`.

use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("input file has no data rows")]
    EmptyFile,
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: column `{column}` is not numeric: {value:?}")]
    NonNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: column `{column}` must be finite and non-negative, got {value}")]
    InvalidValue { row: usize, column: String, value: f64 },
    #[error("row {row}: label must be 0 or 1, got {value:?}")]
    InvalidLabel { row: usize, value: String },
    #[error("state `{state}` has duplicate time value {time:?}")]
    DuplicateTime { state: String, time: String },
    #[error("test fraction must lie in (0, 1), got {0}")]
    FractionOutOfRange(f64),
    #[error("state `{0}` has fewer than 2 records")]
    StateTooSmall(String),
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// Maps logical fields onto CSV header names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub state: String,
    pub time: String,
    pub residential: String,
    pub commercial: String,
    pub industrial: String,
    /// When absent, the total is the sum of the three sectors.
    pub total: Option<String>,
    pub temperature: String,
    pub label: Option<String>,
    /// Extra numeric columns carried into the feature matrix unchanged.
    pub passthrough: Vec<String>,
    pub delimiter: char,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            state: "state".into(),
            time: "t".into(),
            residential: "residential".into(),
            commercial: "commercial".into(),
            industrial: "industrial".into(),
            total: Some("total".into()),
            temperature: "temperature".into(),
            label: None,
            passthrough: Vec::new(),
            delimiter: ',',
        }
    }
}

/// Resolved header positions of the mapped columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnIndex {
    pub state: usize,
    pub time: usize,
    pub residential: usize,
    pub commercial: usize,
    pub industrial: usize,
    pub total: Option<usize>,
    pub temperature: usize,
    pub label: Option<usize>,
    pub passthrough: Vec<usize>,
}

impl ColumnIndex {
    pub fn resolve(header: &[String], schema: &Schema) -> Result<Self> {
        let find = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
        };
        Ok(Self {
            state: find(&schema.state)?,
            time: find(&schema.time)?,
            residential: find(&schema.residential)?,
            commercial: find(&schema.commercial)?,
            industrial: find(&schema.industrial)?,
            total: schema.total.as_deref().map(find).transpose()?,
            temperature: find(&schema.temperature)?,
            label: schema.label.as_deref().map(find).transpose()?,
            passthrough: schema
                .passthrough
                .iter()
                .map(|p| find(p))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsumptionRecord {
    pub state_id: String,
    /// Dense time index within the state.
    pub t: usize,
    pub time_key: String,
    pub residential: f64,
    pub commercial: f64,
    pub industrial: f64,
    pub total: f64,
    pub temperature: f64,
    pub label: Option<u8>,
    pub passthrough: Vec<f64>,
    /// Original CSV cells, carried opaquely to the scored output.
    pub raw: Vec<String>,
}

impl ConsumptionRecord {
    pub fn sectors(&self) -> [f64; 3] {
        [self.residential, self.commercial, self.industrial]
    }

    pub fn is_theft(&self) -> bool {
        self.label == Some(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateRange {
    pub state: String,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: Vec<String>,
    pub columns: ColumnIndex,
    pub passthrough_names: Vec<String>,
    records: Vec<ConsumptionRecord>,
    state_index: Vec<StateRange>,
}

impl Dataset {
    /// Groups records by state (first-appearance order) and sorts each group
    /// by `t`, then re-densifies `t`. The sort is stable.
    pub fn from_records(
        header: Vec<String>,
        columns: ColumnIndex,
        passthrough_names: Vec<String>,
        records: Vec<ConsumptionRecord>,
    ) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<ConsumptionRecord>> = HashMap::new();
        for r in records {
            if !groups.contains_key(&r.state_id) {
                order.push(r.state_id.clone());
            }
            groups.entry(r.state_id.clone()).or_default().push(r);
        }
        let mut out = Vec::new();
        let mut state_index = Vec::with_capacity(order.len());
        for state in order {
            let mut group = groups.remove(&state).unwrap_or_default();
            group.sort_by_key(|r| r.t);
            let start = out.len();
            for (t, mut r) in group.into_iter().enumerate() {
                r.t = t;
                out.push(r);
            }
            state_index.push(StateRange {
                state,
                range: start..out.len(),
            });
        }
        Self {
            header,
            columns,
            passthrough_names,
            records: out,
            state_index,
        }
    }

    pub fn records(&self) -> &[ConsumptionRecord] {
        &self.records
    }

    pub fn records_mut(&mut self) -> &mut [ConsumptionRecord] {
        &mut self.records
    }

    pub fn state_index(&self) -> &[StateRange] {
        &self.state_index
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label.unwrap_or(0)).collect()
    }

    pub fn has_labels(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.label.is_some())
    }

    /// Records at `indices`, regrouped. Indices must be in dataset order for
    /// the state ranges to stay contiguous.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::from_records(
            self.header.clone(),
            self.columns.clone(),
            self.passthrough_names.clone(),
            indices.iter().map(|&i| self.records[i].clone()).collect(),
        )
    }

    /// Header of the re-serialized dataset. A `label` column is appended when
    /// labels exist but the input had no mapped label column.
    pub fn output_header(&self) -> Vec<String> {
        let mut h = self.header.clone();
        if self.columns.label.is_none() && self.has_labels() {
            h.push("label".into());
        }
        h
    }

    /// Original cells with mapped numeric columns replaced by their current
    /// values. `f64` display is the shortest round-trip representation.
    pub fn output_row(&self, i: usize) -> Vec<String> {
        let r = &self.records[i];
        let c = &self.columns;
        let mut row = r.raw.clone();
        row[c.residential] = r.residential.to_string();
        row[c.commercial] = r.commercial.to_string();
        row[c.industrial] = r.industrial.to_string();
        if let Some(ti) = c.total {
            row[ti] = r.total.to_string();
        }
        row[c.temperature] = r.temperature.to_string();
        let label = r.label.map(|l| l.to_string());
        match (c.label, label) {
            (Some(li), Some(l)) => row[li] = l,
            (None, Some(l)) if self.has_labels() => row.push(l),
            _ => {}
        }
        row
    }

    pub fn write_csv(&self, path: &Path, delimiter: char) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = csv::WriterBuilder::new()
            .delimiter(delimiter as u8)
            .from_writer(std::io::BufWriter::new(file));
        w.write_record(self.output_header())?;
        for i in 0..self.len() {
            w.write_record(self.output_row(i))?;
        }
        w.flush().map_err(|source| IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }
}

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| IngestError::NonNumericCell {
            row,
            column: column.to_string(),
            value: cell.to_string(),
        })
}

fn parse_consumption(cell: &str, row: usize, column: &str) -> Result<f64> {
    let v = parse_number(cell, row, column)?;
    if !v.is_finite() || v < 0.0 {
        return Err(IngestError::InvalidValue {
            row,
            column: column.to_string(),
            value: v,
        });
    }
    Ok(v)
}

/// Loads a consumption CSV. Row numbers in errors are 1-based data rows.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(IngestError::EmptyFile);
    }
    let columns = ColumnIndex::resolve(&header, schema)?;

    struct Pending {
        record: ConsumptionRecord,
        time_value: Option<f64>,
    }
    let mut pending = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let n = i + 1;
        let cell = |idx: usize| row.get(idx).unwrap_or("");
        let residential = parse_consumption(cell(columns.residential), n, &schema.residential)?;
        let commercial = parse_consumption(cell(columns.commercial), n, &schema.commercial)?;
        let industrial = parse_consumption(cell(columns.industrial), n, &schema.industrial)?;
        let total = match (columns.total, schema.total.as_deref()) {
            (Some(idx), Some(name)) => parse_consumption(cell(idx), n, name)?,
            _ => residential + commercial + industrial,
        };
        let temperature = parse_number(cell(columns.temperature), n, &schema.temperature)?;
        if !temperature.is_finite() {
            return Err(IngestError::InvalidValue {
                row: n,
                column: schema.temperature.clone(),
                value: temperature,
            });
        }
        let label = match columns.label {
            Some(idx) => match cell(idx).trim() {
                "0" | "0.0" => Some(0),
                "1" | "1.0" => Some(1),
                other => {
                    return Err(IngestError::InvalidLabel {
                        row: n,
                        value: other.to_string(),
                    })
                }
            },
            None => None,
        };
        let passthrough = columns
            .passthrough
            .iter()
            .zip(&schema.passthrough)
            .map(|(&idx, name)| parse_number(cell(idx), n, name))
            .collect::<Result<Vec<_>>>()?;
        let time_key = cell(columns.time).to_string();
        pending.push(Pending {
            time_value: time_key.trim().parse::<f64>().ok(),
            record: ConsumptionRecord {
                state_id: cell(columns.state).to_string(),
                t: 0,
                time_key,
                residential,
                commercial,
                industrial,
                total,
                temperature,
                label,
                passthrough,
                raw: row.iter().map(str::to_string).collect(),
            },
        });
    }
    if pending.is_empty() {
        return Err(IngestError::EmptyFile);
    }

    // Numeric time columns sort numerically; anything else sorts as text
    // (ISO-8601 dates order correctly that way).
    let numeric = pending.iter().all(|p| p.time_value.is_some());
    let mut order: Vec<usize> = (0..pending.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&pending[a], &pending[b]);
        if numeric {
            pa.time_value
                .partial_cmp(&pb.time_value)
                .unwrap_or(std::cmp::Ordering::Equal)
        } else {
            pa.record.time_key.cmp(&pb.record.time_key)
        }
    });
    let mut rank = vec![0usize; pending.len()];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos;
    }

    let mut seen: HashMap<(&str, &str), ()> = HashMap::new();
    for p in &pending {
        if seen
            .insert((p.record.state_id.as_str(), p.record.time_key.trim()), ())
            .is_some()
        {
            return Err(IngestError::DuplicateTime {
                state: p.record.state_id.clone(),
                time: p.record.time_key.clone(),
            });
        }
    }

    let records = pending
        .into_iter()
        .zip(rank)
        .map(|(mut p, r)| {
            p.record.t = r;
            p.record
        })
        .collect();
    Ok(Dataset::from_records(
        header,
        columns,
        schema.passthrough.clone(),
        records,
    ))
}

/// Positions (in dataset order) of the train and test records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Number of records a state of size `n` sends to the test side: `⌊f·n⌋`
/// kept within `[1, n − 1]` so both sides see every state.
pub fn test_count(n: usize, fraction: f64) -> usize {
    // The epsilon keeps products like 0.3·10 from landing just under 3.
    let raw = (fraction * n as f64 + 1e-9).floor() as usize;
    raw.clamp(1, n.saturating_sub(1).max(1))
}

pub fn split_indices(d: &Dataset, test_fraction: f64) -> Result<SplitIndices> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(IngestError::FractionOutOfRange(test_fraction));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in d.state_index() {
        let n = s.range.len();
        if n < 2 {
            return Err(IngestError::StateTooSmall(s.state.clone()));
        }
        let n_test = test_count(n, test_fraction);
        let cut = s.range.end - n_test;
        train.extend(s.range.start..cut);
        test.extend(cut..s.range.end);
    }
    Ok(SplitIndices { train, test })
}

/// Chronological per-state split: the latest records of each state go to test.
pub fn split_train_test(d: &Dataset, test_fraction: f64) -> Result<(Dataset, Dataset)> {
    let idx = split_indices(d, test_fraction)?;
    Ok((d.subset(&idx.train), d.subset(&idx.test)))
}

/// Writes CSV text to any sink; used by the audit exports.
pub(crate) fn write_rows<W: Write>(
    sink: W,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}
