//! Feature encoding: train-set normalization statistics, categorical
//! vocabularies, and sliding-window sequence formation.
//!
//! Each flow is split into two channels. The numeric channel holds z-scored
//! counts and durations; the categorical channel holds concatenated one-hot
//! blocks, one per categorical column, with slot 0 of each block reserved for
//! values never seen during fitting.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_ingest::{FlowRecord, LabelVocab};
use crate::nn_core::{Matrix, Rng};

pub const SCHEMA_VERSION: u32 = 1;

pub const NUMERIC_COLUMNS: [&str; 8] = [
    "duration",
    "orig_bytes",
    "resp_bytes",
    "orig_pkts",
    "resp_pkts",
    "orig_port",
    "resp_port",
    "ts",
];

pub const CATEGORICAL_COLUMNS: [&str; 5] = ["proto", "service", "conn_state", "orig_host", "resp_host"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub numeric: Vec<String>,
    pub categorical: Vec<String>,
    pub window: usize,
    pub stride: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            numeric: NUMERIC_COLUMNS[..7].iter().map(|s| s.to_string()).collect(),
            categorical: CATEGORICAL_COLUMNS[..3].iter().map(|s| s.to_string()).collect(),
            window: 10,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericColumn {
    pub name: String,
    pub mean: f64,
    /// Population standard deviation; 1 for zero-variance columns.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalColumn {
    pub name: String,
    /// Known values; value `values[i]` encodes to index `i + 1`.
    pub values: Vec<String>,
}

impl CategoricalColumn {
    /// One-hot width including the out-of-vocabulary slot.
    pub fn width(&self) -> usize {
        self.values.len() + 1
    }

    pub fn index_of(&self, value: &str) -> usize {
        self.values.iter().position(|v| v == value).map_or(0, |i| i + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    pub numeric: Vec<NumericColumn>,
    pub categorical: Vec<CategoricalColumn>,
    pub window: usize,
    pub stride: usize,
}

fn numeric_value(r: &FlowRecord, column: &str) -> Result<Option<f64>> {
    Ok(match column {
        "duration" => r.duration,
        "orig_bytes" => r.orig_bytes.map(|v| v as f64),
        "resp_bytes" => r.resp_bytes.map(|v| v as f64),
        "orig_pkts" => r.orig_pkts.map(|v| v as f64),
        "resp_pkts" => r.resp_pkts.map(|v| v as f64),
        "orig_port" => Some(r.orig_port as f64),
        "resp_port" => Some(r.resp_port as f64),
        "ts" => Some(r.ts),
        other => return Err(Error::UnknownColumn(other.to_string())),
    })
}

fn categorical_value<'a>(r: &'a FlowRecord, column: &str) -> Result<&'a str> {
    Ok(match column {
        "proto" => r.proto.as_str(),
        "service" => r.service.as_deref().unwrap_or("-"),
        "conn_state" => r.conn_state.as_str(),
        "orig_host" => r.orig_host.as_str(),
        "resp_host" => r.resp_host.as_str(),
        other => return Err(Error::UnknownColumn(other.to_string())),
    })
}

/// Fits normalization statistics and vocabularies on training records only.
pub fn fit_schema(train: &[FlowRecord], config: &FeatureConfig) -> Result<FeatureSchema> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("cannot fit features on zero records".into()));
    }
    if config.window == 0 || config.stride == 0 {
        return Err(Error::InvalidArgument("window and stride must be >= 1".into()));
    }
    if config.numeric.is_empty() && config.categorical.is_empty() {
        return Err(Error::InvalidArgument("no feature columns configured".into()));
    }
    let mut numeric = Vec::with_capacity(config.numeric.len());
    for name in &config.numeric {
        let mut values = Vec::with_capacity(train.len());
        for r in train {
            if let Some(v) = numeric_value(r, name)? {
                values.push(v);
            }
        }
        let (mean, std) = if values.is_empty() {
            (0.0, 1.0)
        } else {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            (mean, if std > 0.0 && std.is_finite() { std } else { 1.0 })
        };
        numeric.push(NumericColumn {
            name: name.clone(),
            mean,
            std,
        });
    }
    let mut categorical = Vec::with_capacity(config.categorical.len());
    for name in &config.categorical {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in train {
            *counts.entry(categorical_value(r, name)?).or_default() += 1;
        }
        let mut pairs: Vec<(&str, usize)> = counts.into_iter().collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        categorical.push(CategoricalColumn {
            name: name.clone(),
            values: pairs.into_iter().map(|(v, _)| v.to_string()).collect(),
        });
    }
    Ok(FeatureSchema {
        version: SCHEMA_VERSION,
        numeric,
        categorical,
        window: config.window,
        stride: config.stride,
    })
}

impl FeatureSchema {
    pub fn numeric_width(&self) -> usize {
        self.numeric.len()
    }

    pub fn categorical_width(&self) -> usize {
        self.categorical.iter().map(CategoricalColumn::width).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: FeatureSchema = serde_json::from_str(text)?;
        if schema.version > SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "feature schema version {} is newer than supported {SCHEMA_VERSION}",
                schema.version
            )));
        }
        Ok(schema)
    }
}

/// Encodes one record into its numeric and categorical rows.
///
/// Absent numeric values encode as 0, i.e. they are imputed with the train mean.
pub fn encode_record(r: &FlowRecord, schema: &FeatureSchema) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut numeric = Vec::with_capacity(schema.numeric_width());
    for col in &schema.numeric {
        numeric.push(match numeric_value(r, &col.name)? {
            Some(v) => (v - col.mean) / col.std,
            None => 0.0,
        });
    }
    let mut categorical = vec![0.0; schema.categorical_width()];
    let mut offset = 0;
    for col in &schema.categorical {
        categorical[offset + col.index_of(categorical_value(r, &col.name)?)] = 1.0;
        offset += col.width();
    }
    Ok((numeric, categorical))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    /// `W × D_num`.
    pub numeric: Matrix,
    /// `W × D_cat`.
    pub categorical: Matrix,
    pub target: usize,
}

impl SequenceSample {
    pub fn seq_len(&self) -> usize {
        self.numeric.rows()
    }
}

/// Number of windows [`make_sequences`] yields for `n` records.
pub fn window_count(n: usize, window: usize, stride: usize) -> usize {
    if n < window {
        0
    } else {
        (n - window) / stride + 1
    }
}

/// Slides a `window`-long frame over time-ordered records. Each window is
/// labeled with the class of its last record.
pub fn make_sequences(
    records: &[FlowRecord],
    schema: &FeatureSchema,
    vocab: &LabelVocab,
) -> Result<Vec<SequenceSample>> {
    let (w, stride) = (schema.window, schema.stride);
    let count = window_count(records.len(), w, stride);
    if count == 0 {
        return Ok(Vec::new());
    }
    let (dn, dc) = (schema.numeric_width(), schema.categorical_width());
    let mut numeric = Matrix::zeros(records.len(), dn);
    let mut categorical = Matrix::zeros(records.len(), dc);
    let mut targets = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let (n, c) = encode_record(r, schema)?;
        numeric.row_mut(i).copy_from_slice(&n);
        categorical.row_mut(i).copy_from_slice(&c);
        let id = vocab
            .id(&r.label)
            .ok_or_else(|| Error::Incompatible(format!("label `{}` is not in the class vocabulary", r.label)))?;
        targets.push(id);
    }
    Ok((0..count)
        .map(|k| {
            let start = k * stride;
            SequenceSample {
                numeric: numeric.row_slice(start..start + w),
                categorical: categorical.row_slice(start..start + w),
                target: targets[start + w - 1],
            }
        })
        .collect())
}

/// Samples stacked sample-major: row `b·W + t` is timestep `t` of sample `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub numeric: Matrix,
    pub categorical: Matrix,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}

impl SequenceBatch {
    pub fn from_samples(samples: &[&SequenceSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let seq_len = first.seq_len();
        if let Some(bad) = samples.iter().find(|s| s.seq_len() != seq_len) {
            return Err(Error::InvalidArgument(format!(
                "batch mixes sequence lengths {seq_len} and {}",
                bad.seq_len()
            )));
        }
        let numeric: Vec<&Matrix> = samples.iter().map(|s| &s.numeric).collect();
        let categorical: Vec<&Matrix> = samples.iter().map(|s| &s.categorical).collect();
        Ok(SequenceBatch {
            numeric: Matrix::vcat(&numeric)?,
            categorical: Matrix::vcat(&categorical)?,
            targets: samples.iter().map(|s| s.target).collect(),
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Groups samples into batches, keeping the final partial batch.
pub fn batch(samples: &[SequenceSample], batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<SequenceBatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if shuffle {
        Rng::new(seed).shuffle(&mut order);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&SequenceSample> = chunk.iter().map(|&i| &samples[i]).collect();
            SequenceBatch::from_samples(&members)
        })
        .collect()
}
