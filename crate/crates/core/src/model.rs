//! EcNet: recurrent branches over the numeric and categorical channels,
//! optional self-attention over the fused hidden sequence, pooling, a tanh
//! fully connected stack and a softmax head. Also the binary checkpoint.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{pool_batch, pool_batch_backward, AttentionCache, AttentionParams, PoolMode};
use crate::error::{Error, Result};
use crate::features::{FeatureSchema, SequenceBatch, SequenceSample};
use crate::flow_ingest::LabelVocab;
use crate::nn_core::{softmax_rows, tanh_m, xavier_init, Matrix, Parameters, Rng};
use crate::recurrent::{CellType, Recurrent, SequenceCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// One recurrent branch per channel.
    #[default]
    Separate,
    /// One recurrent branch over the concatenated channels.
    Merged,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 2] = [FeatureMode::Separate, FeatureMode::Merged];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Separate => "separate",
            FeatureMode::Merged => "merged",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(FeatureMode::Separate),
            "merged" => Ok(FeatureMode::Merged),
            other => Err(Error::InvalidArgument(format!("unknown feature mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub cell_type: CellType,
    pub use_attention: bool,
    pub feature_mode: FeatureMode,
    pub hidden_numeric: usize,
    pub hidden_categorical: usize,
    pub d_k: usize,
    pub heads: usize,
    pub fc_sizes: Vec<usize>,
    pub n_classes: usize,
    pub pooling: PoolMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cell_type: CellType::Lstm,
            use_attention: true,
            feature_mode: FeatureMode::Separate,
            hidden_numeric: 64,
            hidden_categorical: 32,
            d_k: 32,
            heads: 1,
            fc_sizes: vec![64],
            n_classes: 2,
            pooling: PoolMode::Final,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Collects every violated invariant instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_classes < 2 {
            problems.push(format!("n_classes must be >= 2 (got {})", self.n_classes));
        }
        if self.hidden_numeric == 0 {
            problems.push("hidden_numeric must be >= 1".to_string());
        }
        if self.hidden_categorical == 0 {
            problems.push("hidden_categorical must be >= 1".to_string());
        }
        if self.use_attention {
            if self.d_k == 0 {
                problems.push("d_k must be >= 1".to_string());
            }
            if self.heads == 0 {
                problems.push("heads must be >= 1".to_string());
            } else if !self.d_k.is_multiple_of(self.heads) {
                problems.push(format!("d_k {} is not divisible by {} heads", self.d_k, self.heads));
            }
        }
        if self.fc_sizes.contains(&0) {
            problems.push("fc_sizes entries must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// `(input width, hidden width)` of each branch.
    fn branch_dims(&self, d_num: usize, d_cat: usize) -> Vec<(usize, usize)> {
        match self.feature_mode {
            FeatureMode::Separate => vec![(d_num, self.hidden_numeric), (d_cat, self.hidden_categorical)],
            // Same fused width as separate mode, so the head is shape-identical.
            FeatureMode::Merged => vec![(d_num + d_cat, self.hidden_numeric + self.hidden_categorical)],
        }
    }

    fn fused_width(&self) -> usize {
        self.hidden_numeric + self.hidden_categorical
    }

    fn pooled_width(&self) -> usize {
        if self.use_attention {
            self.d_k
        } else {
            self.fused_width()
        }
    }
}

/// One fully connected layer, `out × in` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Matrix,
    pub b: Matrix,
}

/// Every trainable matrix of EcNet. Gradient bundles share this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcNetParams {
    pub branches: Vec<Recurrent>,
    pub attention: Option<AttentionParams>,
    pub fc: Vec<Dense>,
}

impl EcNetParams {
    fn build(config: &ModelConfig, d_num: usize, d_cat: usize, mut rng: Option<&mut Rng>) -> Result<Self> {
        config.validate()?;
        let mut problems = Vec::new();
        if config.feature_mode == FeatureMode::Separate && (d_num == 0 || d_cat == 0) {
            problems.push(format!(
                "separate mode needs both channels (numeric width {d_num}, categorical width {d_cat})"
            ));
        }
        if d_num + d_cat == 0 {
            problems.push("feature schema has no columns".to_string());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let branches = config
            .branch_dims(d_num, d_cat)
            .into_iter()
            .map(|(input, hidden)| match rng.as_deref_mut() {
                Some(r) => Recurrent::init(config.cell_type, hidden, input, r),
                None => Recurrent::zeros(config.cell_type, hidden, input),
            })
            .collect();
        let attention = if config.use_attention {
            Some(match rng.as_deref_mut() {
                Some(r) => AttentionParams::init(config.fused_width(), config.d_k, config.heads, r)?,
                None => AttentionParams::zeros(config.fused_width(), config.d_k, config.heads)?,
            })
        } else {
            None
        };
        let mut fc = Vec::with_capacity(config.fc_sizes.len() + 1);
        let mut width = config.pooled_width();
        for &out in config.fc_sizes.iter().chain(std::iter::once(&config.n_classes)) {
            let w = match rng.as_deref_mut() {
                Some(r) => xavier_init(out, width, r),
                None => Matrix::zeros(out, width),
            };
            fc.push(Dense {
                w,
                b: Matrix::zeros(1, out),
            });
            width = out;
        }
        Ok(EcNetParams {
            branches,
            attention,
            fc,
        })
    }
}

impl Parameters for EcNetParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            out.extend(b.blocks().into_iter().map(|(n, m)| (format!("branch{i}.{n}"), m)));
        }
        if let Some(a) = &self.attention {
            out.extend(a.blocks().into_iter().map(|(n, m)| (format!("attention.{n}"), m)));
        }
        for (i, d) in self.fc.iter().enumerate() {
            out.push((format!("fc{i}.w"), &d.w));
            out.push((format!("fc{i}.b"), &d.b));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, b) in self.branches.iter_mut().enumerate() {
            out.extend(b.blocks_mut().into_iter().map(|(n, m)| (format!("branch{i}.{n}"), m)));
        }
        if let Some(a) = &mut self.attention {
            out.extend(a.blocks_mut().into_iter().map(|(n, m)| (format!("attention.{n}"), m)));
        }
        for (i, d) in self.fc.iter_mut().enumerate() {
            out.push((format!("fc{i}.w"), &mut d.w));
            out.push((format!("fc{i}.b"), &mut d.b));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcNetModel {
    pub config: ModelConfig,
    pub params: EcNetParams,
    pub schema: FeatureSchema,
    pub vocab: LabelVocab,
}

/// Builds a freshly initialized model. Initialization consumes `rng` only.
pub fn build_model(
    config: &ModelConfig,
    schema: &FeatureSchema,
    vocab: &LabelVocab,
    rng: &mut Rng,
) -> Result<EcNetModel> {
    check_vocab(config, vocab)?;
    let params = EcNetParams::build(config, schema.numeric_width(), schema.categorical_width(), Some(rng))?;
    Ok(EcNetModel {
        config: config.clone(),
        params,
        schema: schema.clone(),
        vocab: vocab.clone(),
    })
}

fn check_vocab(config: &ModelConfig, vocab: &LabelVocab) -> Result<()> {
    if config.n_classes != vocab.len() {
        return Err(Error::Config(vec![format!(
            "n_classes {} does not match the {}-class label vocabulary",
            config.n_classes,
            vocab.len()
        )]));
    }
    Ok(())
}

/// Everything [`EcNetModel::backward`] needs; usable once.
#[derive(Debug)]
pub struct ForwardCache {
    inner: Option<CacheInner>,
}

#[derive(Debug)]
struct CacheInner {
    seq_len: usize,
    branches: Vec<SequenceCache>,
    attention: Option<AttentionCache>,
    /// Input to each FC layer, then the final probabilities.
    activations: Vec<Matrix>,
    probs: Matrix,
}

impl ForwardCache {
    pub fn is_consumed(&self) -> bool {
        self.inner.is_none()
    }
}

/// Upstream gradient fed into [`EcNetModel::backward`].
#[derive(Debug, Clone, Copy)]
pub enum Upstream<'a> {
    /// `dL/dlogits`, `B × C`.
    Logits(&'a Matrix),
    /// `dL/dprobabilities`, `B × C`.
    Probabilities(&'a Matrix),
    /// Mean cross-entropy against these class ids.
    Targets(&'a [usize]),
}

/// Runs the fully connected stack: tanh between layers, linear output.
///
/// Returns the logits and the input of every layer (needed by [`fc_backward`]).
pub fn fc_forward(fc: &[Dense], input: Matrix) -> Result<(Matrix, Vec<Matrix>)> {
    let mut a = input;
    let mut activations = Vec::with_capacity(fc.len());
    let last = fc.len().saturating_sub(1);
    for (l, layer) in fc.iter().enumerate() {
        let z = a.matmul_nt(&layer.w)?.add_row_broadcast(&layer.b)?;
        activations.push(a);
        a = if l == last { z } else { tanh_m(&z) };
    }
    Ok((a, activations))
}

/// Gradients of the FC stack from `dL/dlogits`, plus `dL/dinput`.
pub fn fc_backward(fc: &[Dense], activations: &[Matrix], d_logits: &Matrix) -> Result<(Vec<Dense>, Matrix)> {
    let mut dz = d_logits.clone();
    let mut grads = Vec::with_capacity(fc.len());
    for (l, layer) in fc.iter().enumerate().rev() {
        let input = &activations[l];
        grads.push(Dense {
            w: dz.matmul_tn(input)?,
            b: dz.sum_rows(),
        });
        let da = dz.matmul(&layer.w)?;
        dz = if l > 0 {
            // `input` is the tanh output of the previous layer
            da.zip_map(input, |g, y| g * (1.0 - y * y))?
        } else {
            da
        };
    }
    grads.reverse();
    Ok((grads, dz))
}

/// `(p − onehot) / B`: gradient of the mean cross-entropy w.r.t. the logits.
pub fn cross_entropy_logit_grad(probs: &Matrix, targets: &[usize]) -> Result<Matrix> {
    if targets.len() != probs.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} targets for {} probability rows",
            targets.len(),
            probs.rows()
        )));
    }
    let n_classes = probs.cols();
    let inv_b = 1.0 / probs.rows().max(1) as f64;
    let mut d = probs.scale(inv_b);
    for (r, &t) in targets.iter().enumerate() {
        if t >= n_classes {
            return Err(Error::ClassOutOfRange { id: t, n_classes });
        }
        d[(r, t)] -= inv_b;
    }
    Ok(d)
}

/// Pulls a probability-space gradient back through the row softmax.
fn softmax_backward(probs: &Matrix, d_probs: &Matrix) -> Result<Matrix> {
    let pg = probs.hadamard(d_probs)?;
    let mut out = pg.clone();
    for r in 0..out.rows() {
        let s: f64 = pg.row(r).iter().sum();
        for (o, &p) in out.row_mut(r).iter_mut().zip(probs.row(r)) {
            *o -= p * s;
        }
    }
    Ok(out)
}

impl EcNetModel {
    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    fn branch_inputs(&self, batch: &SequenceBatch) -> Result<Vec<Matrix>> {
        let (dn, dc) = (self.schema.numeric_width(), self.schema.categorical_width());
        if batch.numeric.cols() != dn
            || batch.categorical.cols() != dc
            || batch.numeric.rows() != batch.categorical.rows()
        {
            return Err(Error::Shape {
                op: "model forward (batch vs schema)",
                left: (batch.numeric.cols(), batch.categorical.cols()),
                right: (dn, dc),
            });
        }
        if batch.seq_len == 0 || batch.numeric.rows() != batch.len() * batch.seq_len {
            return Err(Error::Shape {
                op: "model forward (batch rows)",
                left: batch.numeric.shape(),
                right: (batch.len(), batch.seq_len),
            });
        }
        Ok(match self.config.feature_mode {
            FeatureMode::Separate => vec![batch.numeric.clone(), batch.categorical.clone()],
            FeatureMode::Merged => vec![Matrix::hcat(&[&batch.numeric, &batch.categorical])?],
        })
    }

    /// Class probabilities (`B × n_classes`) and the cache for one backward pass.
    pub fn forward(&self, batch: &SequenceBatch) -> Result<(Matrix, ForwardCache)> {
        let w = batch.seq_len;
        let inputs = self.branch_inputs(batch)?;
        let mut hidden = Vec::with_capacity(inputs.len());
        let mut branch_caches = Vec::with_capacity(inputs.len());
        for (cell, x) in self.params.branches.iter().zip(&inputs) {
            let (h, cache) = cell.run_batch(x, w)?;
            hidden.push(h);
            branch_caches.push(cache);
        }
        let fused = Matrix::hcat(&hidden.iter().collect::<Vec<_>>())?;
        let (sequence, attention) = match &self.params.attention {
            Some(att) => {
                let (ctx, cache) = att.forward(&fused, w)?;
                (ctx, Some(cache))
            }
            None => (fused, None),
        };
        let pooled = pool_batch(&sequence, w, self.config.pooling)?;
        let (logits, activations) = fc_forward(&self.params.fc, pooled)?;
        let probs = softmax_rows(&logits);
        let cache = ForwardCache {
            inner: Some(CacheInner {
                seq_len: w,
                branches: branch_caches,
                attention,
                activations,
                probs: probs.clone(),
            }),
        };
        Ok((probs, cache))
    }

    /// Exact gradients of the whole composite. Consumes `cache`.
    pub fn backward(&self, cache: &mut ForwardCache, upstream: Upstream<'_>) -> Result<EcNetParams> {
        let inner = cache.inner.take().ok_or(Error::CacheConsumed)?;
        let dz = match upstream {
            Upstream::Logits(d) => d.clone(),
            Upstream::Probabilities(d) => softmax_backward(&inner.probs, d)?,
            Upstream::Targets(t) => cross_entropy_logit_grad(&inner.probs, t)?,
        };
        if dz.shape() != inner.probs.shape() {
            return Err(Error::Shape {
                op: "model backward",
                left: inner.probs.shape(),
                right: dz.shape(),
            });
        }
        let (fc_grads, d_pooled) = fc_backward(&self.params.fc, &inner.activations, &dz)?;
        let d_sequence = pool_batch_backward(&d_pooled, inner.seq_len, self.config.pooling);
        let (attention, d_fused) = match (&self.params.attention, &inner.attention) {
            (Some(att), Some(ac)) => {
                let (g, dh) = att.backward(ac, &d_sequence)?;
                (Some(g), dh)
            }
            _ => (None, d_sequence),
        };
        let mut branches = Vec::with_capacity(self.params.branches.len());
        let mut offset = 0;
        for (cell, bc) in self.params.branches.iter().zip(&inner.branches) {
            let h = cell.hidden();
            let (g, _dx) = cell.backward_batch(bc, &d_fused.col_slice(offset..offset + h))?;
            branches.push(g);
            offset += h;
        }
        Ok(EcNetParams {
            branches,
            attention,
            fc: fc_grads,
        })
    }

    /// Gradient bundle of zeros shaped like the parameters.
    pub fn zero_grads(&self) -> EcNetParams {
        let mut g = self.params.clone();
        g.zero();
        g
    }

    /// Argmax class ids (ties → lower id) and probability rows, in input order.
    pub fn predict(&self, samples: &[SequenceSample]) -> Result<(Vec<usize>, Matrix)> {
        const CHUNK: usize = 256;
        if samples.is_empty() {
            return Ok((Vec::new(), Matrix::zeros(0, self.config.n_classes)));
        }
        let parts: Vec<Matrix> = samples
            .par_chunks(CHUNK)
            .map(|chunk| {
                let refs: Vec<&SequenceSample> = chunk.iter().collect();
                let batch = SequenceBatch::from_samples(&refs)?;
                Ok(self.forward(&batch)?.0)
            })
            .collect::<Result<_>>()?;
        let probs = Matrix::vcat(&parts.iter().collect::<Vec<_>>())?;
        Ok((probs.argmax_rows(), probs))
    }
}

// ---------------------------------------------------------------- checkpoint

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ECNT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    schema: FeatureSchema,
    vocab: LabelVocab,
    blocks: Vec<BlockShape>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct BlockShape {
    name: String,
    rows: usize,
    cols: usize,
}

fn block_shapes(p: &EcNetParams) -> Vec<BlockShape> {
    p.blocks()
        .into_iter()
        .map(|(name, m)| BlockShape {
            name,
            rows: m.rows(),
            cols: m.cols(),
        })
        .collect()
}

/// Serializes a model to the checkpoint byte format.
pub fn checkpoint_bytes(m: &EcNetModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&CheckpointHeader {
        config: m.config.clone(),
        schema: m.schema.clone(),
        vocab: m.vocab.clone(),
        blocks: block_shapes(&m.params),
    })?;
    let payload: Vec<u8> = m.params.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut out = Vec::with_capacity(4 + 4 + 4 + header.len() + 8 + payload.len() + 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let s = &self.data[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checksum(format!("file truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes. Never returns a partially loaded model.
pub fn checkpoint_from_bytes(data: &[u8]) -> Result<EcNetModel> {
    let mut c = Cursor { data, pos: 0 };
    let magic = c
        .take(4, "magic")
        .map_err(|_| Error::Format("file is too short to be a checkpoint".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}")));
    }
    let version = c.u32("version")?;
    if version > CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    if version == 0 {
        return Err(Error::Format("checkpoint version 0 is invalid".into()));
    }
    let header_len = c.u32("header length")? as usize;
    let header_bytes = c.take(header_len, "header")?;
    let payload_len = c.u64("payload length")? as usize;
    let payload = c.take(payload_len, "payload")?;
    let stored_crc = c.u32("checksum")?;
    if crc32fast::hash(payload) != stored_crc {
        return Err(Error::Checksum("payload checksum mismatch".into()));
    }
    if c.pos != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checksum",
            data.len() - c.pos
        )));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("header: {e}")))?;
    check_vocab(&header.config, &header.vocab)?;
    let mut params = EcNetParams::build(
        &header.config,
        header.schema.numeric_width(),
        header.schema.categorical_width(),
        None,
    )?;
    if block_shapes(&params) != header.blocks {
        return Err(Error::Format("parameter blocks do not match the stored config".into()));
    }
    if payload_len != params.num_params() * 8 {
        return Err(Error::Format(format!(
            "payload holds {payload_len} bytes, expected {}",
            params.num_params() * 8
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    params.assign_flat(&flat);
    Ok(EcNetModel {
        config: header.config,
        params,
        schema: header.schema,
        vocab: header.vocab,
    })
}

pub fn save_checkpoint(m: &EcNetModel, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(m)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EcNetModel> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&data)
}
