//! Scaled dot-product self-attention over recurrent hidden-state sequences.
//!
//! `Attention(Q, K, V) = softmax(Q·Kᵀ / √d) · V` with learned projections
//! `Q = H·W_q`, `K = H·W_k`, `V = H·W_v`. With `heads > 1` the projection
//! width is split evenly across heads, each head is scaled by its own width,
//! and head outputs are concatenated without an output projection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn_core::{softmax_rows, xavier_init, Matrix, Parameters, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: usize,
    pub d_k: usize,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub context: Matrix,
    /// Row-stochastic `W × W` attention map.
    pub weights: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Keep the last timestep.
    #[default]
    Final,
    /// Average over timesteps.
    Mean,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(PoolMode::Final),
            "mean" => Ok(PoolMode::Mean),
            other => Err(Error::InvalidArgument(format!("unknown pooling `{other}`"))),
        }
    }
}

impl AttentionParams {
    pub fn validate(input: usize, d_k: usize, heads: usize) -> Result<()> {
        if d_k == 0 || heads == 0 || input == 0 {
            return Err(Error::InvalidArgument(format!(
                "attention needs input, d_k and heads >= 1 (got {input}, {d_k}, {heads})"
            )));
        }
        if !d_k.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "d_k {d_k} is not divisible by {heads} heads"
            )));
        }
        Ok(())
    }

    pub fn zeros(input: usize, d_k: usize, heads: usize) -> Result<Self> {
        Self::validate(input, d_k, heads)?;
        Ok(AttentionParams {
            heads,
            d_k,
            w_q: Matrix::zeros(input, d_k),
            w_k: Matrix::zeros(input, d_k),
            w_v: Matrix::zeros(input, d_k),
        })
    }

    pub fn init(input: usize, d_k: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Self::validate(input, d_k, heads)?;
        Ok(AttentionParams {
            heads,
            d_k,
            w_q: xavier_init(input, d_k, rng),
            w_k: xavier_init(input, d_k, rng),
            w_v: xavier_init(input, d_k, rng),
        })
    }

    pub fn input(&self) -> usize {
        self.w_q.rows()
    }

    /// Self-attention over `B` sequences stacked sample-major (`B·W × H_in`).
    ///
    /// Returns contexts in the same stacked layout (`B·W × d_k`).
    pub fn forward(&self, hidden: &Matrix, seq_len: usize) -> Result<(Matrix, AttentionCache)> {
        if seq_len == 0 || !hidden.rows().is_multiple_of(seq_len) {
            return Err(Error::Shape {
                op: "attention forward",
                left: hidden.shape(),
                right: (seq_len, self.d_k),
            });
        }
        let (q, k, v) = project_qkv(hidden, self)?;
        let batch = hidden.rows() / seq_len;
        let mut context = Matrix::zeros(hidden.rows(), self.d_k);
        let mut weights = Vec::with_capacity(batch);
        for b in 0..batch {
            let rows = b * seq_len..(b + 1) * seq_len;
            let (ctx, w) = multi_head(
                &q.row_slice(rows.clone()),
                &k.row_slice(rows.clone()),
                &v.row_slice(rows),
                self.heads,
            )?;
            for t in 0..seq_len {
                context.row_mut(b * seq_len + t).copy_from_slice(ctx.row(t));
            }
            weights.push(w);
        }
        let cache = AttentionCache {
            hidden: hidden.clone(),
            q,
            k,
            v,
            weights,
            seq_len,
        };
        Ok((context, cache))
    }

    /// Returns projection gradients and `dL/dH` in the stacked layout.
    pub fn backward(&self, cache: &AttentionCache, d_context: &Matrix) -> Result<(AttentionParams, Matrix)> {
        if d_context.shape() != cache.q.shape() {
            return Err(Error::Shape {
                op: "attention backward",
                left: cache.q.shape(),
                right: d_context.shape(),
            });
        }
        let seq_len = cache.seq_len;
        let head_width = self.d_k / self.heads;
        let mut dq = Matrix::zeros(cache.q.rows(), self.d_k);
        let mut dk = dq.clone();
        let mut dv = dq.clone();
        for (b, head_weights) in cache.weights.iter().enumerate() {
            let rows = b * seq_len..(b + 1) * seq_len;
            for (h, weights) in head_weights.iter().enumerate() {
                let cols = h * head_width..(h + 1) * head_width;
                let slice = |m: &Matrix| m.row_slice(rows.clone()).col_slice(cols.clone());
                let (gq, gk, gv) = attention_backward(
                    &slice(&cache.q),
                    &slice(&cache.k),
                    &slice(&cache.v),
                    weights,
                    head_width,
                    &slice(d_context),
                )?;
                for t in 0..seq_len {
                    let r = b * seq_len + t;
                    dq.row_mut(r)[cols.clone()].copy_from_slice(gq.row(t));
                    dk.row_mut(r)[cols.clone()].copy_from_slice(gk.row(t));
                    dv.row_mut(r)[cols.clone()].copy_from_slice(gv.row(t));
                }
            }
        }
        let grads = AttentionParams {
            heads: self.heads,
            d_k: self.d_k,
            w_q: cache.hidden.matmul_tn(&dq)?,
            w_k: cache.hidden.matmul_tn(&dk)?,
            w_v: cache.hidden.matmul_tn(&dv)?,
        };
        let mut d_hidden = dq.matmul_nt(&self.w_q)?;
        d_hidden.add_assign(&dk.matmul_nt(&self.w_k)?)?;
        d_hidden.add_assign(&dv.matmul_nt(&self.w_v)?)?;
        Ok((grads, d_hidden))
    }
}

impl Parameters for AttentionParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("w_q".into(), &self.w_q),
            ("w_k".into(), &self.w_k),
            ("w_v".into(), &self.w_v),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("w_q".into(), &mut self.w_q),
            ("w_k".into(), &mut self.w_k),
            ("w_v".into(), &mut self.w_v),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    hidden: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// `weights[b][h]`: attention map of sample `b`, head `h`.
    weights: Vec<Vec<Matrix>>,
    seq_len: usize,
}

impl AttentionCache {
    pub fn weights(&self) -> &[Vec<Matrix>] {
        &self.weights
    }
}

pub fn project_qkv(hidden: &Matrix, p: &AttentionParams) -> Result<(Matrix, Matrix, Matrix)> {
    Ok((hidden.matmul(&p.w_q)?, hidden.matmul(&p.w_k)?, hidden.matmul(&p.w_v)?))
}

/// Single-head attention for one sequence, scaled by `1/√d_k`.
pub fn attention_forward(q: &Matrix, k: &Matrix, v: &Matrix, d_k: usize) -> Result<AttentionOutput> {
    if d_k == 0 {
        return Err(Error::InvalidArgument("d_k must be >= 1".into()));
    }
    if k.rows() != v.rows() || q.cols() != k.cols() {
        return Err(Error::Shape {
            op: "attention_forward",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let weights = softmax_rows(&q.matmul_nt(k)?.scale(scale));
    let context = weights.matmul(v)?;
    Ok(AttentionOutput { context, weights })
}

/// Reverse pass of [`attention_forward`] given its attention map.
pub fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    weights: &Matrix,
    d_k: usize,
    d_context: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    if d_context.rows() != weights.rows() || d_context.cols() != v.cols() {
        return Err(Error::Shape {
            op: "attention_backward",
            left: (weights.rows(), v.cols()),
            right: d_context.shape(),
        });
    }
    let dv = weights.matmul_tn(d_context)?;
    let d_weights = d_context.matmul_nt(v)?;
    let scale = 1.0 / (d_k as f64).sqrt();
    // softmax Jacobian per row: dS = A ⊙ (dA − Σ_j dA_j A_j)
    let mut d_scores = Matrix::zeros(weights.rows(), weights.cols());
    for r in 0..weights.rows() {
        let a = weights.row(r);
        let da = d_weights.row(r);
        let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
        for (o, (&aj, &daj)) in d_scores.row_mut(r).iter_mut().zip(a.iter().zip(da)) {
            *o = aj * (daj - inner) * scale;
        }
    }
    let dq = d_scores.matmul(k)?;
    let dk = d_scores.matmul_tn(q)?;
    Ok((dq, dk, dv))
}

/// Splits the projection width across `heads`, attends per head, and
/// concatenates. Returns the context and each head's attention map.
pub fn multi_head(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<(Matrix, Vec<Matrix>)> {
    if heads == 0 || !q.cols().is_multiple_of(heads) {
        return Err(Error::InvalidArgument(format!(
            "width {} is not divisible by {heads} heads",
            q.cols()
        )));
    }
    if heads == 1 {
        let out = attention_forward(q, k, v, q.cols())?;
        return Ok((out.context, vec![out.weights]));
    }
    let width = q.cols() / heads;
    let mut context = Matrix::zeros(q.rows(), q.cols());
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * width..(h + 1) * width;
        let out = attention_forward(
            &q.col_slice(cols.clone()),
            &k.col_slice(cols.clone()),
            &v.col_slice(cols),
            width,
        )?;
        context.set_cols(h * width, &out.context);
        maps.push(out.weights);
    }
    Ok((context, maps))
}

/// Reduces one `W × d` sequence to a `1 × d` row.
pub fn pool_context(context: &Matrix, mode: PoolMode) -> Result<Matrix> {
    if context.rows() == 0 {
        return Err(Error::InvalidArgument("cannot pool an empty sequence".into()));
    }
    Ok(match mode {
        PoolMode::Final => context.row_slice(context.rows() - 1..context.rows()),
        PoolMode::Mean => context.sum_rows().scale(1.0 / context.rows() as f64),
    })
}

/// Pools every sequence of a stacked `B·W × d` matrix into `B × d`.
pub fn pool_batch(stacked: &Matrix, seq_len: usize, mode: PoolMode) -> Result<Matrix> {
    if seq_len == 0 || !stacked.rows().is_multiple_of(seq_len) {
        return Err(Error::Shape {
            op: "pool_batch",
            left: stacked.shape(),
            right: (seq_len, stacked.cols()),
        });
    }
    let batch = stacked.rows() / seq_len;
    let mut out = Matrix::zeros(batch, stacked.cols());
    for b in 0..batch {
        let pooled = pool_context(&stacked.row_slice(b * seq_len..(b + 1) * seq_len), mode)?;
        out.row_mut(b).copy_from_slice(pooled.row(0));
    }
    Ok(out)
}

/// Scatters a `B × d` pooled gradient back to the stacked `B·W × d` layout.
pub fn pool_batch_backward(d_pooled: &Matrix, seq_len: usize, mode: PoolMode) -> Matrix {
    let batch = d_pooled.rows();
    let mut out = Matrix::zeros(batch * seq_len, d_pooled.cols());
    for b in 0..batch {
        match mode {
            PoolMode::Final => out.row_mut(b * seq_len + seq_len - 1).copy_from_slice(d_pooled.row(b)),
            PoolMode::Mean => {
                let inv = 1.0 / seq_len as f64;
                for t in 0..seq_len {
                    for (o, &g) in out.row_mut(b * seq_len + t).iter_mut().zip(d_pooled.row(b)) {
                        *o = g * inv;
                    }
                }
            }
        }
    }
    out
}
