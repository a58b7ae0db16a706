//! Recurrent cells (LSTM, vanilla RNN, GRU) with hand-derived backward passes.
//!
//! Every cell works on batches: inputs are `B × D`, states `B × H`. A single
//! sequence is the `B = 1` case. Weight matrices are `H × (H + D)` and act on
//! the row concatenation `[h_{t-1}, x_t]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn_core::{sigmoid, tanh_m, xavier_init, Matrix, Parameters, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellType {
    Lstm,
    Rnn,
    Gru,
}

impl CellType {
    pub const ALL: [CellType; 3] = [CellType::Lstm, CellType::Rnn, CellType::Gru];

    pub fn as_str(self) -> &'static str {
        match self {
            CellType::Lstm => "lstm",
            CellType::Rnn => "rnn",
            CellType::Gru => "gru",
        }
    }

    /// Number of `H × (H + D)` weight blocks (and bias rows) per cell.
    pub fn gate_count(self) -> usize {
        match self {
            CellType::Lstm => 4,
            CellType::Rnn => 1,
            CellType::Gru => 3,
        }
    }
}

impl std::str::FromStr for CellType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellType::Lstm),
            "rnn" => Ok(CellType::Rnn),
            "gru" => Ok(CellType::Gru),
            other => Err(Error::InvalidArgument(format!("unknown cell type `{other}`"))),
        }
    }
}

impl std::fmt::Display for CellType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hidden and cell state. RNN and GRU carry `c` as zeros and ignore it.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Matrix,
    pub c: Matrix,
}

impl CellState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        CellState {
            h: Matrix::zeros(batch, hidden),
            c: Matrix::zeros(batch, hidden),
        }
    }
}

/// Gradients from one reverse step.
#[derive(Debug, Clone)]
pub struct StepGrads<P> {
    pub params: P,
    pub dh_prev: Matrix,
    pub dc_prev: Matrix,
    pub dx: Matrix,
}

fn affine(z: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    z.matmul_nt(w)?.add_row_broadcast(b)
}

fn check_step_inputs(hidden: usize, input: usize, s: &CellState, x: &Matrix) -> Result<()> {
    if x.cols() != input || s.h.cols() != hidden || s.h.rows() != x.rows() {
        return Err(Error::Shape {
            op: "cell step",
            left: s.h.shape(),
            right: x.shape(),
        });
    }
    Ok(())
}

fn check_upstream(expected: (usize, usize), got: &Matrix) -> Result<()> {
    if got.shape() != expected {
        return Err(Error::Shape {
            op: "cell step backward",
            left: expected,
            right: got.shape(),
        });
    }
    Ok(())
}

/// Elementwise `d ⊙ s ⊙ (1 − s)`: the sigmoid derivative applied to an upstream gradient.
fn through_sigmoid(d: &Matrix, s: &Matrix) -> Matrix {
    d.zip_map(s, |d, s| d * s * (1.0 - s)).expect("same shape")
}

/// Elementwise `d ⊙ (1 − t²)`.
fn through_tanh(d: &Matrix, t: &Matrix) -> Matrix {
    d.zip_map(t, |d, t| d * (1.0 - t * t)).expect("same shape")
}

// ---------------------------------------------------------------- LSTM

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub hidden: usize,
    pub input: usize,
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_c: Matrix,
    pub w_o: Matrix,
    pub b_f: Matrix,
    pub b_i: Matrix,
    pub b_c: Matrix,
    pub b_o: Matrix,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    z: Matrix,
    f: Matrix,
    i: Matrix,
    g: Matrix,
    o: Matrix,
    c_prev: Matrix,
    tanh_c: Matrix,
}

impl LstmParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = Matrix::zeros(hidden, hidden + input);
        let b = Matrix::zeros(1, hidden);
        LstmParams {
            hidden,
            input,
            w_f: w.clone(),
            w_i: w.clone(),
            w_c: w.clone(),
            w_o: w,
            b_f: b.clone(),
            b_i: b.clone(),
            b_c: b.clone(),
            b_o: b,
        }
    }

    pub fn init(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(hidden, input);
        p.w_f = xavier_init(hidden, hidden + input, rng);
        p.w_i = xavier_init(hidden, hidden + input, rng);
        p.w_c = xavier_init(hidden, hidden + input, rng);
        p.w_o = xavier_init(hidden, hidden + input, rng);
        p
    }

    pub fn step(&self, s: &CellState, x: &Matrix) -> Result<(CellState, LstmCache)> {
        check_step_inputs(self.hidden, self.input, s, x)?;
        let z = Matrix::hcat(&[&s.h, x])?;
        let f = sigmoid(&affine(&z, &self.w_f, &self.b_f)?);
        let i = sigmoid(&affine(&z, &self.w_i, &self.b_i)?);
        let g = tanh_m(&affine(&z, &self.w_c, &self.b_c)?);
        let o = sigmoid(&affine(&z, &self.w_o, &self.b_o)?);
        let c = f.hadamard(&s.c)?.add(&i.hadamard(&g)?)?;
        let tanh_c = tanh_m(&c);
        let h = o.hadamard(&tanh_c)?;
        let cache = LstmCache {
            z,
            f,
            i,
            g,
            o,
            c_prev: s.c.clone(),
            tanh_c,
        };
        Ok((CellState { h, c }, cache))
    }

    pub fn step_backward(&self, cache: &LstmCache, dh: &Matrix, dc: &Matrix) -> Result<StepGrads<Self>> {
        let shape = cache.o.shape();
        check_upstream(shape, dh)?;
        check_upstream(shape, dc)?;
        let d_o = dh.hadamard(&cache.tanh_c)?;
        // total gradient reaching c_t: direct plus through h_t = o ⊙ tanh(c_t)
        let dc_total = dh
            .hadamard(&cache.o)?
            .zip_map(&cache.tanh_c, |v, t| v * (1.0 - t * t))?
            .add(dc)?;
        let d_f = dc_total.hadamard(&cache.c_prev)?;
        let d_i = dc_total.hadamard(&cache.g)?;
        let d_g = dc_total.hadamard(&cache.i)?;
        let dc_prev = dc_total.hadamard(&cache.f)?;

        let da_f = through_sigmoid(&d_f, &cache.f);
        let da_i = through_sigmoid(&d_i, &cache.i);
        let da_g = through_tanh(&d_g, &cache.g);
        let da_o = through_sigmoid(&d_o, &cache.o);

        let mut dz = da_f.matmul(&self.w_f)?;
        dz.add_assign(&da_i.matmul(&self.w_i)?)?;
        dz.add_assign(&da_g.matmul(&self.w_c)?)?;
        dz.add_assign(&da_o.matmul(&self.w_o)?)?;

        let params = LstmParams {
            hidden: self.hidden,
            input: self.input,
            w_f: da_f.matmul_tn(&cache.z)?,
            w_i: da_i.matmul_tn(&cache.z)?,
            w_c: da_g.matmul_tn(&cache.z)?,
            w_o: da_o.matmul_tn(&cache.z)?,
            b_f: da_f.sum_rows(),
            b_i: da_i.sum_rows(),
            b_c: da_g.sum_rows(),
            b_o: da_o.sum_rows(),
        };
        Ok(StepGrads {
            params,
            dh_prev: dz.col_slice(0..self.hidden),
            dc_prev,
            dx: dz.col_slice(self.hidden..self.hidden + self.input),
        })
    }
}

impl Parameters for LstmParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("w_f".into(), &self.w_f),
            ("w_i".into(), &self.w_i),
            ("w_c".into(), &self.w_c),
            ("w_o".into(), &self.w_o),
            ("b_f".into(), &self.b_f),
            ("b_i".into(), &self.b_i),
            ("b_c".into(), &self.b_c),
            ("b_o".into(), &self.b_o),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("w_f".into(), &mut self.w_f),
            ("w_i".into(), &mut self.w_i),
            ("w_c".into(), &mut self.w_c),
            ("w_o".into(), &mut self.w_o),
            ("b_f".into(), &mut self.b_f),
            ("b_i".into(), &mut self.b_i),
            ("b_c".into(), &mut self.b_c),
            ("b_o".into(), &mut self.b_o),
        ]
    }
}

// ---------------------------------------------------------------- RNN

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnParams {
    pub hidden: usize,
    pub input: usize,
    pub w: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone)]
pub struct RnnCache {
    z: Matrix,
    h: Matrix,
}

impl RnnParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        RnnParams {
            hidden,
            input,
            w: Matrix::zeros(hidden, hidden + input),
            b: Matrix::zeros(1, hidden),
        }
    }

    pub fn init(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(hidden, input);
        p.w = xavier_init(hidden, hidden + input, rng);
        p
    }

    pub fn step(&self, s: &CellState, x: &Matrix) -> Result<(CellState, RnnCache)> {
        check_step_inputs(self.hidden, self.input, s, x)?;
        let z = Matrix::hcat(&[&s.h, x])?;
        let h = tanh_m(&affine(&z, &self.w, &self.b)?);
        let c = Matrix::zeros(h.rows(), h.cols());
        Ok((CellState { h: h.clone(), c }, RnnCache { z, h }))
    }

    pub fn step_backward(&self, cache: &RnnCache, dh: &Matrix, dc: &Matrix) -> Result<StepGrads<Self>> {
        check_upstream(cache.h.shape(), dh)?;
        check_upstream(cache.h.shape(), dc)?;
        let da = through_tanh(dh, &cache.h);
        let dz = da.matmul(&self.w)?;
        Ok(StepGrads {
            params: RnnParams {
                hidden: self.hidden,
                input: self.input,
                w: da.matmul_tn(&cache.z)?,
                b: da.sum_rows(),
            },
            dh_prev: dz.col_slice(0..self.hidden),
            dc_prev: Matrix::zeros(dh.rows(), self.hidden),
            dx: dz.col_slice(self.hidden..self.hidden + self.input),
        })
    }
}

impl Parameters for RnnParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![("w".into(), &self.w), ("b".into(), &self.b)]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![("w".into(), &mut self.w), ("b".into(), &mut self.b)]
    }
}

// ---------------------------------------------------------------- GRU

/// GRU with reset gate `r`, update gate `u` and candidate `n`:
///
/// ```text
/// r  = σ(W_r·[h, x] + b_r)
/// u  = σ(W_u·[h, x] + b_u)
/// n  = tanh(W_n·[r ⊙ h, x] + b_n)
/// h' = (1 − u) ⊙ n + u ⊙ h
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub hidden: usize,
    pub input: usize,
    pub w_r: Matrix,
    pub w_u: Matrix,
    pub w_n: Matrix,
    pub b_r: Matrix,
    pub b_u: Matrix,
    pub b_n: Matrix,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    z: Matrix,
    z_reset: Matrix,
    h_prev: Matrix,
    r: Matrix,
    u: Matrix,
    n: Matrix,
}

impl GruParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = Matrix::zeros(hidden, hidden + input);
        let b = Matrix::zeros(1, hidden);
        GruParams {
            hidden,
            input,
            w_r: w.clone(),
            w_u: w.clone(),
            w_n: w,
            b_r: b.clone(),
            b_u: b.clone(),
            b_n: b,
        }
    }

    pub fn init(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(hidden, input);
        p.w_r = xavier_init(hidden, hidden + input, rng);
        p.w_u = xavier_init(hidden, hidden + input, rng);
        p.w_n = xavier_init(hidden, hidden + input, rng);
        p
    }

    pub fn step(&self, s: &CellState, x: &Matrix) -> Result<(CellState, GruCache)> {
        check_step_inputs(self.hidden, self.input, s, x)?;
        let z = Matrix::hcat(&[&s.h, x])?;
        let r = sigmoid(&affine(&z, &self.w_r, &self.b_r)?);
        let u = sigmoid(&affine(&z, &self.w_u, &self.b_u)?);
        let z_reset = Matrix::hcat(&[&r.hadamard(&s.h)?, x])?;
        let n = tanh_m(&affine(&z_reset, &self.w_n, &self.b_n)?);
        let mut h = n.clone();
        for ((hv, &uv), &hp) in h.as_mut_slice().iter_mut().zip(u.as_slice()).zip(s.h.as_slice()) {
            *hv = (1.0 - uv) * *hv + uv * hp;
        }
        let c = Matrix::zeros(h.rows(), h.cols());
        let cache = GruCache {
            z,
            z_reset,
            h_prev: s.h.clone(),
            r,
            u,
            n,
        };
        Ok((CellState { h, c }, cache))
    }

    pub fn step_backward(&self, cache: &GruCache, dh: &Matrix, dc: &Matrix) -> Result<StepGrads<Self>> {
        check_upstream(cache.n.shape(), dh)?;
        check_upstream(cache.n.shape(), dc)?;
        let hid = self.hidden;
        let du = dh.hadamard(&cache.h_prev.sub(&cache.n)?)?;
        let dn = dh.zip_map(&cache.u, |d, u| d * (1.0 - u))?;
        let mut dh_prev = dh.hadamard(&cache.u)?;

        let da_n = through_tanh(&dn, &cache.n);
        let dz_reset = da_n.matmul(&self.w_n)?;
        let d_rh = dz_reset.col_slice(0..hid);
        let dr = d_rh.hadamard(&cache.h_prev)?;
        dh_prev.add_assign(&d_rh.hadamard(&cache.r)?)?;

        let da_u = through_sigmoid(&du, &cache.u);
        let da_r = through_sigmoid(&dr, &cache.r);
        let mut dz = da_u.matmul(&self.w_u)?;
        dz.add_assign(&da_r.matmul(&self.w_r)?)?;
        dh_prev.add_assign(&dz.col_slice(0..hid))?;
        let mut dx = dz.col_slice(hid..hid + self.input);
        dx.add_assign(&dz_reset.col_slice(hid..hid + self.input))?;

        Ok(StepGrads {
            params: GruParams {
                hidden: hid,
                input: self.input,
                w_r: da_r.matmul_tn(&cache.z)?,
                w_u: da_u.matmul_tn(&cache.z)?,
                w_n: da_n.matmul_tn(&cache.z_reset)?,
                b_r: da_r.sum_rows(),
                b_u: da_u.sum_rows(),
                b_n: da_n.sum_rows(),
            },
            dh_prev,
            dc_prev: Matrix::zeros(dh.rows(), hid),
            dx,
        })
    }
}

impl Parameters for GruParams {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("w_r".into(), &self.w_r),
            ("w_u".into(), &self.w_u),
            ("w_n".into(), &self.w_n),
            ("b_r".into(), &self.b_r),
            ("b_u".into(), &self.b_u),
            ("b_n".into(), &self.b_n),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        vec![
            ("w_r".into(), &mut self.w_r),
            ("w_u".into(), &mut self.w_u),
            ("w_n".into(), &mut self.w_n),
            ("b_r".into(), &mut self.b_r),
            ("b_u".into(), &mut self.b_u),
            ("b_n".into(), &mut self.b_n),
        ]
    }
}

// ---------------------------------------------------------------- runtime dispatch

/// A recurrent cell of any supported type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Recurrent {
    Lstm(LstmParams),
    Rnn(RnnParams),
    Gru(GruParams),
}

#[derive(Debug, Clone)]
pub enum StepCache {
    Lstm(LstmCache),
    Rnn(RnnCache),
    Gru(GruCache),
}

/// Per-timestep caches from a batched sequence run.
#[derive(Debug, Clone)]
pub struct SequenceCache {
    steps: Vec<StepCache>,
    batch: usize,
    seq_len: usize,
}

impl Recurrent {
    pub fn init(cell: CellType, hidden: usize, input: usize, rng: &mut Rng) -> Self {
        match cell {
            CellType::Lstm => Recurrent::Lstm(LstmParams::init(hidden, input, rng)),
            CellType::Rnn => Recurrent::Rnn(RnnParams::init(hidden, input, rng)),
            CellType::Gru => Recurrent::Gru(GruParams::init(hidden, input, rng)),
        }
    }

    pub fn zeros(cell: CellType, hidden: usize, input: usize) -> Self {
        match cell {
            CellType::Lstm => Recurrent::Lstm(LstmParams::zeros(hidden, input)),
            CellType::Rnn => Recurrent::Rnn(RnnParams::zeros(hidden, input)),
            CellType::Gru => Recurrent::Gru(GruParams::zeros(hidden, input)),
        }
    }

    pub fn cell_type(&self) -> CellType {
        match self {
            Recurrent::Lstm(_) => CellType::Lstm,
            Recurrent::Rnn(_) => CellType::Rnn,
            Recurrent::Gru(_) => CellType::Gru,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Recurrent::Lstm(p) => p.hidden,
            Recurrent::Rnn(p) => p.hidden,
            Recurrent::Gru(p) => p.hidden,
        }
    }

    pub fn input(&self) -> usize {
        match self {
            Recurrent::Lstm(p) => p.input,
            Recurrent::Rnn(p) => p.input,
            Recurrent::Gru(p) => p.input,
        }
    }

    pub fn step(&self, s: &CellState, x: &Matrix) -> Result<(CellState, StepCache)> {
        Ok(match self {
            Recurrent::Lstm(p) => {
                let (s, c) = p.step(s, x)?;
                (s, StepCache::Lstm(c))
            }
            Recurrent::Rnn(p) => {
                let (s, c) = p.step(s, x)?;
                (s, StepCache::Rnn(c))
            }
            Recurrent::Gru(p) => {
                let (s, c) = p.step(s, x)?;
                (s, StepCache::Gru(c))
            }
        })
    }

    pub fn step_backward(&self, cache: &StepCache, dh: &Matrix, dc: &Matrix) -> Result<StepGrads<Self>> {
        fn wrap<P>(g: StepGrads<P>, f: impl FnOnce(P) -> Recurrent) -> StepGrads<Recurrent> {
            StepGrads {
                params: f(g.params),
                dh_prev: g.dh_prev,
                dc_prev: g.dc_prev,
                dx: g.dx,
            }
        }
        match (self, cache) {
            (Recurrent::Lstm(p), StepCache::Lstm(c)) => Ok(wrap(p.step_backward(c, dh, dc)?, Recurrent::Lstm)),
            (Recurrent::Rnn(p), StepCache::Rnn(c)) => Ok(wrap(p.step_backward(c, dh, dc)?, Recurrent::Rnn)),
            (Recurrent::Gru(p), StepCache::Gru(c)) => Ok(wrap(p.step_backward(c, dh, dc)?, Recurrent::Gru)),
            _ => Err(Error::InvalidArgument("step cache does not match cell type".into())),
        }
    }

    /// Runs one sequence (`W × D`) from a zero state; row `t` of the result is `h_t`.
    pub fn run_sequence(&self, seq: &Matrix) -> Result<(Matrix, SequenceCache)> {
        self.run_batch(seq, seq.rows())
    }

    /// Runs `B` sequences stacked sample-major (`row = b·W + t`) from zero state.
    ///
    /// Returns hidden states in the same stacked layout (`B·W × H`).
    pub fn run_batch(&self, stacked: &Matrix, seq_len: usize) -> Result<(Matrix, SequenceCache)> {
        if seq_len == 0 || !stacked.rows().is_multiple_of(seq_len) || stacked.cols() != self.input() {
            return Err(Error::Shape {
                op: "run_batch",
                left: stacked.shape(),
                right: (seq_len, self.input()),
            });
        }
        let batch = stacked.rows() / seq_len;
        let hidden = self.hidden();
        let mut state = CellState::zeros(batch, hidden);
        let mut out = Matrix::zeros(batch * seq_len, hidden);
        let mut steps = Vec::with_capacity(seq_len);
        for t in 0..seq_len {
            let x = stacked.select_rows((0..batch).map(|b| b * seq_len + t));
            let (next, cache) = self.step(&state, &x)?;
            for b in 0..batch {
                out.row_mut(b * seq_len + t).copy_from_slice(next.h.row(b));
            }
            steps.push(cache);
            state = next;
        }
        Ok((out, SequenceCache { steps, batch, seq_len }))
    }

    /// Backpropagation through time given `dL/dh_t` for every stacked row.
    ///
    /// Returns the parameter gradients and `dL/dx` in the stacked input layout.
    pub fn backward_batch(&self, cache: &SequenceCache, d_hidden: &Matrix) -> Result<(Recurrent, Matrix)> {
        let (batch, seq_len, hidden) = (cache.batch, cache.seq_len, self.hidden());
        if d_hidden.shape() != (batch * seq_len, hidden) {
            return Err(Error::Shape {
                op: "backward_batch",
                left: (batch * seq_len, hidden),
                right: d_hidden.shape(),
            });
        }
        let mut grads = Recurrent::zeros(self.cell_type(), hidden, self.input());
        let mut dx_all = Matrix::zeros(batch * seq_len, self.input());
        let mut dh_next = Matrix::zeros(batch, hidden);
        let mut dc_next = Matrix::zeros(batch, hidden);
        for t in (0..seq_len).rev() {
            let mut dh = d_hidden.select_rows((0..batch).map(|b| b * seq_len + t));
            dh.add_assign(&dh_next)?;
            let step = self.step_backward(&cache.steps[t], &dh, &dc_next)?;
            accumulate(&mut grads, &step.params);
            for b in 0..batch {
                dx_all.row_mut(b * seq_len + t).copy_from_slice(step.dx.row(b));
            }
            dh_next = step.dh_prev;
            dc_next = step.dc_prev;
        }
        Ok((grads, dx_all))
    }
}

impl Parameters for Recurrent {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        match self {
            Recurrent::Lstm(p) => p.blocks(),
            Recurrent::Rnn(p) => p.blocks(),
            Recurrent::Gru(p) => p.blocks(),
        }
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        match self {
            Recurrent::Lstm(p) => p.blocks_mut(),
            Recurrent::Rnn(p) => p.blocks_mut(),
            Recurrent::Gru(p) => p.blocks_mut(),
        }
    }
}

/// `dst += src` block by block. Both bundles must have the same structure.
pub fn accumulate<P: Parameters + ?Sized>(dst: &mut P, src: &P) {
    for ((_, d), (_, s)) in dst.blocks_mut().into_iter().zip(src.blocks()) {
        d.add_assign(s).expect("congruent parameter bundles");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_core::{grad_check, sigmoid_scalar};

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn randomize<P: Parameters>(p: &mut P, rng: &mut Rng) {
        for (_, m) in p.blocks_mut() {
            for v in m.as_mut_slice() {
                *v = rng.uniform(-0.8, 0.8);
            }
        }
    }

    /// Scalar evaluation of the LSTM gate equations for one sample.
    fn lstm_scalar(p: &LstmParams, h: &[f64], c: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z: Vec<f64> = h.iter().chain(x).copied().collect();
        let gate = |w: &Matrix, b: &Matrix, j: usize| {
            let mut s = b[(0, j)];
            for (k, zk) in z.iter().enumerate() {
                s += w[(j, k)] * zk;
            }
            s
        };
        let mut h_out = vec![0.0; p.hidden];
        let mut c_out = vec![0.0; p.hidden];
        for j in 0..p.hidden {
            let f = sigmoid_scalar(gate(&p.w_f, &p.b_f, j));
            let i = sigmoid_scalar(gate(&p.w_i, &p.b_i, j));
            let g = gate(&p.w_c, &p.b_c, j).tanh();
            let o = sigmoid_scalar(gate(&p.w_o, &p.b_o, j));
            c_out[j] = f * c[j] + i * g;
            h_out[j] = o * c_out[j].tanh();
        }
        (h_out, c_out)
    }

    #[test]
    fn zero_lstm_gives_half_gates_and_zero_state() {
        let p = LstmParams::zeros(3, 2);
        let (s, cache) = p
            .step(&CellState::zeros(1, 3), &Matrix::row_vector(&[4.0, -2.0]))
            .unwrap();
        assert!(cache.f.as_slice().iter().all(|&v| v == 0.5));
        assert!(cache.i.as_slice().iter().all(|&v| v == 0.5));
        assert!(cache.o.as_slice().iter().all(|&v| v == 0.5));
        assert!(cache.g.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(s, CellState::zeros(1, 3));
    }

    #[test]
    fn open_forget_gate_preserves_memory() {
        let mut p = LstmParams::zeros(2, 1);
        p.b_f = Matrix::filled(1, 2, 20.0);
        let state = CellState {
            h: Matrix::zeros(1, 2),
            c: Matrix::filled(1, 2, 1.0),
        };
        let (s, _) = p.step(&state, &Matrix::row_vector(&[0.3])).unwrap();
        for &c in s.c.as_slice() {
            assert!((c - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn lstm_step_matches_scalar_oracle() {
        let mut rng = Rng::new(11);
        let p = {
            let mut p = LstmParams::zeros(4, 3);
            randomize(&mut p, &mut rng);
            p
        };
        let h = random(1, 4, &mut rng);
        let c = random(1, 4, &mut rng);
        let x = random(1, 3, &mut rng);
        let (s, _) = p
            .step(
                &CellState {
                    h: h.clone(),
                    c: c.clone(),
                },
                &x,
            )
            .unwrap();
        let (h_ref, c_ref) = lstm_scalar(&p, h.as_slice(), c.as_slice(), x.as_slice());
        for j in 0..4 {
            assert!((s.h[(0, j)] - h_ref[j]).abs() < 1e-12);
            assert!((s.c[(0, j)] - c_ref[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = LstmParams::zeros(3, 2);
        assert!(p.step(&CellState::zeros(1, 3), &Matrix::zeros(1, 5)).is_err());
        assert!(RnnParams::zeros(3, 2)
            .step(&CellState::zeros(1, 2), &Matrix::zeros(1, 2))
            .is_err());
    }

    /// Scalar loss `Σ h_t ⊙ wh + Σ c_t ⊙ wc` over one step, with every
    /// differentiable input packed as `[params, h_prev, c_prev, x]`.
    fn step_grad_check(cell: CellType, hidden: usize, input: usize, batch: usize, seed: u64) -> f64 {
        let mut rng = Rng::new(seed);
        let mut cellp = Recurrent::zeros(cell, hidden, input);
        randomize(&mut cellp, &mut rng);
        let h0 = random(batch, hidden, &mut rng);
        let c0 = if cell == CellType::Lstm {
            random(batch, hidden, &mut rng)
        } else {
            Matrix::zeros(batch, hidden)
        };
        let x = random(batch, input, &mut rng);
        let wh = random(batch, hidden, &mut rng);
        let wc = if cell == CellType::Lstm {
            random(batch, hidden, &mut rng)
        } else {
            Matrix::zeros(batch, hidden)
        };

        let n_params = cellp.num_params();
        let pack = |p: &Recurrent, h: &Matrix, c: &Matrix, x: &Matrix| -> Vec<f64> {
            let mut v = p.flatten();
            v.extend_from_slice(h.as_slice());
            v.extend_from_slice(c.as_slice());
            v.extend_from_slice(x.as_slice());
            v
        };
        let loss = |theta: &[f64]| -> f64 {
            let mut p = cellp.clone();
            p.assign_flat(&theta[..n_params]);
            let mut off = n_params;
            let mut take = |r: usize, c: usize| {
                let m = Matrix::from_vec(r, c, theta[off..off + r * c].to_vec()).unwrap();
                off += r * c;
                m
            };
            let h = take(batch, hidden);
            let c = take(batch, hidden);
            let xx = take(batch, input);
            let (s, _) = p.step(&CellState { h, c }, &xx).unwrap();
            s.h.hadamard(&wh).unwrap().sum() + s.c.hadamard(&wc).unwrap().sum()
        };

        let state = CellState {
            h: h0.clone(),
            c: c0.clone(),
        };
        let (_, cache) = cellp.step(&state, &x).unwrap();
        let g = cellp.step_backward(&cache, &wh, &wc).unwrap();
        let analytic = pack(&g.params, &g.dh_prev, &g.dc_prev, &g.dx);
        let mut theta = pack(&cellp, &h0, &c0, &x);
        grad_check(loss, &mut theta, &analytic, 1e-5).unwrap()
    }

    #[test]
    fn lstm_step_backward_passes_grad_check() {
        let err = step_grad_check(CellType::Lstm, 3, 2, 1, 1);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rnn_and_gru_backward_pass_grad_check() {
        for cell in [CellType::Rnn, CellType::Gru] {
            let err = step_grad_check(cell, 3, 2, 1, 2);
            assert!(err < 1e-6, "{cell}: {err}");
        }
    }

    #[test]
    fn batched_step_backward_passes_grad_check() {
        for (i, cell) in CellType::ALL.into_iter().enumerate() {
            let err = step_grad_check(cell, 5, 4, 3, 10 + i as u64);
            assert!(err < 1e-6, "{cell}: {err}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(4);
        for cell in CellType::ALL {
            let p = Recurrent::init(cell, 3, 2, &mut rng);
            let (_, cache) = p.step(&CellState::zeros(2, 3), &random(2, 2, &mut rng)).unwrap();
            let g = p
                .step_backward(&cache, &Matrix::zeros(2, 3), &Matrix::zeros(2, 3))
                .unwrap();
            assert!(g.params.flatten().iter().all(|&v| v == 0.0));
            assert!(g.dx.as_slice().iter().all(|&v| v == 0.0));
            assert!(g.dh_prev.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradients_of_independent_steps_add() {
        let mut rng = Rng::new(8);
        let p = Recurrent::init(CellType::Lstm, 3, 2, &mut rng);
        let x1 = random(1, 2, &mut rng);
        let x2 = random(1, 2, &mut rng);
        let dh = random(1, 3, &mut rng);
        let dc = Matrix::zeros(1, 3);
        let g = |x: &Matrix| {
            let (_, c) = p.step(&CellState::zeros(1, 3), x).unwrap();
            p.step_backward(&c, &dh, &dc).unwrap().params
        };
        let mut sum = g(&x1);
        accumulate(&mut sum, &g(&x2));
        // the same two samples as one batch give the summed gradient
        let both = Matrix::vcat(&[&x1, &x2]).unwrap();
        let (_, c) = p.step(&CellState::zeros(2, 3), &both).unwrap();
        let dh2 = Matrix::vcat(&[&dh, &dh]).unwrap();
        let batched = p.step_backward(&c, &dh2, &Matrix::zeros(2, 3)).unwrap().params;
        for (a, b) in sum.flatten().iter().zip(batched.flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_params_give_zero_hidden_for_all_cells() {
        let mut rng = Rng::new(2);
        let seq = random(4, 3, &mut rng);
        for cell in CellType::ALL {
            let (h, _) = Recurrent::zeros(cell, 5, 3).run_sequence(&seq).unwrap();
            assert!(h.as_slice().iter().all(|&v| v == 0.0), "{cell}");
        }
    }

    #[test]
    fn saturated_update_gate_copies_hidden_state() {
        let mut rng = Rng::new(6);
        let mut p = GruParams::init(4, 3, &mut rng);
        p.b_u = Matrix::filled(1, 4, 30.0);
        let h = random(1, 4, &mut rng);
        let (s, _) = p
            .step(
                &CellState {
                    h: h.clone(),
                    c: Matrix::zeros(1, 4),
                },
                &random(1, 3, &mut rng),
            )
            .unwrap();
        for j in 0..4 {
            assert!((s.h[(0, j)] - h[(0, j)]).abs() < 1e-10);
        }
    }

    #[test]
    fn run_sequence_equals_chained_steps() {
        let mut rng = Rng::new(21);
        let seq = random(3, 2, &mut rng);
        for cell in CellType::ALL {
            let p = Recurrent::init(cell, 4, 2, &mut rng);
            let (all, _) = p.run_sequence(&seq).unwrap();
            let mut s = CellState::zeros(1, 4);
            for t in 0..3 {
                s = p.step(&s, &seq.row_slice(t..t + 1)).unwrap().0;
                assert_eq!(all.row(t), s.h.row(0));
            }
        }
        let p = Recurrent::init(CellType::Lstm, 4, 2, &mut rng);
        let one = seq.row_slice(0..1);
        let (all, _) = p.run_sequence(&one).unwrap();
        let (s, _) = p.step(&CellState::zeros(1, 4), &one).unwrap();
        assert_eq!(all.row(0), s.h.row(0));
    }

    #[test]
    fn bptt_passes_grad_check() {
        for (i, cell) in CellType::ALL.into_iter().enumerate() {
            let mut rng = Rng::new(30 + i as u64);
            let p = Recurrent::init(cell, 4, 3, &mut rng);
            let (batch, w) = (2, 4);
            let x = random(batch * w, 3, &mut rng);
            let weights = random(batch * w, 4, &mut rng);
            let loss = |p: &Recurrent, x: &Matrix| {
                let (h, _) = p.run_batch(x, w).unwrap();
                h.hadamard(&weights).unwrap().sum()
            };
            let (_, cache) = p.run_batch(&x, w).unwrap();
            let (g, dx) = p.backward_batch(&cache, &weights).unwrap();
            let n = p.num_params();
            let mut theta = p.flatten();
            theta.extend_from_slice(x.as_slice());
            let mut analytic = g.flatten();
            analytic.extend_from_slice(dx.as_slice());
            let err = grad_check(
                |t| {
                    let mut q = p.clone();
                    q.assign_flat(&t[..n]);
                    let xx = Matrix::from_vec(batch * w, 3, t[n..].to_vec()).unwrap();
                    loss(&q, &xx)
                },
                &mut theta,
                &analytic,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{cell}: {err}");
        }
    }

    mod props {
        use super::*;
        use crate::nn_core::Rng;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn lstm_state_bounds(seed in 0u64..10_000, hidden in 1usize..8, input in 1usize..8) {
                let mut rng = Rng::new(seed);
                let p = LstmParams::init(hidden, input, &mut rng);
                let mut s = CellState { h: random(1, hidden, &mut rng), c: random(1, hidden, &mut rng).scale(3.0) };
                for _ in 0..5 {
                    let x = random(1, input, &mut rng).scale(5.0);
                    let (next, _) = p.step(&s, &x).unwrap();
                    for j in 0..hidden {
                        prop_assert!(next.c[(0, j)].abs() <= s.c[(0, j)].abs() + 1.0);
                        prop_assert!(next.h[(0, j)].abs() < 1.0);
                    }
                    s = next;
                }
            }

            #[test]
            fn every_cell_passes_bptt_grad_check(
                seed in 0u64..10_000,
                hidden in 1usize..=8,
                input in 1usize..=8,
                w in 1usize..=5,
                cell_idx in 0usize..3,
            ) {
                let cell = CellType::ALL[cell_idx];
                let mut rng = Rng::new(seed);
                let p = Recurrent::init(cell, hidden, input, &mut rng);
                let x = random(w, input, &mut rng);
                let weights = random(w, hidden, &mut rng);
                let (_, cache) = p.run_sequence(&x).unwrap();
                let (g, _) = p.backward_batch(&cache, &weights).unwrap();
                let mut theta = p.flatten();
                let err = grad_check(
                    |t| {
                        let mut q = p.clone();
                        q.assign_flat(t);
                        q.run_sequence(&x).unwrap().0.hadamard(&weights).unwrap().sum()
                    },
                    &mut theta,
                    &g.flatten(),
                    1e-5,
                ).unwrap();
                prop_assert!(err < 1e-4, "{} err {}", cell, err);
            }
        }
    }
}
