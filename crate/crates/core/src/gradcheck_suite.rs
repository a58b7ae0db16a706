//! Finite-difference verification of every hand-written backward pass, on
//! small seeded configurations.

use serde::Serialize;

use crate::attention::AttentionParams;
use crate::error::Result;
use crate::features::{CategoricalColumn, FeatureSchema, NumericColumn, SequenceBatch, SCHEMA_VERSION};
use crate::flow_ingest::LabelVocab;
use crate::model::{build_model, fc_backward, fc_forward, Dense, FeatureMode, ModelConfig, Upstream};
use crate::nn_core::{grad_check, softmax_rows, xavier_init, Matrix, Parameters, Rng};
use crate::recurrent::{CellState, CellType, Recurrent};
use crate::train_eval::cross_entropy;

/// Pass threshold on the maximum relative error.
pub const THRESHOLD: f64 = 1e-4;

/// Default seed for the stock suite.
pub const DEFAULT_SEED: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentResult {
    pub name: String,
    pub n_params: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub eps: f64,
    pub seed: u64,
    pub threshold: f64,
    pub components: Vec<ComponentResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }
}

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized data")
}

fn flat_of(parts: &[&Matrix]) -> Vec<f64> {
    parts.iter().flat_map(|m| m.as_slice().iter().copied()).collect()
}

/// Splits `flat` back into matrices shaped like `shapes`.
fn unflatten(flat: &[f64], shapes: &[(usize, usize)]) -> Vec<Matrix> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for &(r, c) in shapes {
        out.push(Matrix::from_vec(r, c, flat[offset..offset + r * c].to_vec()).expect("sized slice"));
        offset += r * c;
    }
    out
}

fn weighted_sum(m: &Matrix, w: &Matrix) -> f64 {
    m.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
}

fn finish(
    name: &str,
    f: impl FnMut(&[f64]) -> f64,
    mut theta: Vec<f64>,
    mut analytic: Vec<f64>,
    eps: f64,
    inject: bool,
) -> Result<ComponentResult> {
    if inject {
        analytic.iter_mut().for_each(|g| *g = -*g);
    }
    let err = grad_check(f, &mut theta, &analytic, eps)?;
    Ok(ComponentResult {
        name: name.to_string(),
        n_params: theta.len(),
        max_rel_error: err,
        passed: err < THRESHOLD,
    })
}

/// One cell step under the loss `Σ Rh ⊙ h' + Σ Rc ⊙ c'`, probing parameters,
/// the input and both incoming states.
fn cell_step(cell: CellType, eps: f64, rng: &mut Rng, inject: bool) -> Result<ComponentResult> {
    let (b, h, d) = (2, 4, 3);
    let params = Recurrent::init(cell, h, d, rng);
    // non-zero biases so every gate is exercised away from its symmetric point
    let mut params = params;
    for (name, m) in params.blocks_mut() {
        if name.starts_with('b') {
            *m = random(m.rows(), m.cols(), rng).scale(0.5);
        }
    }
    let x = random(b, d, rng);
    let state = CellState {
        h: random(b, h, rng),
        c: random(b, h, rng),
    };
    let (rh, rc) = (random(b, h, rng), random(b, h, rng));
    let (_, cache) = params.step(&state, &x)?;
    let g = params.step_backward(&cache, &rh, &rc)?;
    let n = params.num_params();
    let mut theta = params.flatten();
    theta.extend(flat_of(&[&x, &state.h, &state.c]));
    let mut analytic = g.params.flatten();
    analytic.extend(flat_of(&[&g.dx, &g.dh_prev, &g.dc_prev]));
    let mut probe = params.clone();
    let f = |t: &[f64]| {
        probe.assign_flat(&t[..n]);
        let m = unflatten(&t[n..], &[(b, d), (b, h), (b, h)]);
        let s = CellState {
            h: m[1].clone(),
            c: m[2].clone(),
        };
        let (next, _) = probe.step(&s, &m[0]).expect("shapes fixed");
        weighted_sum(&next.h, &rh) + weighted_sum(&next.c, &rc)
    };
    finish(&format!("{cell}_step"), f, theta, analytic, eps, inject)
}

/// Batched BPTT through a whole sequence under `Σ R ⊙ H`.
fn cell_sequence(cell: CellType, eps: f64, rng: &mut Rng) -> Result<ComponentResult> {
    let (b, w, h, d) = (2, 4, 3, 2);
    let params = Recurrent::init(cell, h, d, rng);
    let x = random(b * w, d, rng);
    let r = random(b * w, h, rng);
    let (_, cache) = params.run_batch(&x, w)?;
    let (g, dx) = params.backward_batch(&cache, &r)?;
    let n = params.num_params();
    let mut theta = params.flatten();
    theta.extend_from_slice(x.as_slice());
    let mut analytic = g.flatten();
    analytic.extend_from_slice(dx.as_slice());
    let mut probe = params.clone();
    let f = |t: &[f64]| {
        probe.assign_flat(&t[..n]);
        let xs = Matrix::from_vec(b * w, d, t[n..].to_vec()).expect("sized");
        weighted_sum(&probe.run_batch(&xs, w).expect("shapes fixed").0, &r)
    };
    finish(&format!("{cell}_bptt"), f, theta, analytic, eps, false)
}

fn attention(heads: usize, eps: f64, rng: &mut Rng) -> Result<ComponentResult> {
    let (b, w, h_in, d_k) = (2, 3, 5, 4);
    let params = AttentionParams::init(h_in, d_k, heads, rng)?;
    let hidden = random(b * w, h_in, rng);
    let r = random(b * w, d_k, rng);
    let (_, cache) = params.forward(&hidden, w)?;
    let (g, dh) = params.backward(&cache, &r)?;
    let n = params.num_params();
    let mut theta = params.flatten();
    theta.extend_from_slice(hidden.as_slice());
    let mut analytic = g.flatten();
    analytic.extend_from_slice(dh.as_slice());
    let mut probe = params.clone();
    let f = |t: &[f64]| {
        probe.assign_flat(&t[..n]);
        let hs = Matrix::from_vec(b * w, h_in, t[n..].to_vec()).expect("sized");
        weighted_sum(&probe.forward(&hs, w).expect("shapes fixed").0, &r)
    };
    finish(&format!("attention_{heads}head"), f, theta, analytic, eps, false)
}

/// Two-layer tanh head, softmax and mean cross-entropy.
fn fc_softmax_ce(eps: f64, rng: &mut Rng) -> Result<ComponentResult> {
    let (b, d_in, hidden, classes) = (3, 5, 6, 4);
    let fc = vec![
        Dense {
            w: xavier_init(hidden, d_in, rng),
            b: random(1, hidden, rng).scale(0.5),
        },
        Dense {
            w: xavier_init(classes, hidden, rng),
            b: random(1, classes, rng).scale(0.5),
        },
    ];
    let input = random(b, d_in, rng);
    let targets: Vec<usize> = (0..b).map(|_| rng.below(classes)).collect();
    let (logits, acts) = fc_forward(&fc, input.clone())?;
    let (_, d_logits) = cross_entropy(&softmax_rows(&logits), &targets)?;
    let (grads, d_input) = fc_backward(&fc, &acts, &d_logits)?;
    let shapes: Vec<(usize, usize)> = fc.iter().flat_map(|l| [l.w.shape(), l.b.shape()]).collect();
    let mut theta: Vec<f64> = fc.iter().flat_map(|l| flat_of(&[&l.w, &l.b])).collect();
    theta.extend_from_slice(input.as_slice());
    let mut analytic: Vec<f64> = grads.iter().flat_map(|l| flat_of(&[&l.w, &l.b])).collect();
    analytic.extend_from_slice(d_input.as_slice());
    let n: usize = shapes.iter().map(|(r, c)| r * c).sum();
    let f = |t: &[f64]| {
        let m = unflatten(&t[..n], &shapes);
        let layers: Vec<Dense> = m
            .chunks(2)
            .map(|p| Dense {
                w: p[0].clone(),
                b: p[1].clone(),
            })
            .collect();
        let x = Matrix::from_vec(b, d_in, t[n..].to_vec()).expect("sized");
        let (z, _) = fc_forward(&layers, x).expect("shapes fixed");
        cross_entropy(&softmax_rows(&z), &targets).expect("valid targets").0
    };
    finish("fc_softmax_ce", f, theta, analytic, eps, false)
}

fn tiny_schema() -> FeatureSchema {
    FeatureSchema {
        version: SCHEMA_VERSION,
        numeric: (0..3)
            .map(|i| NumericColumn {
                name: format!("n{i}"),
                mean: 0.0,
                std: 1.0,
            })
            .collect(),
        categorical: vec![CategoricalColumn {
            name: "c".into(),
            values: vec!["a".into(), "b".into()],
        }],
        window: 3,
        stride: 1,
    }
}

/// Full model, tiny config: H = 4 per branch, d_k = 4, W = 3, B = 2.
fn ecnet_full(cell: CellType, eps: f64, rng: &mut Rng) -> Result<ComponentResult> {
    let (b, w, classes) = (2, 3, 3);
    let schema = tiny_schema();
    let vocab = LabelVocab::from_names((0..classes).map(|i| format!("c{i}")).collect(), vec![1; classes])?;
    let config = ModelConfig {
        cell_type: cell,
        use_attention: true,
        feature_mode: FeatureMode::Separate,
        hidden_numeric: 4,
        hidden_categorical: 4,
        d_k: 4,
        heads: 1,
        fc_sizes: vec![5],
        n_classes: classes,
        ..Default::default()
    };
    let model = build_model(&config, &schema, &vocab, rng)?;
    let numeric = random(b * w, schema.numeric_width(), rng);
    let mut categorical = Matrix::zeros(b * w, schema.categorical_width());
    for r in 0..b * w {
        categorical[(r, rng.below(schema.categorical_width()))] = 1.0;
    }
    let batch = SequenceBatch {
        numeric,
        categorical,
        targets: (0..b).map(|_| rng.below(classes)).collect(),
        seq_len: w,
    };
    let (_, mut cache) = model.forward(&batch)?;
    let analytic = model.backward(&mut cache, Upstream::Targets(&batch.targets))?.flatten();
    let theta = model.params.flatten();
    let mut probe = model.clone();
    let f = |t: &[f64]| {
        probe.params.assign_flat(t);
        let (p, _) = probe.forward(&batch).expect("shapes fixed");
        cross_entropy(&p, &batch.targets).expect("valid targets").0
    };
    finish(&format!("ecnet_{cell}"), f, theta, analytic, eps, false)
}

/// Runs every component. `inject_sign_error` negates the LSTM step's
/// analytic gradient, which must make the suite fail.
pub fn run_suite(eps: f64, seed: u64, inject_sign_error: bool) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed);
    let mut components = Vec::new();
    for cell in CellType::ALL {
        components.push(cell_step(
            cell,
            eps,
            &mut rng,
            inject_sign_error && cell == CellType::Lstm,
        )?);
    }
    for cell in CellType::ALL {
        components.push(cell_sequence(cell, eps, &mut rng)?);
    }
    components.push(attention(1, eps, &mut rng)?);
    components.push(attention(2, eps, &mut rng)?);
    components.push(fc_softmax_ce(eps, &mut rng)?);
    for cell in CellType::ALL {
        components.push(ecnet_full(cell, eps, &mut rng)?);
    }
    Ok(SuiteReport {
        eps,
        seed,
        threshold: THRESHOLD,
        components,
    })
}
