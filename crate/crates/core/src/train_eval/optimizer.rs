use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn_core::{Matrix, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Maximum global L2 norm of the gradient; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: None,
        }
    }
}

/// First-order optimizer with per-parameter Adam moments.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                config.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if !(config.epsilon > 0.0 && config.epsilon.is_finite()) {
            return Err(Error::InvalidArgument("Adam epsilon must be > 0".into()));
        }
        if let Some(c) = config.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!("grad clip must be > 0, got {c}")));
            }
        }
        Ok(Optimizer {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters are untouched if any gradient is non-finite.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grad_blocks = grads.blocks();
        let mut norm_sq = 0.0;
        for (name, g) in &grad_blocks {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            norm_sq += g.norm_sq();
        }
        let scale = match self.config.grad_clip {
            Some(max) if norm_sq.sqrt() > max => max / norm_sq.sqrt(),
            _ => 1.0,
        };
        let mut param_blocks = params.blocks_mut();
        if param_blocks.len() != grad_blocks.len() {
            return Err(Error::InvalidArgument(
                "gradient bundle does not mirror the parameters".into(),
            ));
        }
        for ((_, p), (_, g)) in param_blocks.iter().zip(&grad_blocks) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        self.step += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for ((_, p), (_, g)) in param_blocks.iter_mut().zip(&grad_blocks) {
                    for (w, &gv) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *w -= lr * scale * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grad_blocks
                        .iter()
                        .map(|(_, g)| Matrix::zeros(g.rows(), g.cols()))
                        .collect();
                    self.v = self.m.clone();
                }
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.epsilon);
                let t = self.step as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (k, ((_, p), (_, g))) in param_blocks.iter_mut().zip(&grad_blocks).enumerate() {
                    let m = self.m[k].as_mut_slice();
                    let v = self.v[k].as_mut_slice();
                    for (j, (w, &gv)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                        let gs = gv * scale;
                        m[j] = b1 * m[j] + (1.0 - b1) * gs;
                        v[j] = b2 * v[j] + (1.0 - b2) * gs * gs;
                        *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
