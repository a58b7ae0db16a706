use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{binary_collapse, confusion, metrics_from_confusion, EvalMode, EvalReport, BINARY_CLASS_NAMES};
use super::optimizer::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::features::{batch, SequenceSample};
use crate::model::{cross_entropy_logit_grad, EcNetModel, Upstream};
use crate::nn_core::{Matrix, Rng};

/// Probability floor inside the log of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub grad_clip: Option<f64>,
    /// Stop after this many epochs without a validation-accuracy improvement.
    pub early_stop_patience: Option<usize>,
    /// Drives the per-epoch shuffling order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = OptimizerConfig::default();
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: opt.learning_rate,
            optimizer: opt.kind,
            beta1: opt.beta1,
            beta2: opt.beta2,
            epsilon: opt.epsilon,
            grad_clip: None,
            early_stop_patience: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be > 0 (got {})", self.learning_rate));
        }
        if self.early_stop_patience == Some(0) {
            problems.push("early_stop_patience must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            grad_clip: self.grad_clip,
        }
    }
}

/// Mean cross-entropy with `p` clamped at [`PROB_FLOOR`], and its gradient
/// w.r.t. the logits, `(p − onehot) / B`.
pub fn cross_entropy(probs: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    let grad = cross_entropy_logit_grad(probs, targets)?;
    let loss = -targets
        .iter()
        .enumerate()
        .map(|(r, &t)| probs[(r, t)].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / targets.len().max(1) as f64;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EcNetModel,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept when early stopping was active.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

fn check_samples(model: &EcNetModel, samples: &[SequenceSample], what: &str) -> Result<()> {
    let (dn, dc) = (model.schema.numeric_width(), model.schema.categorical_width());
    for (i, s) in samples.iter().enumerate() {
        if s.numeric.cols() != dn || s.categorical.cols() != dc {
            return Err(Error::Incompatible(format!(
                "{what} sample {i} has channel widths ({}, {}), model expects ({dn}, {dc})",
                s.numeric.cols(),
                s.categorical.cols()
            )));
        }
        if s.target >= model.config.n_classes {
            return Err(Error::ClassOutOfRange {
                id: s.target,
                n_classes: model.config.n_classes,
            });
        }
    }
    Ok(())
}

pub fn accuracy(model: &EcNetModel, samples: &[SequenceSample]) -> Result<f64> {
    let (preds, _) = model.predict(samples)?;
    let correct = preds.iter().zip(samples).filter(|(p, s)| **p == s.target).count();
    Ok(correct as f64 / samples.len().max(1) as f64)
}

/// Minibatch training. Deterministic given the model's initial parameters
/// and `config.seed`.
pub fn train(
    mut model: EcNetModel,
    train_set: &[SequenceSample],
    val_set: &[SequenceSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    check_samples(&model, train_set, "training")?;
    check_samples(&model, val_set, "validation")?;
    let patience = match (config.early_stop_patience, val_set.is_empty()) {
        (Some(_), true) => {
            log::warn!("early stopping disabled: no validation samples");
            None
        }
        (p, _) => p,
    };
    let mut optimizer = Optimizer::new(config.optimizer_config())?;
    let mut order_rng = Rng::new(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, crate::model::EcNetParams)> = None;
    let mut stopped_early = false;
    for epoch in 1..=config.epochs {
        let batches = batch(train_set, config.batch_size, order_rng.next_u64(), true)?;
        let mut loss_sum = 0.0;
        for (b, mb) in batches.iter().enumerate() {
            let (probs, mut cache) = model.forward(mb)?;
            let (loss, d_logits) = cross_entropy(&probs, &mb.targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            loss_sum += loss * mb.len() as f64;
            let grads = model.backward(&mut cache, Upstream::Logits(&d_logits))?;
            optimizer.step(&mut model.params, &grads)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_accuracy = if val_set.is_empty() {
            None
        } else {
            Some(accuracy(&model, val_set)?)
        };
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.6} val_accuracy {}",
            val_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        });
        if let (Some(patience), Some(acc)) = (patience, val_accuracy) {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.params.clone()));
            } else if epoch - best.as_ref().map_or(0, |(_, e, _)| *e) >= patience {
                stopped_early = true;
                break;
            }
        }
    }
    let best_epoch = best.map(|(_, epoch, params)| {
        model.params = params;
        epoch
    });
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        stopped_early,
    })
}

/// Predicts `samples` and scores them, optionally after benign/malicious collapse.
pub fn evaluate(model: &EcNetModel, samples: &[SequenceSample], binary: bool) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    check_samples(model, samples, "evaluation")?;
    let (preds, _) = model.predict(samples)?;
    let truth: Vec<usize> = samples.iter().map(|s| s.target).collect();
    if binary {
        let cm = confusion(
            &binary_collapse(&model.vocab, &preds)?,
            &binary_collapse(&model.vocab, &truth)?,
            2,
        )?;
        let names: Vec<String> = BINARY_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
        let mut report = metrics_from_confusion(&cm, &names)?;
        report.mode = EvalMode::Binary;
        Ok(report)
    } else {
        let cm = confusion(&preds, &truth, model.config.n_classes)?;
        metrics_from_confusion(&cm, model.vocab.names())
    }
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn save_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_history_csv(history, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_core::grad_check;

    #[test]
    fn cross_entropy_closed_forms() {
        let (loss, _) = cross_entropy(&Matrix::filled(3, 4, 0.25), &[0, 1, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((loss - 1.3862944).abs() < 1e-7);
        let one_hot = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let (loss, _) = cross_entropy(&one_hot, &[1, 0]).unwrap();
        assert!(loss <= 1e-11);
        // clamped at the floor instead of −ln 0 = ∞
        let (loss, _) = cross_entropy(&one_hot, &[0, 0]).unwrap();
        assert!((loss - (-PROB_FLOOR.ln()) / 2.0).abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&one_hot, &[2, 0]),
            Err(Error::ClassOutOfRange { id: 2, .. })
        ));
    }

    #[test]
    fn fused_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let mut logits: Vec<f64> = (0..12).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let targets = [0, 3, 2];
        let loss = |l: &[f64]| {
            let probs = crate::nn_core::softmax_rows(&Matrix::from_vec(3, 4, l.to_vec()).unwrap());
            cross_entropy(&probs, &targets).unwrap().0
        };
        let probs = crate::nn_core::softmax_rows(&Matrix::from_vec(3, 4, logits.clone()).unwrap());
        let (_, grad) = cross_entropy(&probs, &targets).unwrap();
        let err = grad_check(loss, &mut logits, grad.as_slice(), 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            learning_rate: -1.0,
            ..Default::default()
        };
        match bad.validate() {
            Err(Error::Config(list)) => assert_eq!(list.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn history_csv_layout() {
        let h = vec![
            EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_accuracy: Some(0.75),
            },
            EpochRecord {
                epoch: 2,
                train_loss: 0.25,
                val_accuracy: None,
            },
        ];
        let mut buf = Vec::new();
        write_history_csv(&h, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,val_accuracy\n1,0.5,0.75\n2,0.25,\n"
        );
    }
}
