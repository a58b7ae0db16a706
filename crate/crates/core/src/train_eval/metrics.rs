use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow_ingest::LabelVocab;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Counts indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes).map(|c| self.counts[c][c]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    /// Adds another matrix's counts; order-independent.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes != self.n_classes {
            return Err(Error::InvalidArgument(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.n_classes, other.n_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(preds: &[usize], truth: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if preds.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} truth labels",
            preds.len(),
            truth.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(n_classes);
    for (&p, &t) in preds.iter().zip(truth) {
        for id in [p, t] {
            if id >= n_classes {
                return Err(Error::ClassOutOfRange { id, n_classes });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

/// Maps benign to 0 and every other class to 1.
pub fn binary_collapse(vocab: &LabelVocab, ids: &[usize]) -> Result<Vec<usize>> {
    let benign = vocab.benign_id()?;
    Ok(ids.iter().map(|&i| usize::from(i != benign)).collect())
}

pub const BINARY_CLASS_NAMES: [&str; 2] = ["Benign", "Malicious"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    /// Number of samples whose true class is this one.
    pub support: u64,
    pub predicted: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `TP + FP = 0`: precision reported as 0.
    pub precision_undefined: bool,
    /// `TP + FN = 0`: recall reported as 0.
    pub recall_undefined: bool,
    /// `precision + recall = 0`: F1 reported as 0.
    pub f1_undefined: bool,
    /// False when the class neither occurs nor is predicted.
    pub in_macro: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Multiclass,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub mode: EvalMode,
    pub class_names: Vec<String>,
    pub total: u64,
    pub accuracy: f64,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    #[serde(rename = "weighted")]
    pub weighted_avg: Averages,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    /// Effective configuration echoed for provenance.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    /// `None` unless explicitly requested, so reports stay byte-reproducible.
    pub timestamps: Option<Timestamps>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Accuracy over the multiclass diagonal plus one-vs-rest precision, recall
/// and F1 per class, with macro and support-weighted averages.
///
/// Macro means run over classes that occur in truth or predictions; a class
/// absent from both has no defined metric and is left out (`in_macro = false`).
pub fn metrics_from_confusion(cm: &ConfusionMatrix, class_names: &[String]) -> Result<EvalReport> {
    if class_names.len() != cm.n_classes {
        return Err(Error::InvalidArgument(format!(
            "{} class names for a {}-class confusion matrix",
            class_names.len(),
            cm.n_classes
        )));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("confusion matrix is empty".into()));
    }
    let mut per_class = Vec::with_capacity(cm.n_classes);
    for (c, name) in class_names.iter().enumerate() {
        let tp = cm.counts[c][c];
        let support = cm.row_sum(c);
        let predicted = cm.col_sum(c);
        let fp = predicted - tp;
        let fn_ = support - tp;
        let tn = total - tp - fp - fn_;
        let (precision, precision_undefined) = ratio(tp, predicted);
        let (recall, recall_undefined) = ratio(tp, support);
        let (f1, f1_undefined) = if precision + recall > 0.0 {
            (2.0 * precision * recall / (precision + recall), false)
        } else {
            (0.0, true)
        };
        per_class.push(ClassMetrics {
            name: name.clone(),
            support,
            predicted,
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            precision_undefined,
            recall_undefined,
            f1_undefined,
            in_macro: support > 0 || predicted > 0,
        });
    }
    let included: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.in_macro).collect();
    let k = included.len() as f64;
    let macro_avg = Averages {
        precision: included.iter().map(|m| m.precision).sum::<f64>() / k,
        recall: included.iter().map(|m| m.recall).sum::<f64>() / k,
        f1: included.iter().map(|m| m.f1).sum::<f64>() / k,
    };
    let weight =
        |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64;
    let weighted_avg = Averages {
        precision: weight(|m| m.precision),
        recall: weight(|m| m.recall),
        f1: weight(|m| m.f1),
    };
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        mode: EvalMode::Multiclass,
        class_names: class_names.to_vec(),
        total,
        accuracy: cm.trace() as f64 / total as f64,
        macro_avg,
        weighted_avg,
        per_class,
        confusion: cm.clone(),
        config: serde_json::Value::Object(serde_json::Map::new()),
        seeds: BTreeMap::new(),
        timestamps: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_core::Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn binary_cm(tp: u64, fn_: u64, fp: u64, tn: u64) -> ConfusionMatrix {
        // class 1 is the positive class: row = truth
        ConfusionMatrix {
            n_classes: 2,
            counts: vec![vec![tn, fp], vec![fn_, tp]],
        }
    }

    #[test]
    fn worked_binary_example() {
        let r = metrics_from_confusion(&binary_cm(90, 5, 10, 95), &names(2)).unwrap();
        let pos = &r.per_class[1];
        assert_eq!(r.accuracy, 0.925);
        assert_eq!(pos.precision, 0.9);
        assert!((pos.recall - 0.9473684).abs() < 1e-7);
        assert!((pos.f1 - 0.9230769).abs() < 1e-7);
        assert_eq!((pos.tp, pos.fn_, pos.fp, pos.tn), (90, 5, 10, 95));
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        let r = metrics_from_confusion(&cm, &names(3)).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(
            r.macro_avg,
            Averages {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );
        assert_eq!(r.weighted_avg, r.macro_avg);
    }

    #[test]
    fn single_pair() {
        let cm = confusion(&[0], &[1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![0, 0], vec![1, 0]]);
    }

    #[test]
    fn all_wrong_binary() {
        let cm = confusion(&[1, 1, 0], &[0, 0, 1], 2).unwrap();
        let r = metrics_from_confusion(&cm, &names(2)).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert!(r.per_class.iter().all(|m| m.f1 == 0.0 && m.f1_undefined));
        assert_eq!(r.macro_avg.f1, 0.0);
    }

    #[test]
    fn zero_denominators_are_flagged() {
        // class 2 is never predicted, class 3 never occurs anywhere
        let cm = confusion(&[0, 1, 0], &[0, 1, 2], 4).unwrap();
        let r = metrics_from_confusion(&cm, &names(4)).unwrap();
        let c2 = &r.per_class[2];
        assert!(c2.precision_undefined && !c2.recall_undefined && c2.in_macro);
        assert_eq!((c2.precision, c2.recall), (0.0, 0.0));
        let c3 = &r.per_class[3];
        assert!(c3.precision_undefined && c3.recall_undefined && !c3.in_macro);
        // macro over classes 0..=2: recalls 1, 1, 0
        assert!((r.macro_avg.recall - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(confusion(&[0, 1], &[0], 2).is_err());
        assert!(matches!(
            confusion(&[2], &[0], 2),
            Err(Error::ClassOutOfRange { id: 2, .. })
        ));
        assert!(metrics_from_confusion(&ConfusionMatrix::new(3), &names(3)).is_err());
        assert!(metrics_from_confusion(&ConfusionMatrix::new(3), &names(2)).is_err());
    }

    #[test]
    fn brute_force_tally_matches() {
        let mut rng = Rng::new(42);
        let truth: Vec<usize> = (0..200).map(|_| rng.below(4)).collect();
        let preds: Vec<usize> = (0..200).map(|_| rng.below(4)).collect();
        let cm = confusion(&preds, &truth, 4).unwrap();
        for t in 0..4 {
            for p in 0..4 {
                let n = truth.iter().zip(&preds).filter(|&(&a, &b)| a == t && b == p).count() as u64;
                assert_eq!(cm.counts[t][p], n);
            }
        }
        assert_eq!(cm.total(), 200);
    }

    #[test]
    fn collapse_maps_benign_to_zero() {
        let vocab =
            LabelVocab::from_names(vec!["Okiru".into(), "Benign".into(), "DDoS".into()], vec![3, 2, 1]).unwrap();
        assert_eq!(binary_collapse(&vocab, &[0, 1, 2, 1]).unwrap(), vec![1, 0, 1, 0]);
        assert_eq!(binary_collapse(&vocab, &[1, 1]).unwrap(), vec![0, 0]);
        let no_benign = LabelVocab::from_names(vec!["A".into(), "B".into()], vec![1, 1]).unwrap();
        assert!(matches!(binary_collapse(&no_benign, &[0]), Err(Error::NoBenignClass)));
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = confusion(&[0, 1], &[0, 0], 2).unwrap();
        let b = confusion(&[1], &[1], 2).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.counts, vec![vec![1, 1], vec![0, 1]]);
        assert!(a.merge(&ConfusionMatrix::new(3)).is_err());
    }

    mod props {
        use super::*;
        use crate::nn_core::Rng;
        use proptest::prelude::*;

        fn arb_outcomes() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
            (2usize..7).prop_flat_map(|k| (Just(k), prop::collection::vec((0..k, 0..k), 1..300)))
        }

        proptest! {
            #[test]
            fn metric_identities((k, pairs) in arb_outcomes()) {
                let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
                let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
                let cm = confusion(&preds, &truth, k).unwrap();
                let r = metrics_from_confusion(&cm, &names(k)).unwrap();
                prop_assert_eq!(r.accuracy, cm.trace() as f64 / cm.total() as f64);
                for m in &r.per_class {
                    for v in [m.precision, m.recall, m.f1] {
                        prop_assert!((0.0..=1.0).contains(&v));
                    }
                    let (lo, hi) = (m.precision.min(m.recall), m.precision.max(m.recall));
                    prop_assert!(m.f1 >= lo - 1e-15 && m.f1 <= hi + 1e-15);
                    prop_assert_eq!(m.f1 == 0.0, m.precision * m.recall == 0.0);
                    if m.precision > 0.0 && m.recall > 0.0 {
                        prop_assert!((m.f1 * (m.precision + m.recall) - 2.0 * m.precision * m.recall).abs() < 1e-12);
                    }
                    prop_assert_eq!(m.tp + m.fp + m.fn_ + m.tn, cm.total());
                }
            }

            #[test]
            fn macro_f1_invariant_under_relabeling((k, pairs) in arb_outcomes(), seed in any::<u64>()) {
                let mut perm: Vec<usize> = (0..k).collect();
                Rng::new(seed).shuffle(&mut perm);
                let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
                let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
                let a = metrics_from_confusion(&confusion(&preds, &truth, k).unwrap(), &names(k)).unwrap();
                let pt: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
                let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
                let b = metrics_from_confusion(&confusion(&pp, &pt, k).unwrap(), &names(k)).unwrap();
                prop_assert!((a.macro_avg.f1 - b.macro_avg.f1).abs() < 1e-12);
            }

            #[test]
            fn collapse_then_confuse_equals_block_sum(pairs in prop::collection::vec((0usize..11, 0usize..11), 1..400), benign in 0usize..11) {
                let names11: Vec<String> = (0..11).map(|i| if i == benign { "Benign".to_string() } else { format!("A{i}") }).collect();
                let vocab = LabelVocab::from_names(names11, vec![1; 11]).unwrap();
                let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
                let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
                let collapsed = confusion(&binary_collapse(&vocab, &preds).unwrap(), &binary_collapse(&vocab, &truth).unwrap(), 2).unwrap();
                let full = confusion(&preds, &truth, 11).unwrap();
                let mut blocks = ConfusionMatrix::new(2);
                for t in 0..11 {
                    for p in 0..11 {
                        blocks.counts[usize::from(t != benign)][usize::from(p != benign)] += full.counts[t][p];
                    }
                }
                prop_assert_eq!(collapsed, blocks);
            }
        }
    }
}
