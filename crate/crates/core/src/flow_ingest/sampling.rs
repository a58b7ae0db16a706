use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::FlowRecord;
use crate::error::{Error, Result};
use crate::nn_core::Rng;

/// Record indices grouped by class name, in name order.
fn group_by_label(records: &[FlowRecord]) -> BTreeMap<&str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.label.as_str()).or_default().push(i);
    }
    groups
}

/// Per-class sample sizes: every class first gets `min(count, budget / k)`,
/// then leftover budget goes to classes with records to spare in proportion
/// to their original counts (largest remainder for the final units).
pub(crate) fn allocate(counts: &[usize], budget: usize) -> Vec<usize> {
    let quota = budget / counts.len().max(1);
    let mut take: Vec<usize> = counts.iter().map(|&c| c.min(quota)).collect();
    let mut leftover = budget.saturating_sub(take.iter().sum());
    while leftover > 0 {
        let open: Vec<usize> = (0..counts.len()).filter(|&i| take[i] < counts[i]).collect();
        if open.is_empty() {
            break;
        }
        let weight: u128 = open.iter().map(|&i| counts[i] as u128).sum();
        let mut granted = 0;
        let mut remainders = Vec::with_capacity(open.len());
        for &i in &open {
            let exact = leftover as u128 * counts[i] as u128;
            let share = ((exact / weight) as usize).min(counts[i] - take[i]);
            take[i] += share;
            granted += share;
            remainders.push((exact % weight, i));
        }
        if granted == 0 {
            remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            for (_, i) in remainders {
                if leftover == granted {
                    break;
                }
                if take[i] < counts[i] {
                    take[i] += 1;
                    granted += 1;
                }
            }
        }
        leftover -= granted;
    }
    take
}

/// Reduces `records` to at most `budget` while keeping every class.
///
/// Output keeps the input order. Deterministic for a fixed `(records, budget, seed)`.
pub fn stratified_sample(records: &[FlowRecord], budget: usize, seed: u64) -> Result<Vec<FlowRecord>> {
    if records.is_empty() {
        return Err(Error::Sampling("cannot sample from zero records".into()));
    }
    let groups = group_by_label(records);
    if budget < groups.len() {
        return Err(Error::Sampling(format!(
            "budget {budget} is smaller than the {} classes present",
            groups.len()
        )));
    }
    let counts: Vec<usize> = groups.values().map(Vec::len).collect();
    let take = allocate(&counts, budget);
    let mut rng = Rng::new(seed);
    let mut keep = vec![false; records.len()];
    for (members, &n) in groups.values().zip(&take) {
        if n == members.len() {
            for &i in members {
                keep[i] = true;
            }
        } else {
            for j in rng.sample_indices(members.len(), n) {
                keep[members[j]] = true;
            }
        }
    }
    Ok(records
        .iter()
        .zip(keep)
        .filter(|&(_r, k)| k)
        .map(|(r, _k)| r.clone())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<FlowRecord>,
    pub test: Vec<FlowRecord>,
    pub seed: u64,
    pub ratio: f64,
    /// Classes with a single record; these went to `train` only.
    pub singleton_classes: Vec<String>,
}

/// Stratified train/test split. Both partitions keep the input order.
pub fn split_train_test(records: &[FlowRecord], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut in_train = vec![false; records.len()];
    let mut singleton_classes = Vec::new();
    for (label, mut members) in group_by_label(records) {
        let n = members.len();
        if n == 1 {
            log::warn!("class `{label}` has a single record; it goes to the training split only");
            singleton_classes.push(label.to_string());
            in_train[members[0]] = true;
            continue;
        }
        rng.shuffle(&mut members);
        let n_train = ((n as f64 * ratio).round() as usize).clamp(1, n - 1);
        for &i in &members[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, t) in records.iter().zip(in_train) {
        if t {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok(DatasetSplit {
        train,
        test,
        seed,
        ratio,
        singleton_classes,
    })
}
