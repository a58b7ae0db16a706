use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::FlowRecord;
use crate::error::{Error, Result};

pub const BENIGN: &str = "Benign";

/// Ordered class names with a name → id index.
///
/// Ids follow descending frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct LabelVocab {
    names: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    benign_id: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    names: Vec<String>,
    counts: Vec<u64>,
    benign_id: Option<usize>,
}

impl TryFrom<VocabFile> for LabelVocab {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.version != 1 {
            return Err(Error::Format(format!("unsupported vocab version {}", f.version)));
        }
        let vocab = LabelVocab::from_names(f.names, f.counts)?;
        if vocab.benign_id != f.benign_id {
            return Err(Error::Format("vocab benign_id does not match its names".into()));
        }
        Ok(vocab)
    }
}

impl From<LabelVocab> for VocabFile {
    fn from(v: LabelVocab) -> Self {
        VocabFile {
            version: 1,
            names: v.names,
            counts: v.counts,
            benign_id: v.benign_id,
        }
    }
}

impl LabelVocab {
    /// Builds a vocabulary from per-class counts, ordering by count desc then name.
    pub fn from_counts<S: AsRef<str>>(counts: &[(S, u64)]) -> Result<Self> {
        let mut merged: BTreeMap<&str, u64> = BTreeMap::new();
        for (name, c) in counts {
            *merged.entry(name.as_ref()).or_default() += c;
        }
        let mut pairs: Vec<(&str, u64)> = merged.into_iter().collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let (names, counts) = pairs.into_iter().map(|(n, c)| (n.to_string(), c)).unzip();
        Self::from_names(names, counts)
    }

    /// Uses `names` in the given order.
    pub fn from_names(names: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("label vocabulary is empty".into()));
        }
        if counts.len() != names.len() {
            return Err(Error::InvalidArgument("vocab names and counts differ in length".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate class name `{n}`")));
            }
        }
        let benign_id = names.iter().position(|n| n.eq_ignore_ascii_case(BENIGN));
        Ok(LabelVocab {
            names,
            counts,
            index,
            benign_id,
        })
    }

    /// Two-class vocabulary used after collapsing to benign/malicious.
    pub fn binary() -> Self {
        Self::from_names(vec![BENIGN.into(), "Malicious".into()], vec![0, 0]).expect("static vocab")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn benign_id(&self) -> Result<usize> {
        self.benign_id.ok_or(Error::NoBenignClass)
    }

    pub fn has_benign(&self) -> bool {
        self.benign_id.is_some()
    }
}

pub fn build_label_vocab(records: &[FlowRecord]) -> Result<LabelVocab> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a vocabulary from zero records".into(),
        ));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for r in records {
        *counts.entry(r.label.as_str()).or_default() += 1;
    }
    let pairs: Vec<(&str, u64)> = counts.into_iter().collect();
    LabelVocab::from_counts(&pairs)
}
