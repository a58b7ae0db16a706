//! Zeek `conn.log.labeled` ingestion: parsing, label vocabulary, sampling and splits.

mod csv_io;
mod sampling;
mod vocab;
mod zeek;

use serde::{Deserialize, Serialize};

pub use csv_io::{read_flows_csv, write_flows_csv, CSV_COLUMNS};
pub use sampling::{split_train_test, stratified_sample, DatasetSplit};
pub use vocab::{build_label_vocab, LabelVocab, BENIGN};
pub use zeek::{parse_zeek_files, parse_zeek_log, parse_zeek_str, write_zeek_log, LineError, ZeekParse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proto {
    Tcp,
    Udp,
    Icmp,
    Other,
}

impl Proto {
    pub fn parse(s: &str) -> Proto {
        match s.to_ascii_lowercase().as_str() {
            "tcp" => Proto::Tcp,
            "udp" => Proto::Udp,
            "icmp" => Proto::Icmp,
            _ => Proto::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Proto::Tcp => "tcp",
            Proto::Udp => "udp",
            Proto::Icmp => "icmp",
            Proto::Other => "other",
        }
    }
}

/// One labeled connection summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub ts: f64,
    pub uid: String,
    pub orig_host: String,
    pub orig_port: u16,
    pub resp_host: String,
    pub resp_port: u16,
    pub proto: Proto,
    pub service: Option<String>,
    pub duration: Option<f64>,
    pub orig_bytes: Option<u64>,
    pub resp_bytes: Option<u64>,
    pub conn_state: String,
    pub orig_pkts: Option<u64>,
    pub resp_pkts: Option<u64>,
    /// The label text exactly as it appeared in the log.
    pub label_raw: String,
    /// Canonical class name (see [`canonical_label`]).
    pub label: String,
}

/// Normalizes a Zeek label token into a class name.
///
/// Runs of spaces, tabs and hyphens collapse into a single hyphen, so
/// `C&C - HeartBeat` and `C&C-HeartBeat` name the same class. Any casing of
/// `benign` maps to [`BENIGN`].
pub fn canonical_label(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_sep = false;
    for ch in raw.trim().chars() {
        if ch == '-' || ch.is_whitespace() {
            pending_sep = true;
            continue;
        }
        if pending_sep && !out.is_empty() {
            out.push('-');
        }
        pending_sep = false;
        out.push(ch);
    }
    if out.eq_ignore_ascii_case(BENIGN) {
        return BENIGN.to_string();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_variants_unify() {
        assert_eq!(canonical_label("C&C-HeartBeat"), "C&C-HeartBeat");
        assert_eq!(canonical_label("  C&C - HeartBeat "), "C&C-HeartBeat");
        assert_eq!(canonical_label("C&C--HeartBeat"), "C&C-HeartBeat");
        assert_eq!(canonical_label("C&C HeartBeat"), "C&C-HeartBeat");
        assert_eq!(canonical_label("benign"), "Benign");
        assert_eq!(
            canonical_label("PartOfAHorizontalPortScan"),
            "PartOfAHorizontalPortScan"
        );
    }
}
