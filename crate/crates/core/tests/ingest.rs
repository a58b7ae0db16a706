//! Ingestion against the bundled Zeek fixture, library and CLI paths.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ecnet::flow_ingest::{
    build_label_vocab, parse_zeek_files, read_flows_csv, split_train_test, stratified_sample, Proto,
};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/iot23_sample.conn.log.labeled")
}

/// Counts tallied by hand from the fixture: 113 lines = 10 comment lines,
/// 101 well-formed records and 2 malformed ones.
const EXPECTED: [(&str, u64); 9] = [
    ("Benign", 40),
    ("PartOfAHorizontalPortScan", 25),
    ("Okiru", 12),
    ("DDoS", 8),
    ("C&C", 6),
    ("C&C-HeartBeat", 4),
    ("Attack", 3),
    ("FileDownload", 2),
    ("C&C-Mirai", 1),
];

#[test]
fn fixture_parses_to_hand_counts() {
    let p = parse_zeek_files(&[fixture()]).unwrap();
    assert_eq!(p.records.len(), 101);
    let lines: Vec<usize> = p.errors.iter().map(|e| e.line).collect();
    assert_eq!(lines, vec![29, 79]);

    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for r in &p.records {
        *counts.entry(r.label.as_str()).or_default() += 1;
    }
    for (label, n) in EXPECTED {
        assert_eq!(counts.get(label), Some(&n), "{label}");
    }
    assert_eq!(counts.len(), EXPECTED.len());

    let vocab = build_label_vocab(&p.records).unwrap();
    let names: Vec<&str> = vocab.names().iter().map(String::as_str).collect();
    let expected: Vec<&str> = EXPECTED.iter().map(|(l, _)| *l).collect();
    assert_eq!(names, expected);
    assert_eq!(vocab.benign_id().unwrap(), 0);
}

#[test]
fn fixture_sentinels_become_absent_values() {
    let p = parse_zeek_files(&[fixture()]).unwrap();
    // every S0 scan without a duration also lacks byte counts
    let unset: Vec<_> = p.records.iter().filter(|r| r.duration.is_none()).collect();
    assert!(!unset.is_empty());
    assert!(unset.iter().all(|r| r.orig_bytes.is_none() && r.resp_bytes.is_none()));
    // `(empty)` service is treated like an unset one
    assert!(p.records.iter().any(|r| r.label == "C&C" && r.service.is_none()));
    assert!(p.records.iter().all(|r| r.service.as_deref() != Some("(empty)")));
    assert!(p.records.iter().any(|r| r.proto == Proto::Udp));
    // the verbatim label token keeps the packed columns' text
    let mirai = p.records.iter().find(|r| r.label == "C&C-Mirai").unwrap();
    assert!(mirai.label_raw.contains("C&C-Mirai"));
}

#[test]
fn sampling_keeps_every_class_for_many_seeds() {
    let p = parse_zeek_files(&[fixture()]).unwrap();
    for seed in 0..100 {
        for budget in [9, 20, 50] {
            let s = stratified_sample(&p.records, budget, seed).unwrap();
            let vocab = build_label_vocab(&s).unwrap();
            assert_eq!(vocab.len(), 9, "seed {seed} budget {budget}");
            assert_eq!(vocab.id("C&C-Mirai").map(|i| vocab.counts()[i]), Some(1));
            assert!(s.len() <= budget.max(9));
        }
    }
}

#[test]
fn split_partitions_every_record() {
    let p = parse_zeek_files(&[fixture()]).unwrap();
    let split = split_train_test(&p.records, 0.8, 4).unwrap();
    assert_eq!(split.train.len() + split.test.len(), 101);
    assert_eq!(split.singleton_classes, vec!["C&C-Mirai".to_string()]);
    assert!(split.train.iter().any(|r| r.label == "C&C-Mirai"));
    assert!(split.test.iter().all(|r| r.label != "C&C-Mirai"));
}

#[test]
fn cli_ingest_writes_canonical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let code = ecnet::cli::run([
        "ecnet".into(),
        "ingest".into(),
        "--input".into(),
        fixture().into_os_string(),
        "--budget".into(),
        "60".into(),
        "--seed-sample".into(),
        "3".into(),
        "--out".into(),
        out.clone().into_os_string(),
    ]);
    assert_eq!(code, 0);
    for f in [
        "flows.csv",
        "train.csv",
        "test.csv",
        "vocab.json",
        "ingest_summary.json",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let read = |f: &str| read_flows_csv(std::fs::File::open(out.join(f)).unwrap()).unwrap();
    let flows = read("flows.csv");
    let (train, test) = (read("train.csv"), read("test.csv"));
    assert_eq!(train.len() + test.len(), flows.len());
    assert!(flows.windows(2).all(|w| w[0].ts <= w[1].ts), "flows are time ordered");
    assert!(train.windows(2).all(|w| w[0].ts <= w[1].ts));

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ingest_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["parsed_records"], 101);
    assert_eq!(summary["skipped_lines"], 2);
    assert_eq!(summary["sampled_records"], flows.len());
    assert_eq!(summary["classes"].as_array().unwrap().len(), 9);
    assert_eq!(summary["config"]["budget"], 60);
    assert!(summary["config"].get("input").is_none());
}

#[test]
fn cli_ingest_rejects_headerless_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.log");
    std::fs::write(&bad, "1.0\tC1\t1.2.3.4\n").unwrap();
    let code = ecnet::cli::run([
        "ecnet".into(),
        "ingest".into(),
        "--input".into(),
        bad.into_os_string(),
        "--out".into(),
        dir.path().join("o").into_os_string(),
    ]);
    assert_eq!(code, ecnet::cli::EXIT_DATA);
}
