use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::{exit_code, AblateArgs, EvalArgs, GradcheckArgs, IngestArgs, ModelFlags, TrainArgs, EXIT_NUMERIC, EXIT_OK};
use crate::attention::PoolMode;
use crate::error::{Error, Result};
use crate::features::{fit_schema, make_sequences, FeatureSchema, SequenceSample};
use crate::flow_ingest::{
    build_label_vocab, parse_zeek_files, read_flows_csv, split_train_test, stratified_sample, write_flows_csv,
    FlowRecord, LabelVocab,
};
use crate::gradcheck_suite::run_suite;
use crate::model::{build_model, load_checkpoint, save_checkpoint, FeatureMode, ModelConfig};
use crate::nn_core::Rng;
use crate::recurrent::CellType;
use crate::synthetic::{generate, SyntheticConfig, SyntheticKind};
use crate::train_eval::{evaluate, save_history_csv, train as train_model, EvalReport, Timestamps, TrainConfig};

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn read_csv_file(path: &Path) -> Result<Vec<FlowRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_flows_csv(BufReader::new(f))
}

fn read_vocab(path: &Path) -> Result<LabelVocab> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn require_out(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| Error::InvalidArgument(format!("{command} needs --out (or `out` in the config file)")))
}

fn require_input_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    match cfg.input.as_slice() {
        [dir] => Ok(dir.clone()),
        [] => Err(Error::InvalidArgument(format!(
            "{command} needs --input <ingest directory>"
        ))),
        _ => Err(Error::InvalidArgument(format!(
            "{command} takes a single input directory"
        ))),
    }
}

fn parse_list<T: std::str::FromStr<Err = Error>>(values: &[String]) -> Result<Vec<T>> {
    values.iter().map(|v| v.trim().parse()).collect()
}

fn seeds_map(cfg: &RunConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("init".to_string(), cfg.seeds.init),
        ("sample".to_string(), cfg.seeds.sample),
        ("train".to_string(), cfg.seeds.train),
    ])
}

fn apply_model_flags(cfg: &mut RunConfig, f: &ModelFlags) -> Result<()> {
    if let Some(v) = f.window {
        cfg.features.window = v;
    }
    if let Some(v) = f.stride {
        cfg.features.stride = v;
    }
    if let Some(v) = f.hidden_numeric {
        cfg.model.hidden_numeric = v;
    }
    if let Some(v) = f.hidden_categorical {
        cfg.model.hidden_categorical = v;
    }
    if let Some(v) = f.d_k {
        cfg.model.d_k = v;
    }
    if let Some(v) = f.heads {
        cfg.model.heads = v;
    }
    if let Some(v) = &f.fc_sizes {
        cfg.model.fc_sizes = v.clone();
    }
    if let Some(v) = &f.pooling {
        cfg.model.pooling = v.parse::<PoolMode>()?;
    }
    if let Some(v) = f.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = f.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = f.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = &f.optimizer {
        cfg.train.optimizer = v.parse()?;
    }
    if let Some(v) = f.grad_clip {
        cfg.train.grad_clip = Some(v);
    }
    if let Some(v) = f.patience {
        cfg.train.early_stop_patience = Some(v);
    }
    if let Some(v) = f.seed_init {
        cfg.seeds.init = v;
    }
    if let Some(v) = f.seed_train {
        cfg.seeds.train = v;
    }
    Ok(())
}

// ---------------------------------------------------------------- ingest

#[derive(Serialize)]
struct ClassSummary {
    label: String,
    parsed: u64,
    sampled: u64,
    train: u64,
    test: u64,
}

#[derive(Serialize)]
struct IngestSummary {
    config: serde_json::Value,
    parsed_records: usize,
    skipped_lines: usize,
    skipped_examples: Vec<String>,
    sampled_records: usize,
    train_records: usize,
    test_records: usize,
    singleton_classes: Vec<String>,
    classes: Vec<ClassSummary>,
}

fn count_by_label(records: &[FlowRecord], vocab: &LabelVocab) -> Vec<u64> {
    let mut counts = vec![0u64; vocab.len()];
    for r in records {
        if let Some(id) = vocab.id(&r.label) {
            counts[id] += 1;
        }
    }
    counts
}

pub(super) fn ingest(mut cfg: RunConfig, a: &IngestArgs) -> Result<i32> {
    if !a.input.is_empty() {
        cfg.input = a.input.clone();
    }
    if let Some(v) = a.budget {
        cfg.budget = Some(v);
    }
    if let Some(v) = a.seed_sample {
        cfg.seeds.sample = v;
    }
    if let Some(v) = a.split_ratio {
        cfg.split_ratio = v;
    }
    if let Some(v) = &a.out {
        cfg.out = Some(v.clone());
    }
    cfg.validate()?;
    if cfg.input.is_empty() {
        return Err(Error::InvalidArgument("ingest needs --input <conn.log>...".into()));
    }
    let out = require_out(&cfg, "ingest")?;

    let parse = parse_zeek_files(&cfg.input)?;
    for e in parse.errors.iter().take(10) {
        warn!("skipped line {}: {}", e.line, e.message);
    }
    if parse.records.is_empty() {
        return Err(Error::Sampling("no flow records could be parsed from the input".into()));
    }
    let vocab = build_label_vocab(&parse.records)?;
    let mut sampled = match cfg.budget {
        Some(budget) => stratified_sample(&parse.records, budget, cfg.seeds.sample)?,
        None => parse.records.clone(),
    };
    // Windows are built over time-ordered flows; the sort is stable so
    // records sharing a timestamp keep their log order.
    sampled.sort_by(|x, y| x.ts.total_cmp(&y.ts));
    let split = split_train_test(&sampled, cfg.split_ratio, cfg.seeds.sample)?;

    ensure_dir(&out)?;
    write_flows_csv(&sampled, create(&out.join("flows.csv"))?)?;
    write_flows_csv(&split.train, create(&out.join("train.csv"))?)?;
    write_flows_csv(&split.test, create(&out.join("test.csv"))?)?;
    write_json(&out.join("vocab.json"), &vocab)?;

    let parsed = vocab.counts();
    let sampled_counts = count_by_label(&sampled, &vocab);
    let train_counts = count_by_label(&split.train, &vocab);
    let test_counts = count_by_label(&split.test, &vocab);
    let classes: Vec<ClassSummary> = vocab
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| ClassSummary {
            label: name.clone(),
            parsed: parsed[i],
            sampled: sampled_counts[i],
            train: train_counts[i],
            test: test_counts[i],
        })
        .collect();
    let summary = IngestSummary {
        config: cfg.provenance(),
        parsed_records: parse.records.len(),
        skipped_lines: parse.errors.len(),
        skipped_examples: parse
            .errors
            .iter()
            .take(10)
            .map(|e| format!("line {}: {}", e.line, e.message))
            .collect(),
        sampled_records: sampled.len(),
        train_records: split.train.len(),
        test_records: split.test.len(),
        singleton_classes: split.singleton_classes.clone(),
        classes,
    };
    write_json(&out.join("ingest_summary.json"), &summary)?;

    let width = vocab.names().iter().map(String::len).max().unwrap_or(5).max(5);
    println!(
        "{:<width$}  {:>10}  {:>10}  {:>10}  {:>10}",
        "label", "parsed", "sampled", "train", "test"
    );
    for c in &summary.classes {
        println!(
            "{:<width$}  {:>10}  {:>10}  {:>10}  {:>10}",
            c.label, c.parsed, c.sampled, c.train, c.test
        );
    }
    println!(
        "{:<width$}  {:>10}  {:>10}  {:>10}  {:>10}",
        "total", summary.parsed_records, summary.sampled_records, summary.train_records, summary.test_records
    );
    if summary.skipped_lines > 0 {
        println!("skipped {} malformed line(s)", summary.skipped_lines);
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- train

pub(super) fn train(mut cfg: RunConfig, a: &TrainArgs) -> Result<i32> {
    if let Some(v) = &a.input {
        cfg.input = vec![v.clone()];
    }
    if let Some(v) = &a.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = &a.cell {
        cfg.model.cell_type = v.parse::<CellType>()?;
    }
    if a.attention {
        cfg.model.use_attention = true;
    }
    if a.no_attention {
        cfg.model.use_attention = false;
    }
    if let Some(v) = &a.feature_mode {
        cfg.model.feature_mode = v.parse::<FeatureMode>()?;
    }
    if let Some(v) = a.val_fraction {
        cfg.val_fraction = v;
    }
    cfg.record_time |= a.record_time;
    apply_model_flags(&mut cfg, &a.model)?;
    cfg.sync_seeds();
    cfg.validate()?;
    let dir = require_input_dir(&cfg, "train")?;
    let out = require_out(&cfg, "train")?;

    let vocab = read_vocab(&dir.join("vocab.json"))?;
    cfg.model.n_classes = vocab.len();
    cfg.model.validate()?;
    let records = read_csv_file(&dir.join("train.csv"))?;
    // Chronological hold-out: the newest records validate.
    let n_val = (records.len() as f64 * cfg.val_fraction).floor() as usize;
    let (fit_records, val_records) = records.split_at(records.len() - n_val);
    let schema = fit_schema(fit_records, &cfg.features)?;
    let train_set = make_sequences(fit_records, &schema, &vocab)?;
    if train_set.is_empty() {
        return Err(Error::Incompatible(format!(
            "{} training record(s) is fewer than the window of {}",
            fit_records.len(),
            schema.window
        )));
    }
    let val_set = make_sequences(val_records, &schema, &vocab)?;
    if val_set.is_empty() && n_val > 0 {
        warn!("validation hold-out of {n_val} record(s) is shorter than one window; training without validation");
    }

    let started = now();
    let model = build_model(&cfg.model, &schema, &vocab, &mut Rng::new(cfg.seeds.init))?;
    info!(
        "training {} parameters on {} windows",
        model.num_params(),
        train_set.len()
    );
    let outcome = train_model(model, &train_set, &val_set, &cfg.train)?;

    ensure_dir(&out)?;
    save_checkpoint(&outcome.model, &out.join("model.ecnt"))?;
    save_history_csv(&outcome.history, &out.join("history.csv"))?;
    write_text(&out.join("schema.json"), &format!("{}\n", schema.to_json()?))?;
    write_json(&out.join("config.json"), &cfg.provenance())?;
    let val_accuracy = if val_set.is_empty() {
        None
    } else {
        let mut report = evaluate(&outcome.model, &val_set, cfg.binary)?;
        finish_report(&mut report, &cfg, started);
        write_text(&out.join("val_report.json"), &format!("{}\n", report.to_json()?))?;
        Some(report.accuracy)
    };

    let last = outcome.history.last();
    println!("parameters      {}", outcome.model.num_params());
    println!("train windows   {}", train_set.len());
    println!("val windows     {}", val_set.len());
    println!("epochs run      {}", outcome.history.len());
    if let Some(r) = last {
        println!("final loss      {:.6}", r.train_loss);
    }
    if let Some(acc) = val_accuracy {
        println!("val accuracy    {acc:.4}");
    }
    if outcome.stopped_early {
        println!("early stop      kept epoch {}", outcome.best_epoch.unwrap_or(0));
    }
    Ok(EXIT_OK)
}

fn finish_report(report: &mut EvalReport, cfg: &RunConfig, started: f64) {
    report.config = cfg.provenance();
    report.seeds = seeds_map(cfg);
    if cfg.record_time {
        report.timestamps = Some(Timestamps {
            started,
            finished: now(),
        });
    }
}

// ---------------------------------------------------------------- eval

pub(super) fn eval(mut cfg: RunConfig, a: &EvalArgs) -> Result<i32> {
    if let Some(v) = &a.input {
        cfg.input = vec![v.clone()];
    }
    if let Some(v) = &a.out {
        cfg.out = Some(v.clone());
    }
    cfg.binary |= a.binary;
    cfg.record_time |= a.record_time;
    let input = match cfg.input.as_slice() {
        [p] => p.clone(),
        _ => return Err(Error::InvalidArgument("eval needs a single --input".into())),
    };
    let started = now();
    let model = load_checkpoint(&a.model)?;
    let csv_path = if input.is_dir() {
        let vocab_path = input.join("vocab.json");
        if vocab_path.exists() {
            let data_vocab = read_vocab(&vocab_path)?;
            if data_vocab.names() != model.vocab.names() {
                return Err(Error::Incompatible(format!(
                    "class vocabulary of {} differs from the checkpoint's",
                    vocab_path.display()
                )));
            }
        }
        input.join("test.csv")
    } else {
        input
    };
    let records = read_csv_file(&csv_path)?;
    let mut unknown: Vec<&str> = records
        .iter()
        .map(|r| r.label.as_str())
        .filter(|l| model.vocab.id(l).is_none())
        .collect();
    unknown.sort_unstable();
    unknown.dedup();
    if !unknown.is_empty() {
        return Err(Error::Incompatible(format!(
            "labels not known to the model: {}",
            unknown.join(", ")
        )));
    }
    let samples = make_sequences(&records, &model.schema, &model.vocab)?;
    if samples.is_empty() {
        return Err(Error::Incompatible(format!(
            "{} record(s) is fewer than the model window of {}",
            records.len(),
            model.schema.window
        )));
    }

    // Echo the configuration the checkpoint was actually built with.
    cfg.model = model.config.clone();
    cfg.seeds.init = model.config.seed;
    cfg.features.window = model.schema.window;
    cfg.features.stride = model.schema.stride;
    cfg.features.numeric = model.schema.numeric.iter().map(|c| c.name.clone()).collect();
    cfg.features.categorical = model.schema.categorical.iter().map(|c| c.name.clone()).collect();

    let mut report = evaluate(&model, &samples, cfg.binary)?;
    finish_report(&mut report, &cfg, started);
    // Training-only settings are not recoverable from a checkpoint; echo
    // just what shaped this evaluation.
    if let Some(map) = report.config.as_object_mut() {
        map.retain(|k, _| matches!(k.as_str(), "model" | "features" | "binary" | "record_time"));
    }
    report.seeds = BTreeMap::from([("init".to_string(), model.config.seed)]);
    let json = format!("{}\n", report.to_json()?);
    match &cfg.out {
        Some(path) => {
            write_text(path, &json)?;
            println!("windows         {}", report.total);
            println!("accuracy        {:.4}", report.accuracy);
            println!("macro f1        {:.4}", report.macro_avg.f1);
            println!("weighted f1     {:.4}", report.weighted_avg.f1);
        }
        None => print!("{json}"),
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- ablate

/// Column order of the ablation results CSV.
pub const ABLATION_COLUMNS: [&str; 12] = [
    "cell",
    "attention",
    "feature_mode",
    "seed",
    "split_hash",
    "status",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "majority_baseline",
    "error",
];

/// One model variant of an ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub cell: CellType,
    pub attention: bool,
    pub feature_mode: FeatureMode,
    /// Drives both parameter initialization and minibatch order.
    pub seed: u64,
}

/// One line of the ablation CSV. Metrics are macro averages on the test set
/// and are empty for failed variants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub attention: bool,
    pub feature_mode: String,
    pub seed: u64,
    pub split_hash: String,
    pub status: String,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub majority_baseline: f64,
    pub error: String,
    #[serde(skip)]
    pub exit_code: i32,
}

/// SHA-256 over the exact tensors and targets of a train/test split.
pub fn split_hash(train: &[SequenceSample], test: &[SequenceSample]) -> String {
    let mut h = Sha256::new();
    for (tag, part) in [(b"train", train), (b"test\0", test)] {
        h.update(tag);
        h.update((part.len() as u64).to_le_bytes());
        for s in part {
            h.update((s.target as u64).to_le_bytes());
            for m in [&s.numeric, &s.categorical] {
                h.update((m.rows() as u64).to_le_bytes());
                h.update((m.cols() as u64).to_le_bytes());
                for v in m.as_slice() {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn majority_baseline(test: &[SequenceSample], n_classes: usize) -> f64 {
    let mut counts = vec![0usize; n_classes.max(1)];
    for s in test {
        if let Some(c) = counts.get_mut(s.target) {
            *c += 1;
        }
    }
    *counts.iter().max().unwrap_or(&0) as f64 / test.len().max(1) as f64
}

fn run_variant(
    v: &Variant,
    model_base: &ModelConfig,
    train_base: &TrainConfig,
    schema: &FeatureSchema,
    vocab: &LabelVocab,
    train_set: &[SequenceSample],
    test_set: &[SequenceSample],
) -> Result<EvalReport> {
    let mut mc = model_base.clone();
    mc.cell_type = v.cell;
    mc.use_attention = v.attention;
    mc.feature_mode = v.feature_mode;
    mc.n_classes = vocab.len();
    mc.seed = v.seed;
    let mut tc = train_base.clone();
    tc.seed = v.seed;
    let model = build_model(&mc, schema, vocab, &mut Rng::new(v.seed))?;
    let outcome = train_model(model, train_set, &[], &tc)?;
    evaluate(&outcome.model, test_set, false)
}

/// Trains and scores every variant in parallel on one shared split. A failing
/// variant produces a `failed` row; the others still run.
pub fn ablate_rows(
    variants: &[Variant],
    model_base: &ModelConfig,
    train_base: &TrainConfig,
    schema: &FeatureSchema,
    vocab: &LabelVocab,
    train_set: &[SequenceSample],
    test_set: &[SequenceSample],
) -> Vec<AblationRow> {
    let baseline = majority_baseline(test_set, vocab.len());
    variants
        .par_iter()
        .map(|v| {
            // Each variant fingerprints the data it was handed.
            let hash = split_hash(train_set, test_set);
            let result = run_variant(v, model_base, train_base, schema, vocab, train_set, test_set);
            let mut row = AblationRow {
                cell: v.cell.to_string(),
                attention: v.attention,
                feature_mode: v.feature_mode.to_string(),
                seed: v.seed,
                split_hash: hash,
                status: "ok".into(),
                accuracy: None,
                precision: None,
                recall: None,
                f1: None,
                majority_baseline: baseline,
                error: String::new(),
                exit_code: EXIT_OK,
            };
            match result {
                Ok(r) => {
                    row.accuracy = Some(r.accuracy);
                    row.precision = Some(r.macro_avg.precision);
                    row.recall = Some(r.macro_avg.recall);
                    row.f1 = Some(r.macro_avg.f1);
                }
                Err(e) => {
                    warn!(
                        "variant {}/{}/{}/{} failed: {e}",
                        row.cell, v.attention, row.feature_mode, v.seed
                    );
                    row.status = "failed".into();
                    row.error = e.to_string();
                    row.exit_code = exit_code(&e);
                }
            }
            row
        })
        .collect()
}

fn parse_attention_mode(s: &str) -> Result<bool> {
    match s.trim() {
        "on" | "true" | "yes" | "attention" => Ok(true),
        "off" | "false" | "no" | "none" => Ok(false),
        other => Err(Error::InvalidArgument(format!(
            "unknown attention mode `{other}` (use on/off)"
        ))),
    }
}

struct AblationData {
    schema: FeatureSchema,
    vocab: LabelVocab,
    train: Vec<SequenceSample>,
    test: Vec<SequenceSample>,
}

fn ablation_data(cfg: &RunConfig, a: &AblateArgs) -> Result<AblationData> {
    if let Some(kind) = &a.synthetic {
        let kind: SyntheticKind = kind.parse()?;
        let mut sc = SyntheticConfig::new(kind, a.samples, cfg.features.window, cfg.seeds.sample);
        sc.label_noise = a.label_noise;
        let task = generate(&sc)?;
        let (train, test) = task.split(cfg.split_ratio);
        return Ok(AblationData {
            schema: task.schema,
            vocab: task.vocab,
            train,
            test,
        });
    }
    let dir = require_input_dir(cfg, "ablate")?;
    let vocab = read_vocab(&dir.join("vocab.json"))?;
    let train_records = read_csv_file(&dir.join("train.csv"))?;
    let test_records = read_csv_file(&dir.join("test.csv"))?;
    let schema = fit_schema(&train_records, &cfg.features)?;
    let train = make_sequences(&train_records, &schema, &vocab)?;
    let test = make_sequences(&test_records, &schema, &vocab)?;
    Ok(AblationData {
        schema,
        vocab,
        train,
        test,
    })
}

pub(super) fn ablate(mut cfg: RunConfig, a: &AblateArgs) -> Result<i32> {
    if let Some(v) = &a.input {
        cfg.input = vec![v.clone()];
    }
    if let Some(v) = &a.out {
        cfg.out = Some(v.clone());
    }
    if let Some(v) = a.seed_sample {
        cfg.seeds.sample = v;
    }
    apply_model_flags(&mut cfg, &a.model)?;
    cfg.sync_seeds();
    cfg.validate()?;
    if a.synthetic.is_none() && cfg.input.is_empty() {
        return Err(Error::InvalidArgument(
            "ablate needs --input <ingest directory> or --synthetic".into(),
        ));
    }
    let cells = match &a.cells {
        Some(v) => parse_list::<CellType>(v)?,
        None => CellType::ALL.to_vec(),
    };
    let attention = match &a.attention_modes {
        Some(v) => v.iter().map(|s| parse_attention_mode(s)).collect::<Result<Vec<_>>>()?,
        None => vec![true, false],
    };
    let modes = match &a.feature_modes {
        Some(v) => parse_list::<FeatureMode>(v)?,
        None => vec![cfg.model.feature_mode],
    };
    let seeds = a.seeds.clone().unwrap_or_else(|| vec![cfg.seeds.init]);
    let mut variants = Vec::new();
    for &cell in &cells {
        for &att in &attention {
            for &mode in &modes {
                for &seed in &seeds {
                    variants.push(Variant {
                        cell,
                        attention: att,
                        feature_mode: mode,
                        seed,
                    });
                }
            }
        }
    }
    if variants.is_empty() {
        return Err(Error::InvalidArgument("ablation grid is empty".into()));
    }

    let data = ablation_data(&cfg, a)?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Incompatible(format!(
            "split has {} training and {} test window(s); both must be non-empty",
            data.train.len(),
            data.test.len()
        )));
    }
    cfg.model.n_classes = data.vocab.len();
    info!("ablating {} variant(s)", variants.len());
    let rows = ablate_rows(
        &variants,
        &cfg.model,
        &cfg.train,
        &data.schema,
        &data.vocab,
        &data.train,
        &data.test,
    );

    let sink: Box<dyn Write> = match &cfg.out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()
        .map_err(|e| Error::io(cfg.out.clone().unwrap_or_else(|| "<stdout>".into()), e))?;
    drop(w);
    if cfg.out.is_some() {
        for r in &rows {
            let acc = r.accuracy.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            println!(
                "{:<4} {:<9} {:<8} seed {:<4} {:<6} acc {acc}",
                r.cell,
                if r.attention { "attention" } else { "none" },
                r.feature_mode,
                r.seed,
                r.status
            );
        }
    }
    let failed: Vec<&AblationRow> = rows.iter().filter(|r| r.status != "ok").collect();
    if let Some(first) = failed.first() {
        eprintln!("error: {} of {} variant(s) failed", failed.len(), rows.len());
        return Ok(first.exit_code);
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------- gradcheck

pub(super) fn gradcheck(a: &GradcheckArgs) -> Result<i32> {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("--eps must be positive, got {}", a.eps)));
    }
    let report = run_suite(a.eps, a.seed, a.inject_sign_error)?;
    println!("{:<16} {:>8}  {:>14}  result", "component", "params", "max_rel_error");
    for c in &report.components {
        println!(
            "{:<16} {:>8}  {:>14.3e}  {}",
            c.name,
            c.n_params,
            c.max_rel_error,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "threshold {:.0e}, eps {:.0e}, seed {}",
        report.threshold, report.eps, report.seed
    );
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    Ok(if report.all_passed() { EXIT_OK } else { EXIT_NUMERIC })
}
