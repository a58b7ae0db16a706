//! Training loop, optimizers and the evaluation suite.

mod metrics;
mod optimizer;
mod train;

pub use metrics::{
    binary_collapse, confusion, metrics_from_confusion, Averages, ClassMetrics, ConfusionMatrix, EvalMode, EvalReport,
    Timestamps, BINARY_CLASS_NAMES, REPORT_FORMAT_VERSION,
};
pub use optimizer::{Optimizer, OptimizerConfig, OptimizerKind};
pub use train::{
    accuracy, cross_entropy, evaluate, save_history_csv, train, write_history_csv, EpochRecord, TrainConfig,
    TrainOutcome, PROB_FLOOR,
};
