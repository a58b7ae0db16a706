pub mod attention;
pub mod cli;
pub mod error;
pub mod features;
pub mod flow_ingest;
pub mod gradcheck_suite;
pub mod model;
pub mod nn_core;
pub mod recurrent;
pub mod synthetic;
pub mod train_eval;

pub use error::{Error, Result};
