//! Config-driven runs of the prompted weak supervision workflow: serve a
//! model, label a dataset with prompted LFs, and evaluate the result.

pub mod config;
pub mod eval;
pub mod pipeline;

pub use config::{ConfigError, TaskConfig};
pub use eval::{evaluate, EvalError, EvalReport};
pub use pipeline::{run_label, write_outputs, LabelRun, PipelineError, Stage};
