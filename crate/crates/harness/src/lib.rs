//! File formats, experiment configuration and pipelines for the `lori` tool.

pub mod config;
pub mod error;
pub mod format;
pub mod pipeline;
pub mod report;

pub use config::{ConfigError, ExperimentConfig};
pub use error::HarnessError;
pub use format::{AdapterFile, FormatError, FORMAT_VERSION, MAGIC};
pub use pipeline::{run_pipeline, Manifest, PipelineOutput, Stage};
