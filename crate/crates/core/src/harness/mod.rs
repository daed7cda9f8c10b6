//! Experiment configuration, checkpoints, trace CSV files and SVG reports.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod trace_csv;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigError, DatasetConfig, ExperimentConfig};
pub use report::{render_svg, Chart};
pub use trace_csv::{read_rows, trace_rows, write_rows, TraceRow, CSV_HEADER};

/// A small trace of both methods, bundled for the `report` demo.
pub const DEMO_TRACE: &str = include_str!("demo_trace.csv");
