//! End-to-end benchmark: offline merge and quantization, then per task
//! routing and gated decoding, with latency and heap measurements.

mod alloc;
mod config;
mod pipeline;
mod report;
mod tasks;

pub use alloc::{measure, tracking_enabled, Measured, TrackingAllocator};
pub use config::{PipelineConfig, ReportFormat};
pub use pipeline::{
    calibration_set, forward_cost_micros, prepare, run_pipeline, run_prepared, write_report, Prepared,
};
pub use report::{row_statistics, Aggregates, BenchReport, RunRow, Stages, SCHEMA_VERSION};
pub use tasks::{
    calibrate_delta, default_corpus, extract_answer, gen_synthetic_tasks, mean, median, parse_prompt,
    render_output, render_prompt, std_dev, SyntheticTask, MAX_OPERAND,
};
