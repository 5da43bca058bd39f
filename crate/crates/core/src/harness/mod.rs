//! Experiment driver: configuration, training runs, metrics and benchmarks.

pub mod bench;
pub mod config;
pub mod metrics;
pub mod run;

pub use bench::{measure_throughput, median, MemoryModel, ThroughputEntry, ThroughputReport};
pub use config::{parse_pairs, DatasetSpec, ExperimentConfig, OptimizerKind};
pub use metrics::{render_metrics, write_metrics, MetricsRow, MetricsWriter, METRICS_HEADER};
pub use run::{
    evaluate, load_weights, probe_set, run_experiment, run_on, save_weights, EpochSummary,
    IterationRecord, RunResult, TraceSink, Trainer,
};
