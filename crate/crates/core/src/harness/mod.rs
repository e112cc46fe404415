//! Benchmark harness: datasets, run configuration, orchestration, JSONL
//! records and cross-run aggregation.

pub mod aggregate;
pub mod config;
pub mod dataset;
pub mod netpbm;
pub mod record;
pub mod run;

pub use aggregate::{aggregate_files, aggregate_runs, write_csv, AggregateRow};
pub use config::{AdapterSpec, DatasetSpec, RunConfig};
pub use dataset::{select_target, Sample};
pub use record::{ErrorRecord, RecordLine, SampleRecord, SkipRecord};
pub use run::{run_benchmark, RunSummary};
