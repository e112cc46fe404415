//! Two-level aggregation: a mean per run, then mean ± sample standard
//! deviation across those run means, so every run weighs the same no matter
//! how many samples it scored.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use crate::attribution::MethodName;
use crate::error::{Error, Result};

use super::record::{read_record_file, RecordLine, SampleRecord};

/// Aggregated metric columns, in output order. `odd_abs` is `|odd|`.
pub const METRICS: [&str; 8] =
    ["tdd", "odd", "odd_abs", "leak_abs", "leak_signed", "insertion", "stability", "runtime_ms"];

fn metric_value(r: &SampleRecord, metric: &str) -> f64 {
    match metric {
        "tdd" => r.tdd,
        "odd" => r.odd,
        "odd_abs" => r.odd.abs(),
        "leak_abs" => r.leak_abs,
        "leak_signed" => r.leak_signed,
        "insertion" => r.insertion,
        "stability" => r.stability,
        "runtime_ms" => r.runtime_ms,
        _ => unreachable!("unknown metric {metric}"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub dataset: String,
    pub method: MethodName,
    pub metric: &'static str,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for n = 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Aggregates runs given as record lists. Each list is one run; records
/// inside a list are further split by `run_id`.
pub fn aggregate_runs(runs: &[Vec<SampleRecord>]) -> Vec<AggregateRow> {
    // (dataset, method) -> metric index -> run means
    let mut table: BTreeMap<(String, MethodName), Vec<Vec<f64>>> = BTreeMap::new();
    for run in runs {
        let mut by_run: BTreeMap<(&str, &str, MethodName), Vec<&SampleRecord>> = BTreeMap::new();
        for r in run {
            by_run.entry((r.run_id.as_str(), r.dataset.as_str(), r.method)).or_default().push(r);
        }
        for ((_, dataset, method), records) in by_run {
            let slot = table
                .entry((dataset.to_string(), method))
                .or_insert_with(|| vec![Vec::new(); METRICS.len()]);
            for (i, metric) in METRICS.iter().enumerate() {
                let mean = records.iter().map(|r| metric_value(r, metric)).sum::<f64>() / records.len() as f64;
                slot[i].push(mean);
            }
        }
    }
    let mut rows = Vec::new();
    for ((dataset, method), per_metric) in table {
        for (i, metric) in METRICS.iter().enumerate() {
            let (mean, std) = mean_std(&per_metric[i]);
            rows.push(AggregateRow { dataset: dataset.clone(), method, metric, mean, std, runs: per_metric[i].len() });
        }
    }
    rows
}

/// Reads record files (one run each) and aggregates them. Runs that ended
/// with an error line still contribute the records written before the
/// failure; a warning is logged.
pub fn aggregate_files(files: &[PathBuf]) -> Result<Vec<AggregateRow>> {
    if files.is_empty() {
        return Err(Error::invalid("no record files given"));
    }
    let mut runs = Vec::with_capacity(files.len());
    for path in files {
        let mut records = Vec::new();
        for line in read_record_file(path)? {
            match line {
                RecordLine::Sample(r) => records.push(r),
                RecordLine::Error(e) => {
                    log::warn!("{}: run {} ended with an error: {}", path.display(), e.run_id, e.error)
                }
            }
        }
        runs.push(records);
    }
    Ok(aggregate_runs(&runs))
}

pub const CSV_HEADER: &str = "dataset,method,metric,mean,std,runs";

pub fn write_csv(rows: &[AggregateRow], out: &mut (impl Write + ?Sized)) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", csv_field(&r.dataset), r.method, r.metric, r.mean, r.std, r.runs)?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
