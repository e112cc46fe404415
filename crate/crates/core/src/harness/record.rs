//! JSONL record schema: one line per (sample, method), plus an optional
//! terminal error line when a run aborts.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::MethodName;
use crate::error::{Error, Result};
use crate::metrics::MetricRow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub run_id: String,
    pub dataset: String,
    pub seed: u64,
    pub sample_id: String,
    pub method: MethodName,
    pub target_class: u8,
    pub tdd: f64,
    pub odd: f64,
    pub leak_abs: f64,
    pub leak_signed: f64,
    pub insertion: f64,
    pub stability: f64,
    pub runtime_ms: f64,
}

impl SampleRecord {
    pub fn metrics(&self) -> MetricRow {
        MetricRow {
            tdd: self.tdd,
            odd: self.odd,
            leak_abs: self.leak_abs,
            leak_signed: self.leak_signed,
            insertion: self.insertion,
            stability: self.stability,
            runtime_ms: self.runtime_ms,
        }
    }
}

/// Written as the last line of a run that stopped on a model failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorRecord {
    pub run_id: String,
    pub error: String,
}

/// A sample that produced no records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipRecord {
    pub run_id: String,
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordLine {
    Sample(SampleRecord),
    Error(ErrorRecord),
}

pub fn write_line<T: Serialize>(out: &mut impl Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn parse_line(line: &str) -> Result<RecordLine> {
    let value: serde_json::Value = serde_json::from_str(line)?;
    if value.get("error").is_some() {
        Ok(RecordLine::Error(serde_json::from_value(value)?))
    } else {
        serde_json::from_value(value)
            .map(RecordLine::Sample)
            .map_err(|e| Error::invalid(format!("record does not match the sample schema: {e}")))
    }
}

pub fn read_records(reader: impl BufRead) -> Result<Vec<RecordLine>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line)?);
    }
    Ok(out)
}

pub fn read_record_file(path: &Path) -> Result<Vec<RecordLine>> {
    let file = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path.display())),
        other => other,
    })
}
