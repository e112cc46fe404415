//! Run orchestration: samples × methods → JSONL records.
//!
//! Samples are claimed by a pool of workers (each with its own adapter) and
//! written by a single serializer in sample order, so the output does not
//! depend on scheduling.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use crate::attribution::{Explainer, Method};
use crate::error::{Error, Result};
use crate::metrics::{Evaluation, StabilitySettings};
use crate::model::ModelAdapter;

use super::config::{DatasetSpec, RunConfig};
use super::dataset::{directory_ids, load_sample, resize_sample, select_target, synth_sample_with, Sample};
use super::netpbm;
use super::record::{write_line, ErrorRecord, SampleRecord, SkipRecord};

/// SplitMix64 finalizer over a pair, for per-sample seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lazily loaded samples, in sorted id order.
pub enum Dataset {
    Synthetic { count: usize, size: usize, seed: u64, max_class: u8 },
    Directory { path: PathBuf, ids: Vec<String>, resize: Option<usize> },
}

impl Dataset {
    pub fn from_spec(spec: &DatasetSpec, run_seed: u64) -> Result<Self> {
        Ok(match spec {
            DatasetSpec::Synthetic { count, size, seed, max_class, .. } => {
                Dataset::Synthetic { count: *count, size: *size, seed: seed.unwrap_or(run_seed), max_class: *max_class }
            }
            DatasetSpec::Directory { path, resize, .. } => {
                Dataset::Directory { path: path.clone(), ids: directory_ids(path)?, resize: *resize }
            }
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Synthetic { count, .. } => *count,
            Dataset::Directory { ids, .. } => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        match self {
            Dataset::Synthetic { size, seed, max_class, .. } => {
                let mut s = synth_sample_with(derive_seed(*seed, index as u64), *size, *max_class)?;
                s.id = format!("synth-{index:05}");
                Ok(s)
            }
            Dataset::Directory { path, ids, resize } => {
                let s = load_sample(path, &ids[index])?;
                match resize {
                    Some(n) => resize_sample(&s, *n),
                    None => Ok(s),
                }
            }
        }
    }
}

#[derive(Debug)]
pub enum Outcome {
    Records(Vec<SampleRecord>),
    Skipped(SkipRecord),
}

/// Everything a worker needs besides its adapter.
pub struct RunContext {
    pub config: RunConfig,
    pub dataset_name: String,
    pub methods: Vec<Method>,
}

impl RunContext {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let methods = config.methods()?;
        let dataset_name = config.dataset.name();
        Ok(Self { config, dataset_name, methods })
    }

    fn skip(&self, sample_id: &str, reason: impl Into<String>) -> Outcome {
        Outcome::Skipped(SkipRecord {
            run_id: self.config.run_id.clone(),
            sample_id: sample_id.to_string(),
            reason: reason.into(),
        })
    }

    /// Scores every method on one sample. `warmed` tracks which methods have
    /// already had their discarded warm-up call on this adapter.
    pub fn evaluate_sample(
        &self,
        adapter: &mut dyn ModelAdapter,
        warmed: &mut HashSet<String>,
        index: usize,
        sample: &Sample,
    ) -> Result<Outcome> {
        let (class, mask) = match select_target(&sample.labels) {
            Ok(t) => t,
            Err(e) if e.is_sample_skip() => return Ok(self.skip(&sample.id, e.to_string())),
            Err(e) => return Err(e),
        };
        if class as usize >= adapter.num_classes() {
            return Ok(self.skip(
                &sample.id,
                format!("target class {class} outside the model's {} classes", adapter.num_classes()),
            ));
        }
        if mask.popcount() == mask.data().len() {
            return Ok(self.skip(&sample.id, "target mask covers the whole image"));
        }
        let c = &self.config;
        let eval = Evaluation {
            k: c.k,
            stability: StabilitySettings {
                strength: c.strength,
                seed: derive_seed(c.seed, index as u64),
                coefficients: c.perturbation,
            },
        };
        let image = &sample.image;
        let mut records = Vec::with_capacity(self.methods.len());
        for method in &self.methods {
            let name = method.name();
            if warmed.insert(name.clone()) {
                if let Err(e) = method.explain(adapter, image, class as usize, &mask) {
                    if e.is_sample_skip() {
                        warmed.remove(&name);
                        return Ok(self.skip(&sample.id, e.to_string()));
                    }
                    return Err(e);
                }
            }
            let (row, heatmap) = match eval.evaluate(method, adapter, image, class as usize, &mask) {
                Ok(r) => r,
                Err(e) if e.is_sample_skip() => return Ok(self.skip(&sample.id, e.to_string())),
                Err(e) => return Err(e),
            };
            if let Some(dir) = &c.heatmap_dir {
                let path = dir.join(format!("{}_{}.pgm", sample.id, name));
                netpbm::write_bytes(&path, &netpbm::encode_heatmap(&heatmap))?;
            }
            records.push(SampleRecord {
                run_id: c.run_id.clone(),
                dataset: self.dataset_name.clone(),
                seed: c.seed,
                sample_id: sample.id.clone(),
                method: method.kind(),
                target_class: class,
                tdd: row.tdd,
                odd: row.odd,
                leak_abs: row.leak_abs,
                leak_signed: row.leak_signed,
                insertion: row.insertion,
                stability: row.stability,
                runtime_ms: row.runtime_ms,
            });
        }
        Ok(Outcome::Records(records))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub records: Vec<SampleRecord>,
    pub skipped: Vec<SkipRecord>,
    pub output: PathBuf,
    pub skip_log: PathBuf,
}

/// `run.jsonl` → `run.skipped.jsonl`
pub fn skip_log_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    output.with_file_name(format!("{stem}.skipped.jsonl"))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Executes a run described by `config`, writing records to
/// `config.output` and skipped samples to [`skip_log_path`].
///
/// A model failure stops the run: records of earlier samples stay on disk,
/// an [`ErrorRecord`] line is appended and the error is returned.
pub fn run_benchmark(config: &RunConfig) -> Result<RunSummary> {
    let ctx = RunContext::new(config.clone())?;
    let dataset = Dataset::from_spec(&config.dataset, config.seed)?;
    if let Some(dir) = &config.heatmap_dir {
        std::fs::create_dir_all(dir)?;
    }
    let skip_log = skip_log_path(&config.output);
    let mut out = create(&config.output)?;
    let mut skips = create(&skip_log)?;

    let total = dataset.len();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<Outcome>)>();

    let mut summary = RunSummary { records: Vec::new(), skipped: Vec::new(), output: config.output.clone(), skip_log };
    let mut failure: Option<Error> = None;

    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..config.workers.min(total.max(1)) {
            let tx = tx.clone();
            let (ctx, dataset, next, stop) = (&ctx, &dataset, &next, &stop);
            scope.spawn(move || {
                let mut adapter: Option<Box<dyn ModelAdapter + Send>> = None;
                let mut warmed = HashSet::new();
                while !stop.load(Ordering::SeqCst) {
                    let index = next.fetch_add(1, Ordering::SeqCst);
                    if index >= total {
                        break;
                    }
                    let result = (|| {
                        if adapter.is_none() {
                            adapter = Some(ctx.config.adapter.build(ctx.config.seed)?);
                        }
                        let sample = dataset.load(index)?;
                        let adapter = adapter.as_mut().expect("adapter built above");
                        ctx.evaluate_sample(adapter.as_mut(), &mut warmed, index, &sample)
                    })();
                    let failed = result.is_err();
                    if tx.send((index, result)).is_err() || failed {
                        stop.store(true, Ordering::SeqCst);
                        break;
                    }
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<usize, Result<Outcome>> = BTreeMap::new();
        let mut write_next = 0usize;
        for (index, result) in rx.iter() {
            pending.insert(index, result);
            while let Some(result) = pending.remove(&write_next) {
                write_next += 1;
                match result {
                    Ok(Outcome::Records(records)) => {
                        for r in &records {
                            write_line(&mut out, r)?;
                        }
                        out.flush()?;
                        summary.records.extend(records);
                    }
                    Ok(Outcome::Skipped(skip)) => {
                        log::warn!("skipping sample {}: {}", skip.sample_id, skip.reason);
                        write_line(&mut skips, &skip)?;
                        summary.skipped.push(skip);
                    }
                    Err(e) => {
                        stop.store(true, Ordering::SeqCst);
                        write_line(&mut out, &ErrorRecord { run_id: config.run_id.clone(), error: e.to_string() })?;
                        failure = Some(e);
                        break;
                    }
                }
            }
            if failure.is_some() {
                break;
            }
        }
        Ok(())
    })?;

    out.flush()?;
    skips.flush()?;
    match failure {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}
