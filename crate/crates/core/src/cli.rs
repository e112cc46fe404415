//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, unreadable or invalid
//! config), 2 runtime failure, 3 selftest failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::attribution::{Explainer, FusionParams, GridSpec, Method, MethodName, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GRID};
use crate::bridge::{serve, BridgeAdapter};
use crate::error::{Error, Result};
use crate::harness::config::DEFAULT_MICRO_CLASSES;
use crate::harness::{aggregate_files, netpbm, run_benchmark, select_target, write_csv, RunConfig};
use crate::model::{MicroModel, ModelAdapter};
use crate::perturb::{apply, Perturbation, PerturbationKind};
use crate::tensor::Heatmap;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "segattr", version, about = "Attribution benchmark for semantic segmentation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every method on every sample of a dataset and write JSONL records.
    Run(RunArgs),
    /// Aggregate record files (one per run) into mean ± std per metric.
    Aggregate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explain one image and write the heatmap as PGM.
    Explain(ExplainArgs),
    /// Apply one perturbation to an image, for inspection.
    Perturb {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        kind: PerturbationKind,
        #[arg(long, default_value_t = crate::harness::config::DEFAULT_STRENGTH)]
        strength: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the built-in micro model over the bridge protocol on stdio.
    Serve {
        #[arg(long, default_value_t = 0)]
        model_seed: u64,
        #[arg(long, default_value_t = DEFAULT_MICRO_CLASSES)]
        classes: usize,
    },
    /// Run gradient checks and oracle equivalences.
    Selftest,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub strength: Option<f64>,
    /// Record file; overrides the config's `output`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ExplainArgs {
    /// Binary PPM (P6) input image.
    #[arg(long)]
    pub image: PathBuf,
    /// Binary PGM (P5) label map.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub method: MethodName,
    /// Target class; defaults to the most frequent non-background label.
    #[arg(long)]
    pub class: Option<u8>,
    /// Heatmap destination (PGM, values round(255·A)).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the full-precision heatmap as JSON.
    #[arg(long)]
    pub values: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    #[arg(long, default_value_t = DEFAULT_MICRO_CLASSES)]
    pub classes: usize,
    /// Explain a bridge model instead of the micro model: program and
    /// arguments, e.g. `--bridge python -m bridge --model fcn`.
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    pub bridge: Option<Vec<String>>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

#[derive(Serialize)]
struct HeatmapValues<'a> {
    height: usize,
    width: usize,
    values: &'a [f64],
}

fn load_config(args: &RunArgs) -> std::result::Result<RunConfig, Failure> {
    let mut c = RunConfig::load(&args.config)
        .map_err(|e| Failure::Usage(format!("cannot use config {}: {e}", args.config.display())))?;
    if let Some(v) = args.workers {
        c.workers = v;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.k {
        c.k = v;
    }
    if let Some(v) = args.grid {
        c.grid = v;
    }
    if let Some(v) = args.alpha {
        c.alpha = v;
    }
    if let Some(v) = args.beta {
        c.beta = v;
    }
    if let Some(v) = args.strength {
        c.strength = v;
    }
    if let Some(v) = &args.output {
        c.output = v.clone();
    }
    c.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(c)
}

fn run(args: &RunArgs, out: &mut dyn Write) -> std::result::Result<(), Failure> {
    let config = load_config(args)?;
    let summary = run_benchmark(&config)?;
    writeln!(
        out,
        "wrote {} records to {} ({} samples skipped)",
        summary.records.len(),
        summary.output.display(),
        summary.skipped.len()
    )
    .map_err(Error::from)?;
    Ok(())
}

fn explain(args: &ExplainArgs) -> std::result::Result<(), Failure> {
    let params = FusionParams::new(args.alpha, args.beta).map_err(|e| Failure::Usage(e.to_string()))?;
    let grid = GridSpec::new(args.grid).map_err(|e| Failure::Usage(e.to_string()))?;
    let image = netpbm::read_ppm(&args.image)?;
    let labels = netpbm::read_labels(&args.mask)?;
    if (labels.height(), labels.width()) != (image.height(), image.width()) {
        return Err(Error::invalid("image and label map differ in size").into());
    }
    let (class, mask) = match args.class {
        Some(c) => (c, labels.class_mask(c)),
        None => select_target(&labels)?,
    };
    let mut adapter: Box<dyn ModelAdapter> = match &args.bridge {
        Some(command) => Box::new(BridgeAdapter::spawn(command)?),
        None => Box::new(MicroModel::new(args.model_seed, args.classes)?),
    };
    let method = Method::from_name(args.method, params, grid);
    let heatmap = method.explain(adapter.as_mut(), &image, class as usize, &mask)?;
    write_heatmap(&heatmap, &args.out, args.values.as_deref())?;
    Ok(())
}

fn write_heatmap(heatmap: &Heatmap, pgm: &Path, values: Option<&Path>) -> Result<()> {
    netpbm::write_bytes(pgm, &netpbm::encode_heatmap(heatmap))?;
    if let Some(path) = values {
        let v = HeatmapValues { height: heatmap.height(), width: heatmap.width(), values: heatmap.data() };
        netpbm::write_bytes(path, &serde_json::to_vec(&v)?)?;
    }
    Ok(())
}

fn aggregate(files: &[PathBuf], dest: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let rows = aggregate_files(files)?;
    match dest {
        Some(path) => {
            let mut buf = Vec::new();
            write_csv(&rows, &mut buf)?;
            netpbm::write_bytes(path, &buf)
        }
        None => write_csv(&rows, out),
    }
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> i32 {
    let result: std::result::Result<i32, Failure> = (|| match &cli.command {
        Command::Run(args) => run(args, out).map(|_| EXIT_OK),
        Command::Aggregate { files, out: dest } => Ok(aggregate(files, dest.as_deref(), out).map(|_| EXIT_OK)?),
        Command::Explain(args) => explain(args).map(|_| EXIT_OK),
        Command::Perturb { image, kind, strength, seed, out: dest } => {
            let img = netpbm::read_ppm(image)?;
            let p = Perturbation::new(*kind, *strength, *seed);
            netpbm::write_bytes(dest, &netpbm::encode_ppm(&apply(&img, &p)?))?;
            Ok(EXIT_OK)
        }
        Command::Serve { model_seed, classes } => {
            let mut model = MicroModel::new(*model_seed, *classes)?;
            let stdin = std::io::stdin().lock();
            serve(&mut model, "conv2", stdin, std::io::stdout().lock())?;
            Ok(EXIT_OK)
        }
        Command::Selftest => {
            let checks = crate::selftest::run_all()?;
            let mut all = true;
            for c in &checks {
                writeln!(out, "{c}").map_err(Error::from)?;
                all &= c.passed;
            }
            Ok(if all { EXIT_OK } else { EXIT_SELFTEST })
        }
    })();
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let mut cmd = <Cli as clap::CommandFactory>::command();
            let name = match &cli.command {
                Command::Run(_) => "run",
                Command::Explain(_) => "explain",
                _ => "",
            };
            let usage = cmd.find_subcommand_mut(name).map(|c| c.render_usage()).unwrap_or_else(|| cmd.render_usage());
            eprintln!("{usage}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli, &mut std::io::stdout().lock()),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
