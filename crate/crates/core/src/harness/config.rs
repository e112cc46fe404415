use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{FusionParams, GridSpec, Method, MethodName, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_GRID};
use crate::bridge::BridgeAdapter;
use crate::error::{Error, Result};
use crate::model::{MicroModel, ModelAdapter};
use crate::perturb::PerturbationCoefficients;

use super::dataset::DEFAULT_SYNTH_CLASSES;

pub const DEFAULT_K: f64 = 0.2;
pub const DEFAULT_STRENGTH: f64 = 0.03;
pub const DEFAULT_MICRO_CLASSES: usize = 21;

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default)]
        name: Option<String>,
        count: usize,
        size: usize,
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "default_max_class")]
        max_class: u8,
    },
    Directory {
        #[serde(default)]
        name: Option<String>,
        path: PathBuf,
        /// Resample every sample to `resize × resize` on load.
        #[serde(default)]
        resize: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Synthetic { name, .. } => name.clone().unwrap_or_else(|| "synthetic".into()),
            DatasetSpec::Directory { name, path, .. } => name.clone().unwrap_or_else(|| {
                path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
            }),
        }
    }
}

fn default_max_class() -> u8 {
    DEFAULT_SYNTH_CLASSES
}

/// Which model to explain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AdapterSpec {
    Micro {
        /// Defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "default_micro_classes")]
        classes: usize,
    },
    /// A model-serving process speaking the bridge protocol on stdio.
    Bridge { command: Vec<String> },
}

fn default_micro_classes() -> usize {
    DEFAULT_MICRO_CLASSES
}

impl AdapterSpec {
    pub fn build(&self, run_seed: u64) -> Result<Box<dyn ModelAdapter + Send>> {
        match self {
            AdapterSpec::Micro { seed, classes } => Ok(Box::new(MicroModel::new(seed.unwrap_or(run_seed), *classes)?)),
            AdapterSpec::Bridge { command } => Ok(Box::new(BridgeAdapter::spawn(command)?)),
        }
    }
}

fn default_run_id() -> String {
    "run".into()
}

fn default_methods() -> Vec<MethodName> {
    MethodName::ALL.to_vec()
}

fn default_k() -> f64 {
    DEFAULT_K
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_strength() -> f64 {
    DEFAULT_STRENGTH
}

fn default_workers() -> usize {
    1
}

/// One benchmark run. Relative paths are resolved against the directory of
/// the config file when loaded with [`RunConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub dataset: DatasetSpec,
    pub adapter: AdapterSpec,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodName>,
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_strength")]
    pub strength: f64,
    #[serde(default)]
    pub seed: u64,
    pub output: PathBuf,
    #[serde(default)]
    pub heatmap_dir: Option<PathBuf>,
    #[serde(default)]
    pub perturbation: PerturbationCoefficients,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl RunConfig {
    /// A config with every tunable at its default.
    pub fn new(dataset: DatasetSpec, adapter: AdapterSpec, output: impl Into<PathBuf>) -> Self {
        Self {
            run_id: default_run_id(),
            dataset,
            adapter,
            methods: default_methods(),
            k: DEFAULT_K,
            grid: DEFAULT_GRID,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            strength: DEFAULT_STRENGTH,
            seed: 0,
            output: output.into(),
            heatmap_dir: None,
            perturbation: PerturbationCoefficients::default(),
            workers: 1,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut config = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output);
        if let Some(dir) = self.heatmap_dir.as_mut() {
            fix(dir);
        }
        if let DatasetSpec::Directory { path, .. } = &mut self.dataset {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(Error::invalid(format!("k = {} must lie in (0, 1]", self.k)));
        }
        GridSpec::new(self.grid)?;
        FusionParams::new(self.alpha, self.beta)?;
        if !self.strength.is_finite() || self.strength < 0.0 {
            return Err(Error::invalid("strength must be finite and non-negative"));
        }
        if self.methods.is_empty() {
            return Err(Error::invalid("method list is empty"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        if let AdapterSpec::Bridge { command } = &self.adapter {
            if command.is_empty() {
                return Err(Error::invalid("bridge command is empty"));
            }
        }
        Ok(())
    }

    pub fn fusion(&self) -> Result<FusionParams> {
        FusionParams::new(self.alpha, self.beta)
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        let params = self.fusion()?;
        let grid = GridSpec::new(self.grid)?;
        Ok(self.methods.iter().map(|&m| Method::from_name(m, params, grid)).collect())
    }
}
