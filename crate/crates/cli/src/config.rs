//! Experiment files.
//!
//! One TOML document per experiment. Every table except `name` is optional;
//! each verb checks for the tables it needs. Relative paths resolve against
//! the directory holding the config file.

use std::path::{Path, PathBuf};

use adabatch::data::{load_csv, split, standardize, synth_blobs, CsvSchema};
use adabatch::sim::{CostModel, HessianPlan};
use adabatch::{Batch, Dataset, ModelKind, ModelSpec, Strategy, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// `BL`, `GG`, `ABS`, `ABSA`, or `GD` (full-batch gradient descent).
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub theory: Option<TheoryConfig>,
    #[serde(default)]
    pub simulate: Vec<Scenario>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_strategies() -> Vec<String> {
    vec!["ABS".into()]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
    Blobs {
        n: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Rows `z_i ~ N(0, noise²·I)`, the per-example offsets of a quadratic
    /// objective. Labels are zero.
    Gaussian {
        n: usize,
        dim: usize,
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Training rows; the remainder becomes the validation split.
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default)]
    pub split_seed: u64,
    /// Standardize features with training statistics. Defaults to on for
    /// logistic models and off otherwise.
    #[serde(default)]
    pub standardize: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    /// `[batch, steps]` pairs.
    pub phases: Vec<(usize, usize)>,
    /// Base step size; when absent `eta0_fraction · eta0_max` is used.
    #[serde(default)]
    pub eta0: Option<f64>,
    #[serde(default = "default_fraction")]
    pub eta0_fraction: f64,
    #[serde(default = "default_theory_seeds")]
    pub seeds: usize,
    /// Every coordinate of the starting point.
    #[serde(default = "default_init")]
    pub init: f64,
    /// Random points for the variance fit and the strong-convexity check.
    #[serde(default = "default_points")]
    pub sample_points: usize,
    #[serde(default = "default_radius")]
    pub sample_radius: f64,
    #[serde(default = "default_lemma_batches")]
    pub lemma4_batches: Vec<usize>,
    #[serde(default = "default_draws")]
    pub lemma4_draws: usize,
}

fn default_fraction() -> f64 {
    0.9
}
fn default_theory_seeds() -> usize {
    100
}
fn default_init() -> f64 {
    1.0
}
fn default_points() -> usize {
    100
}
fn default_radius() -> f64 {
    2.0
}
fn default_lemma_batches() -> Vec<usize> {
    vec![1, 10, 100]
}
fn default_draws() -> usize {
    2000
}

/// A cost-simulation scenario: either explicit phases and costs, or the
/// `resnet18-imagenet` preset (published breakdown plus calibrated replay).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub phases: Vec<(usize, usize)>,
    #[serde(default)]
    pub dataset_size: Option<usize>,
    #[serde(default)]
    pub cost: Option<CostModel>,
    #[serde(default)]
    pub hessian: Option<HessianPlan>,
    #[serde(default)]
    pub baseline_total: Option<f64>,
}

pub const PRESET_IMAGENET: &str = "resnet18-imagenet";

/// A labelled strategy: `GD` runs `BL` with the batch fixed at the dataset
/// size.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub label: String,
    pub strategy: Strategy,
    pub full_batch: bool,
}

/// Parsed config plus the identity of the run it describes.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    /// SHA-256 over the config bytes and any command-line overrides.
    pub hash: String,
    pub run_id: String,
}

impl Loaded {
    pub fn read(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| CliError::Validation(format!("{}: config is not UTF-8", path.display())))?;
        let mut config: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        if let Some(s) = seed_override {
            hasher.update(format!("\nseed-override={s}").as_bytes());
            config.seeds = vec![s];
        }
        let hash = hex::encode(hasher.finalize());
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.validate(&base_dir)?;
        let run_id = format!("{}-{}", config.name, &hash[..12]);
        Ok(Self { config, base_dir, hash, run_id })
    }

    pub fn output_root(&self, out: Option<&Path>) -> PathBuf {
        match (out, &self.config.output_dir) {
            (Some(o), _) => o.to_path_buf(),
            (None, Some(d)) if d.is_absolute() => d.clone(),
            (None, Some(d)) => self.base_dir.join(d),
            (None, None) => self.base_dir.join("runs"),
        }
    }

    pub fn run_dir(&self, out: Option<&Path>) -> PathBuf {
        self.output_root(out).join(&self.run_id)
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn validate(&self, base_dir: &Path) -> Result<(), CliError> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(invalid("name", "must be non-empty and use only [A-Za-z0-9._-]"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        self.arms()?;
        self.train.validate().map_err(|e| invalid("train", e))?;
        if let Some(d) = &self.dataset {
            if let DataSource::Csv { path, .. } = &d.source {
                let p = base_dir.join(path);
                if !p.is_file() {
                    return Err(invalid("dataset.path", format!("{} does not exist", p.display())));
                }
            }
        }
        if let Some(m) = &self.model {
            adabatch::Model::from_spec(m).map_err(|e| invalid("model", e))?;
        }
        if let Some(t) = &self.theory {
            if t.phases.is_empty() || t.phases.iter().any(|&(b, _)| b == 0) {
                return Err(invalid("theory.phases", "need at least one phase with batch >= 1"));
            }
            if t.seeds == 0 {
                return Err(invalid("theory.seeds", "must be >= 1"));
            }
            if !(t.eta0_fraction > 0.0) {
                return Err(invalid("theory.eta0_fraction", "must be > 0"));
            }
        }
        for (i, s) in self.simulate.iter().enumerate() {
            let field = |f: &str| format!("simulate[{i}].{f}");
            match s.preset.as_deref() {
                Some(PRESET_IMAGENET) => {}
                Some(other) => return Err(invalid(&field("preset"), format!("unknown preset `{other}`"))),
                None => {
                    if s.phases.is_empty() {
                        return Err(invalid(&field("phases"), "required without a preset"));
                    }
                    let cost = s.cost.as_ref().ok_or_else(|| invalid(&field("cost"), "required without a preset"))?;
                    cost.validate().map_err(|e| invalid(&field("cost"), e))?;
                    if s.dataset_size.unwrap_or(0) == 0 {
                        return Err(invalid(&field("dataset_size"), "required and >= 1 without a preset"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn arms(&self) -> Result<Vec<Arm>, CliError> {
        if self.strategies.is_empty() {
            return Err(invalid("strategies", "at least one strategy is required"));
        }
        let mut arms = Vec::with_capacity(self.strategies.len());
        for (i, s) in self.strategies.iter().enumerate() {
            let label = s.trim().to_ascii_uppercase();
            let arm = if label == "GD" {
                Arm { label, strategy: Strategy::Bl, full_batch: true }
            } else {
                let strategy = label.parse::<Strategy>().map_err(|e| invalid(&format!("strategies[{i}]"), e))?;
                Arm { label, strategy, full_batch: false }
            };
            if arms.iter().any(|a: &Arm| a.label == arm.label) {
                return Err(invalid(&format!("strategies[{i}]"), format!("duplicate strategy `{}`", arm.label)));
            }
            arms.push(arm);
        }
        Ok(arms)
    }

    pub fn model_spec(&self) -> Result<&ModelSpec, CliError> {
        self.model.as_ref().ok_or_else(|| invalid("model", "this command needs a [model] table"))
    }

    pub fn dataset_config(&self) -> Result<&DatasetConfig, CliError> {
        self.dataset.as_ref().ok_or_else(|| invalid("dataset", "this command needs a [dataset] table"))
    }
}

/// Training and optional validation splits.
pub fn load_data(cfg: &DatasetConfig, model: &ModelSpec, base_dir: &Path) -> Result<(Dataset, Option<Dataset>), CliError> {
    let full = match &cfg.source {
        DataSource::Csv { path, schema } => load_csv(base_dir.join(path), schema).map_err(|e| invalid("dataset", e))?,
        DataSource::Blobs { n, dim, separation, seed } => {
            synth_blobs(*n, *dim, *separation, *seed).map_err(|e| invalid("dataset", e))?
        }
        DataSource::Gaussian { n, dim, noise, seed } => gaussian_rows(*n, *dim, *noise, *seed)?,
    };
    let (mut train, mut val) = match cfg.n_train {
        Some(k) => {
            let (a, b) = split(&full, k, cfg.split_seed).map_err(|e| invalid("dataset.n_train", e))?;
            (a, Some(b))
        }
        None => (full, None),
    };
    if cfg.standardize.unwrap_or(model.kind == ModelKind::Logistic) {
        match &mut val {
            Some(v) => {
                standardize(&mut train, v).map_err(|e| invalid("dataset", e))?;
            }
            None => {
                let norm = train.fit_normalization();
                train.apply_normalization(&norm).map_err(|e| invalid("dataset", e))?;
            }
        }
    }
    Ok((train, val))
}

fn gaussian_rows(n: usize, dim: usize, noise: f64, seed: u64) -> Result<Dataset, CliError> {
    if n == 0 || dim == 0 || !(noise >= 0.0) {
        return Err(invalid("dataset", "gaussian source needs n >= 1, dim >= 1 and noise >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * dim).map(|_| noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let batch = Batch::new(x, vec![0.0; n], dim).map_err(|e| invalid("dataset", e))?;
    Dataset::new(format!("gaussian-n{n}-d{dim}"), batch).map_err(|e| invalid("dataset", e))
}
