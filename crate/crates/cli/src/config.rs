//! Experiment configuration files and run manifests.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ovf_core::data::{load_mnist_idx, Dataset, SyntheticDatasetSpec};
use ovf_core::evaluation::KlDirection;
use ovf_core::models::ModelSpec;
use ovf_core::training::{TrainConfig, BETA_GRID};
use ovf_core::Real;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// IDX files. Without separate test files the test split is taken from the
    /// samples after the first `train_count`.
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        train_count: Option<usize>,
        #[serde(default)]
        test_count: Option<usize>,
    },
    /// Gaussian clusters; train and test sets come from different seeds.
    Synthetic {
        num_classes: usize,
        samples_per_class: usize,
        test_samples_per_class: usize,
        input_dim: usize,
        cluster_separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_grid")]
    pub sigma_grid: Vec<f64>,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub kl_direction: KlDirection,
}

fn default_runs() -> usize {
    200
}

fn default_grid() -> Vec<f64> {
    (0..=8).map(|i| i as f64 * 0.05).collect()
}

fn default_eval_batch() -> usize {
    500
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            runs: default_runs(),
            sigma_grid: default_grid(),
            batch_size: default_eval_batch(),
            kl_direction: KlDirection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSearchSection {
    #[serde(default = "default_candidates")]
    pub candidates: Vec<f64>,
    /// Training epochs per candidate; the `[train]` value when absent.
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Monte Carlo runs per candidate; the `[eval]` value when absent.
    #[serde(default)]
    pub runs: Option<usize>,
    /// Fraction of the training split held out to score candidates.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_candidates() -> Vec<f64> {
    BETA_GRID.to_vec()
}

fn default_holdout() -> f64 {
    0.125
}

impl Default for BetaSearchSection {
    fn default() -> Self {
        Self {
            candidates: default_candidates(),
            epochs: None,
            runs: None,
            holdout_fraction: default_holdout(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Training seeds; `[seed]` when absent.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds training (initialization, shuffling, training noise) and evaluation.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub beta_search: BetaSearchSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

/// Snapshot written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_format: u32,
    pub code_version: String,
    pub command: String,
    pub seed: u64,
    /// Checkpoint evaluated by `eval`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub outputs: Vec<String>,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, checkpoint: Option<PathBuf>, outputs: Vec<String>) -> Self {
        Self {
            manifest_format: MANIFEST_FORMAT,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.seed,
            checkpoint,
            outputs,
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.toml");
        std::fs::write(&path, toml::to_string(self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// A configuration file, or a manifest whose embedded configuration is used.
#[derive(Debug)]
pub enum Loaded {
    Config(ExperimentConfig),
    Manifest(Box<Manifest>),
}

impl Loaded {
    pub fn into_config(self) -> ExperimentConfig {
        match self {
            Loaded::Config(c) => c,
            Loaded::Manifest(m) => m.config,
        }
    }
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if table.contains_key("manifest_format") {
        let manifest: Manifest = toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        if manifest.manifest_format != MANIFEST_FORMAT {
            bail!("unsupported manifest format {}", manifest.manifest_format);
        }
        if manifest.code_version != env!("CARGO_PKG_VERSION") {
            log::warn!(
                "manifest written by version {}, running {}",
                manifest.code_version,
                env!("CARGO_PKG_VERSION")
            );
        }
        return Ok(Loaded::Manifest(Box::new(manifest)));
    }
    let mut config: ExperimentConfig =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    config.resolve_paths(base);
    Ok(Loaded::Config(config))
}

impl ExperimentConfig {
    /// Makes relative paths relative to the directory of the configuration file.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let DatasetConfig::Mnist {
            images,
            labels,
            test_images,
            test_labels,
            ..
        } = &mut self.dataset
        {
            fix(images);
            fix(labels);
            test_images.iter_mut().for_each(fix);
            test_labels.iter_mut().for_each(fix);
        }
    }

    pub fn validate(&mut self) -> Result<()> {
        self.train.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.sigma_grid.is_empty() {
            bail!("eval.sigma_grid is empty");
        }
        if let Some(bad) = self.eval.sigma_grid.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            bail!("eval.sigma_grid contains {bad}; values must be >= 0");
        }
        if self.eval.runs == 0 {
            bail!("eval.runs must be >= 1");
        }
        if self.beta_search.candidates.is_empty() {
            bail!("beta_search.candidates is empty");
        }
        if !(0.0..1.0).contains(&self.beta_search.holdout_fraction) || self.beta_search.holdout_fraction == 0.0 {
            bail!("beta_search.holdout_fraction must be in (0, 1)");
        }
        if let Some(seeds) = self.sweep.as_ref().and_then(|s| s.seeds.as_ref()) {
            if seeds.is_empty() {
                bail!("sweep.seeds is empty");
            }
        }
        Ok(())
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        self.sweep
            .as_ref()
            .and_then(|s| s.seeds.clone())
            .unwrap_or_else(|| vec![self.seed])
    }

    /// Train and test splits.
    pub fn load_data<T: Real>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        match &self.dataset {
            DatasetConfig::Mnist {
                images,
                labels,
                test_images,
                test_labels,
                train_count,
                test_count,
            } => {
                let all: Dataset<T> = load_mnist_idx(images, labels)?;
                let take = |d: Dataset<T>, start: usize, count: Option<usize>| -> Result<Dataset<T>> {
                    let end = count.map_or(d.len(), |c| start + c);
                    if end > d.len() {
                        bail!("requested samples {start}..{end} but the file holds {}", d.len());
                    }
                    Ok(d.range(start, end)?)
                };
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => {
                        let test: Dataset<T> = load_mnist_idx(ti, tl)?;
                        Ok((take(all, 0, *train_count)?, take(test, 0, *test_count)?))
                    }
                    (None, None) => {
                        let n = train_count.unwrap_or(all.len() * 4 / 5);
                        let test = take(all.clone(), n, *test_count)?;
                        Ok((take(all, 0, Some(n))?, test))
                    }
                    _ => bail!("test_images and test_labels must be given together"),
                }
            }
            DatasetConfig::Synthetic {
                num_classes,
                samples_per_class,
                test_samples_per_class,
                input_dim,
                cluster_separation,
                seed,
            } => {
                let spec = |per_class| SyntheticDatasetSpec {
                    num_classes: *num_classes,
                    samples_per_class: per_class,
                    input_dim: *input_dim,
                    cluster_separation: *cluster_separation,
                };
                let train = spec(*samples_per_class).generate(*seed)?;
                let test = spec(*test_samples_per_class).generate(seed.wrapping_add(1))?;
                Ok((train, test))
            }
        }
    }

    /// Bayes-optimal accuracy of a synthetic dataset, for context in reports.
    pub fn bayes_accuracy(&self) -> Option<f64> {
        match &self.dataset {
            DatasetConfig::Synthetic {
                num_classes,
                input_dim,
                cluster_separation,
                ..
            } => Some(
                SyntheticDatasetSpec {
                    num_classes: *num_classes,
                    samples_per_class: 1,
                    input_dim: *input_dim,
                    cluster_separation: *cluster_separation,
                }
                .bayes_accuracy(),
            ),
            DatasetConfig::Mnist { .. } => None,
        }
    }
}
