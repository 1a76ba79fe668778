//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ovf_core::checkpoint::Checkpoint;
use ovf_core::data::Dataset;
use ovf_core::device::DeviceConfig;
use ovf_core::evaluation::{monte_carlo_eval, EvalReport, McOptions};
use ovf_core::models::ModelSpec;
use ovf_core::report::{aggregate, render_table, write_report_csv, ReportRow};
use ovf_core::training::{self, beta_search, clean_accuracy, OvfConfig, Regime, TrainConfig, TrainOutcome};
use ovf_core::{Error, Float};

use crate::config::{ExperimentConfig, Manifest};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const BETA_FILE: &str = "beta_search.csv";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn mc_options(config: &ExperimentConfig, runs: usize) -> McOptions {
    McOptions {
        runs,
        seed: config.seed,
        batch_size: config.eval.batch_size,
        kl_direction: config.eval.kl_direction,
        noise_mode: ovf_core::device::NoiseMode::Device,
    }
}

/// Training configuration of `regime` at training noise `sigma_d` and `seed`.
fn regime_config(config: &ExperimentConfig, regime: Regime, sigma_d: f64, seed: u64) -> TrainConfig {
    let mut c = config.train.clone();
    c.regime = regime;
    c.seed = seed;
    c.device.sigma_d = if regime == Regime::Vanilla { 0.0 } else { sigma_d };
    c.ovf = match regime {
        Regime::Ovf => Some(config.train.ovf.clone().unwrap_or_else(|| OvfConfig::with_beta(training::BETA_GRID[1]))),
        _ => None,
    };
    c
}

fn train_model(
    spec: &ModelSpec,
    train: &Dataset<Float>,
    val: Option<&Dataset<Float>>,
    config: &TrainConfig,
) -> Result<TrainOutcome<Float>> {
    let outcome = training::train(spec, train, val, config)?;
    if let Some(d) = &outcome.diagnostic {
        log::warn!("{} (seed {}, sigma_d {}) did not converge: {d}", config.regime, config.seed, config.device.sigma_d);
    }
    Ok(outcome)
}

pub fn train(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = &config.output_dir;
    create_dir(dir)?;
    let (train_set, test_set) = config.load_data::<Float>()?;
    let outcome = train_model(&config.model, &train_set, Some(&test_set), &config.train)?;
    let val_accuracy = clean_accuracy(&outcome.params, &config.model, &test_set, config.eval.batch_size)?;

    let mut metrics = csv::Writer::from_path(dir.join(METRICS_FILE))?;
    metrics.write_record(["epoch", "learning_rate", "mean_loss", "train_accuracy", "val_accuracy"])?;
    for m in &outcome.history {
        metrics.write_record([
            m.epoch.to_string(),
            m.learning_rate.to_string(),
            m.mean_loss.to_string(),
            m.train_accuracy.to_string(),
            m.val_accuracy.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    metrics.flush()?;

    let ckpt = Checkpoint::new(config.model.clone(), outcome.params)?
        .with_metadata("regime", config.train.regime)
        .with_metadata("seed", config.seed)
        .with_metadata("sigma_d", config.train.device.sigma_d)
        .with_metadata("converged", outcome.converged)
        .with_metadata("val_accuracy", val_accuracy);
    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    if let Some(bayes) = config.bayes_accuracy() {
        println!("bayes-optimal accuracy of the synthetic task: {bayes:.4}");
    }
    println!(
        "trained {} for {} epochs: clean test accuracy {val_accuracy:.4}{}",
        config.train.regime,
        outcome.history.len(),
        if outcome.converged { "" } else { " (did not converge)" }
    );
    let manifest = Manifest::new("train", config, None, vec![CHECKPOINT_FILE.into(), METRICS_FILE.into()]);
    Ok(vec![dir.join(CHECKPOINT_FILE), dir.join(METRICS_FILE), manifest.write(dir)?])
}

pub fn eval(config: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::<Float>::load(checkpoint)?;
    let regime: Regime = ckpt
        .metadata
        .get("regime")
        .map(|r| r.parse())
        .transpose()?
        .unwrap_or(config.train.regime);
    let converged = ckpt.metadata.get("converged").is_none_or(|c| c == "true");
    let dir = &config.output_dir;
    create_dir(dir)?;
    let (_, test_set) = config.load_data::<Float>()?;
    let mut rows = Vec::new();
    for &sigma in &config.eval.sigma_grid {
        let device = config.train.device.with_sigma(sigma);
        let report = monte_carlo_eval(&ckpt.params, &ckpt.spec, &test_set, &device, &mc_options(config, config.eval.runs))?;
        rows.push(ReportRow::from_eval(regime, &report, usize::from(!converged)));
    }
    write_report_csv(&dir.join(EVAL_FILE), &rows)?;
    print!("{}", render_table(&rows));
    let manifest = Manifest::new("eval", config, Some(checkpoint.to_path_buf()), vec![EVAL_FILE.into()]);
    Ok(vec![dir.join(EVAL_FILE), manifest.write(dir)?])
}

fn evaluate(
    params: &ovf_core::ParamSet32,
    config: &ExperimentConfig,
    test_set: &Dataset<Float>,
    sigma: f64,
) -> Result<EvalReport> {
    let device: DeviceConfig = config.train.device.with_sigma(sigma);
    Ok(monte_carlo_eval(params, &config.model, test_set, &device, &mc_options(config, config.eval.runs))?)
}

pub fn sweep(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = &config.output_dir;
    create_dir(dir)?;
    let (train_set, test_set) = config.load_data::<Float>()?;
    let seeds = config.sweep_seeds();
    let grid = &config.eval.sigma_grid;
    // cells[regime][sigma] holds one (report, converged) per seed.
    let mut cells = vec![vec![Vec::new(); grid.len()]; Regime::ALL.len()];
    for &seed in &seeds {
        let vanilla = train_model(
            &config.model,
            &train_set,
            None,
            &regime_config(config, Regime::Vanilla, 0.0, seed),
        )?;
        for (j, &sigma) in grid.iter().enumerate() {
            log::info!("seed {seed}, sigma_d {sigma}");
            cells[0][j].push((evaluate(&vanilla.params, config, &test_set, sigma)?, vanilla.converged));
            for (i, regime) in [(1, Regime::NoiseInjection), (2, Regime::Ovf)] {
                let out = train_model(&config.model, &train_set, None, &regime_config(config, regime, sigma, seed))?;
                cells[i][j].push((evaluate(&out.params, config, &test_set, sigma)?, out.converged));
            }
        }
    }
    let mut rows = Vec::new();
    for (i, regime) in Regime::ALL.into_iter().enumerate() {
        for (j, &sigma) in grid.iter().enumerate() {
            rows.push(aggregate(regime, sigma, &cells[i][j])?);
        }
    }
    write_report_csv(&dir.join(SWEEP_FILE), &rows)?;
    print!("{}", render_table(&rows));
    let manifest = Manifest::new("sweep", config, None, vec![SWEEP_FILE.into()]);
    Ok(vec![dir.join(SWEEP_FILE), manifest.write(dir)?])
}

pub fn beta_search_cmd(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = &config.output_dir;
    create_dir(dir)?;
    let (train_set, _) = config.load_data::<Float>()?;
    let holdout = ((train_set.len() as f64) * config.beta_search.holdout_fraction).round() as usize;
    let split = train_set.len() - holdout.clamp(1, train_set.len() - 1);
    let fit = train_set.range(0, split)?;
    let held = train_set.range(split, train_set.len())?;
    let sigma = config.train.device.sigma_d;
    let runs = config.beta_search.runs.unwrap_or(config.eval.runs);

    let (best, outcomes) = beta_search(&config.beta_search.candidates, |beta| {
        let mut c = regime_config(config, Regime::Ovf, sigma, config.seed);
        if let Some(e) = config.beta_search.epochs {
            c.epochs = e;
        }
        if let Some(o) = c.ovf.as_mut() {
            o.beta = beta;
        }
        let out = training::train(&config.model, &fit, None, &c)?;
        if !out.converged {
            return Err(Error::Validation(out.diagnostic.unwrap_or_else(|| "did not converge".into())));
        }
        let device = config.train.device.with_sigma(sigma);
        Ok(monte_carlo_eval(&out.params, &config.model, &held, &device, &mc_options(config, runs))?.mean_accuracy)
    })?;

    let path = dir.join(BETA_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["beta", "sigma_d", "runs", "mean_acc", "status"])?;
    println!("{:>8} {:>7} {:>5} {:>9}  status", "beta", "sigma_d", "runs", "mean_acc");
    for c in &outcomes {
        let status = match (&c.error, c.beta == best) {
            (Some(e), _) => format!("failed: {e}"),
            (None, true) => "selected".into(),
            (None, false) => "ok".into(),
        };
        let acc = c.score.map(|s| s.to_string()).unwrap_or_default();
        println!(
            "{:>8} {:>7} {:>5} {:>9}  {status}",
            c.beta,
            sigma,
            runs,
            c.score.map_or("-".into(), |s| format!("{s:.4}"))
        );
        w.write_record([c.beta.to_string(), sigma.to_string(), runs.to_string(), acc, status])?;
    }
    w.flush()?;
    println!("best beta: {best}");
    let manifest = Manifest::new("beta-search", config, None, vec![BETA_FILE.into()]);
    Ok(vec![path, manifest.write(dir)?])
}

pub fn report(paths: &[PathBuf]) -> Result<()> {
    for path in paths {
        let rows = ovf_core::report::read_report_csv(path).with_context(|| format!("reading {}", path.display()))?;
        println!("{}", path.display());
        print!("{}", render_table(&rows));
    }
    Ok(())
}
