//! Monte Carlo evaluation under device variation.
//!
//! Every run programs one chip: each weight tensor is perturbed once and the
//! perturbed network classifies the whole test set. Runs draw from their own
//! ChaCha8 stream derived from `(seed, run)`, so results do not depend on how
//! runs are scheduled across threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::device::{DeviceConfig, DeviceNoise, NoiseMode, WeightNoise};
use crate::error::{Error, Result};
use crate::graph::neg_log_softmax;
use crate::models::{self, ModelSpec, ParamSet, Programmed};
use crate::scalar::Real;
use crate::training::rng_stream;

/// Accuracy drop below the mean that marks a run as non-converged.
pub const NONCONVERGED_MARGIN: f64 = 0.05;
/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.96;

/// Direction of the KL divergence between the one-hot label and the softmax output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(label ‖ output) = −log p_true`.
    #[default]
    LabelToOutput,
    /// `KL(output ‖ label)`: zero for an exactly one-hot output, infinite otherwise.
    OutputToLabel,
}

/// Divergence of one softmax row from the one-hot `label`.
pub fn kl_to_label(probs: &[f64], label: usize, direction: KlDirection) -> f64 {
    match direction {
        KlDirection::LabelToOutput => -probs[label].ln(),
        KlDirection::OutputToLabel => {
            if probs.iter().enumerate().all(|(j, &p)| j == label || p == 0.0) {
                0.0
            } else {
                f64::INFINITY
            }
        }
    }
}

/// Mean divergence over correctly classified samples.
///
/// `probs` holds one softmax row per sample. Fails with
/// [`Error::UndefinedEkl`] when no prediction is correct.
pub fn ekl_divergence(
    probs: &[Vec<f64>],
    labels: &[usize],
    direction: KlDirection,
) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::dim("ekl_divergence", &[probs.len()], &[labels.len()]));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (row, &label) in probs.iter().zip(labels) {
        if argmax(row) == label {
            sum += kl_to_label(row, label, direction);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedEkl);
    }
    Ok(sum / count as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStats {
    pub mean: f64,
    pub threshold: f64,
    /// Indices of runs whose accuracy is below `mean − margin`.
    pub nonconverged: Vec<usize>,
}

impl ConvergenceStats {
    pub fn count(&self) -> usize {
        self.nonconverged.len()
    }
}

/// Flags runs whose accuracy falls more than `margin` below the mean.
pub fn convergence_stats(accuracies: &[f64], margin: f64) -> Result<ConvergenceStats> {
    if accuracies.len() < 2 {
        return Err(Error::invalid("convergence_stats needs at least two runs"));
    }
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let threshold = mean - margin;
    Ok(ConvergenceStats {
        mean,
        threshold,
        nonconverged: accuracies
            .iter()
            .enumerate()
            .filter(|(_, &a)| a < threshold)
            .map(|(i, _)| i)
            .collect(),
    })
}

/// Mean, sample standard deviation and 95% CI half-width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
    /// `false` when the interval is meaningless (a single run).
    pub ci_defined: bool,
}

/// Welford summary; identical samples give a standard deviation of exactly zero.
pub fn summarize(values: &[f64]) -> Summary {
    let (mut mean, mut m2) = (0.0, 0.0);
    for (k, &x) in values.iter().enumerate() {
        let d = x - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (x - mean);
    }
    let n = values.len();
    let std = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
    let ci_defined = n > 1;
    Summary {
        n,
        mean,
        std,
        ci95: if ci_defined { ci95_halfwidth(std, n) } else { 0.0 },
        ci_defined,
    }
}

/// `1.96·std/√runs`.
pub fn ci95_halfwidth(std: f64, runs: usize) -> f64 {
    Z95 * std / (runs as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub runs: usize,
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub kl_direction: KlDirection,
    #[serde(default)]
    pub noise_mode: NoiseMode,
}

fn default_batch() -> usize {
    500
}

impl McOptions {
    pub fn new(runs: usize, seed: u64) -> Self {
        Self {
            runs,
            seed,
            batch_size: default_batch(),
            kl_direction: KlDirection::LabelToOutput,
            noise_mode: NoiseMode::Device,
        }
    }
}

/// Per-run tallies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub correct: usize,
    pub total: usize,
    pub ekl_sum: f64,
}

impl RunStats {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sigma_d: f64,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub ci_defined: bool,
    /// Pooled over the correct predictions of all runs; `None` when there are none.
    pub mean_ekl: Option<f64>,
    pub per_run_accuracy: Vec<f64>,
    pub convergence: ConvergenceStats,
}

/// Classifies `data` once with the network programmed from `run`'s noise stream.
pub fn evaluate_run<T: Real>(
    params: &ParamSet<T>,
    spec: &ModelSpec,
    data: &Dataset<T>,
    device: &DeviceConfig,
    options: &McOptions,
    run: usize,
) -> Result<RunStats> {
    let mut noise = DeviceNoise::new(
        device.clone(),
        options.noise_mode,
        rng_stream(options.seed, run as u64),
    );
    let mut weights = Vec::new();
    for (name, t) in params.iter() {
        if name.ends_with("weight") {
            let slot = weights.len();
            weights.push(noise.perturb(slot, t, device.sigma_d)?);
        }
    }
    let mut chip = Programmed { weights };
    let mut stats = RunStats {
        correct: 0,
        total: 0,
        ekl_sum: 0.0,
    };
    for (x, labels) in data.batches(options.batch_size.max(1)) {
        let logits = models::forward(params, spec, &x, &mut chip)?;
        let classes = spec.num_classes();
        let predictions = models::predict(&logits);
        for ((row, &pred), &label) in logits.data().chunks_exact(classes).zip(&predictions).zip(labels) {
            stats.total += 1;
            if pred == label {
                stats.correct += 1;
                let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                stats.ekl_sum += match options.kl_direction {
                    KlDirection::LabelToOutput => neg_log_softmax(&row, label),
                    dir => {
                        let probs = softmax(&row);
                        kl_to_label(&probs, label, dir)
                    }
                };
            }
        }
    }
    Ok(stats)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Monte Carlo accuracy and EKL of `params` under device variation `device.sigma_d`.
pub fn monte_carlo_eval<T: Real>(
    params: &ParamSet<T>,
    spec: &ModelSpec,
    data: &Dataset<T>,
    device: &DeviceConfig,
    options: &McOptions,
) -> Result<EvalReport> {
    if options.runs == 0 {
        return Err(Error::invalid("runs must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    device.validate()?;
    params.check_against(spec)?;
    let stats = (0..options.runs)
        .into_par_iter()
        .map(|run| evaluate_run(params, spec, data, device, options, run))
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from_runs(device.sigma_d, &stats))
}

/// Aggregates per-run tallies into a report.
pub fn report_from_runs(sigma_d: f64, stats: &[RunStats]) -> EvalReport {
    let accuracies: Vec<f64> = stats.iter().map(RunStats::accuracy).collect();
    let summary = summarize(&accuracies);
    let correct: usize = stats.iter().map(|s| s.correct).sum();
    let ekl_sum: f64 = stats.iter().map(|s| s.ekl_sum).sum();
    let convergence = convergence_stats(&accuracies, NONCONVERGED_MARGIN).unwrap_or(ConvergenceStats {
        mean: 0.0,
        threshold: 0.0,
        nonconverged: Vec::new(),
    });
    EvalReport {
        sigma_d,
        runs: stats.len(),
        mean_accuracy: summary.mean,
        std_accuracy: summary.std,
        ci95_halfwidth: summary.ci95,
        ci_defined: summary.ci_defined,
        mean_ekl: (correct > 0).then(|| ekl_sum / correct as f64),
        per_run_accuracy: accuracies,
        convergence,
    }
}
