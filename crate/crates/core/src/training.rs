//! Training regimes: vanilla, Gaussian noise injection, and oriented
//! variational forwards (OVF) with a negative constraint.
//!
//! An OVF step runs one backbone forward with device noise at `σ_d`, then
//! `N` further forwards from the same clean weights with noise at increasing
//! `σ_1 < … < σ_N`, and trains on the logit combination
//!
//! ```text
//! O_total = a_b·O_backbone − a_f·β·Σ_n γ_n·Out_n,   γ_n = 10^(n−N)
//! ```
//!
//! with a single backward pass once every output exists. Gradients reach the
//! clean weights through straight-through noise nodes, so each forward adds
//! its contribution to the same parameter leaves.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::device::{DeviceConfig, DeviceNoise, NoiseMode, WeightNoise};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{self, Identity, ModelSpec, Noisy, ParamSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Candidate negative-constraint coefficients for the four-step search.
pub const BETA_GRID: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

/// Consecutive iterations above the loss ceiling before a run counts as diverged.
pub const DIVERGENCE_PATIENCE: usize = 100;
/// Loss ceiling as a multiple of the first iteration's loss.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Vanilla,
    NoiseInjection,
    Ovf,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Vanilla, Regime::NoiseInjection, Regime::Ovf];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Vanilla => "vanilla",
            Regime::NoiseInjection => "noise_injection",
            Regime::Ovf => "ovf",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Regime::Vanilla),
            "noise_injection" | "noise-injection" => Ok(Regime::NoiseInjection),
            "ovf" => Ok(Regime::Ovf),
            other => Err(Error::invalid(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// `σ_n = σ_d + n·Δσ`, clipped to `end` when one is configured.
    #[default]
    Increment,
    /// `σ_n = start + n·(end − start)/N`.
    Linspace,
}

/// What the constraint combination operates on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Logits,
    /// Softmax outputs are combined and the combination is fed to the same loss.
    Probabilities,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OvfConfig {
    /// Number of oriented variational forwards.
    #[serde(default = "default_n")]
    pub n: usize,
    pub beta: f64,
    #[serde(default)]
    pub start: f64,
    /// Upper end of the σ schedule; `2·σ_d` when absent (see [`sigma_schedule`]).
    #[serde(default)]
    pub end: Option<f64>,
    #[serde(default = "default_delta_sigma")]
    pub delta_sigma: f64,
    /// Backbone contribution, `1/(N+1)` when absent.
    #[serde(default)]
    pub a_b: Option<f64>,
    /// Constraint contribution, `1/(N+1)` when absent.
    #[serde(default)]
    pub a_f: Option<f64>,
    #[serde(default)]
    pub schedule_mode: ScheduleMode,
    #[serde(default)]
    pub combine: Combine,
    /// One standard-normal realization per weight, scaled to every forward's σ.
    #[serde(default)]
    pub shared_noise: bool,
}

fn default_n() -> usize {
    3
}

fn default_delta_sigma() -> f64 {
    0.05
}

impl OvfConfig {
    /// `N = 3`, `Δσ = 0.05`, `start = 0`, `a_b = a_f = 1/(N+1)`.
    pub fn with_beta(beta: f64) -> Self {
        Self {
            n: default_n(),
            beta,
            start: 0.0,
            end: None,
            delta_sigma: default_delta_sigma(),
            a_b: None,
            a_f: None,
            schedule_mode: ScheduleMode::Increment,
            combine: Combine::Logits,
            shared_noise: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::invalid("OVF needs at least one variational forward"));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::invalid(format!("beta = {} must be >= 0", self.beta)));
        }
        if !(self.delta_sigma.is_finite() && self.delta_sigma > 0.0) {
            return Err(Error::invalid("delta_sigma must be > 0"));
        }
        if self.start < 0.0 || self.end.is_some_and(|e| e <= self.start) {
            return Err(Error::invalid("need 0 <= start < end"));
        }
        Ok(())
    }

    pub fn a_b(&self) -> f64 {
        self.a_b.unwrap_or(1.0 / (self.n as f64 + 1.0))
    }

    pub fn a_f(&self) -> f64 {
        self.a_f.unwrap_or(1.0 / (self.n as f64 + 1.0))
    }

    /// `γ_n = 10^(n−N)` for `n = 1..=N`.
    pub fn gammas(&self) -> Vec<f64> {
        (1..=self.n)
            .map(|k| 10f64.powi(k as i32 - self.n as i32))
            .collect()
    }

    /// `[a_b, −a_f·β·γ_1, …, −a_f·β·γ_N]`.
    pub fn coefficients(&self) -> Vec<f64> {
        let mut c = vec![self.a_b()];
        c.extend(self.gammas().into_iter().map(|g| -self.a_f() * self.beta * g));
        c
    }
}

/// Noise levels of the `N` oriented forwards at device variation `sigma_d`.
///
/// In increment mode the levels step up from `σ_d` and are only clipped when
/// `end` is set explicitly; clipping can produce ties at `end`. In linspace
/// mode `end` defaults to `2·σ_d`.
pub fn sigma_schedule(config: &OvfConfig, sigma_d: f64) -> Result<Vec<f64>> {
    config.validate()?;
    if !(sigma_d.is_finite() && sigma_d >= 0.0) {
        return Err(Error::invalid(format!("sigma_d = {sigma_d} must be >= 0")));
    }
    let n = config.n;
    Ok(match config.schedule_mode {
        ScheduleMode::Increment => (1..=n)
            .map(|k| {
                let s = sigma_d + k as f64 * config.delta_sigma;
                config.end.map_or(s, |e| s.min(e))
            })
            .collect(),
        ScheduleMode::Linspace => {
            let end = config.end.unwrap_or(2.0 * sigma_d);
            if end <= config.start {
                return Err(Error::invalid(format!(
                    "linspace schedule needs end ({end}) > start ({})",
                    config.start
                )));
            }
            let step = (end - config.start) / n as f64;
            (1..=n).map(|k| config.start + k as f64 * step).collect()
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every` epochs.
    #[serde(default)]
    pub lr_decay_every: Option<usize>,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub device: DeviceConfig,
    #[serde(default)]
    pub noise_mode: NoiseMode,
    #[serde(default)]
    pub ovf: Option<OvfConfig>,
}

fn default_batch() -> usize {
    64
}

fn default_momentum() -> f64 {
    0.9
}

fn default_decay() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn new(regime: Regime, epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            regime,
            epochs,
            batch_size: default_batch(),
            learning_rate,
            momentum: default_momentum(),
            lr_decay_every: None,
            lr_decay: default_decay(),
            seed,
            device: DeviceConfig::default(),
            noise_mode: NoiseMode::Device,
            ovf: (regime == Regime::Ovf).then(|| OvfConfig::with_beta(BETA_GRID[1])),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0, 1)"));
        }
        self.device.validate()?;
        match (self.regime, &self.ovf) {
            (Regime::Ovf, Some(ovf)) => ovf.validate(),
            (Regime::Ovf, None) => Err(Error::invalid("regime ovf needs an [ovf] section")),
            (_, Some(_)) => Err(Error::invalid(format!(
                "[ovf] section given for regime {}",
                self.regime
            ))),
            (_, None) => Ok(()),
        }
    }

    fn ovf(&self) -> Result<&OvfConfig> {
        self.ovf
            .as_ref()
            .ok_or_else(|| Error::invalid("regime ovf needs an [ovf] section"))
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay_every {
            Some(every) if every > 0 => self.learning_rate * self.lr_decay.powi((epoch / every) as i32),
            _ => self.learning_rate,
        }
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `w ← w − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate: T::of(learning_rate),
            momentum: T::of(momentum),
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        }
        for ((_, p), v) in params.iter_mut().zip(&mut self.velocity) {
            let Some(g) = p.grad().map(<[T]>::to_vec) else { continue };
            for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *w -= self.learning_rate * *vi;
            }
        }
    }
}

/// Loss and backbone logits of one recorded objective.
pub struct Objective {
    pub loss: Var,
    pub backbone: Var,
    /// Noise level of every forward, backbone first.
    pub sigmas: Vec<f64>,
}

/// Records the OVF objective on `graph`.
#[allow(clippy::too_many_arguments)]
pub fn ovf_objective<T: Real, N: WeightNoise<T> + ?Sized>(
    graph: &mut Graph<T>,
    bound: &models::Bound,
    spec: &ModelSpec,
    input: Var,
    labels: &[usize],
    sigma_d: f64,
    ovf: &OvfConfig,
    noise: &mut N,
) -> Result<Objective> {
    let schedule = sigma_schedule(ovf, sigma_d)?;
    let coefficients = ovf.coefficients();

    let backbone = models::forward_graph(graph, bound, spec, input, &mut Noisy::new(noise, sigma_d))?;
    let mut outputs = vec![backbone];
    for &sigma in &schedule {
        outputs.push(models::forward_graph(graph, bound, spec, input, &mut Noisy::new(noise, sigma))?);
    }
    if ovf.combine == Combine::Probabilities {
        for out in outputs.iter_mut() {
            *out = graph.softmax(*out)?;
        }
    }
    let terms: Vec<(T, Var)> = coefficients
        .iter()
        .zip(&outputs)
        .map(|(&c, &v)| (T::of(c), v))
        .collect();
    let total = graph.linear_combination(&terms)?;
    let loss = graph.softmax_cross_entropy(total, labels)?;

    let mut sigmas = vec![sigma_d];
    sigmas.extend(schedule);
    Ok(Objective {
        loss,
        backbone,
        sigmas,
    })
}

/// Result of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Top-1 hits of the backbone output on this batch.
    pub correct: usize,
    pub sigmas: Vec<f64>,
}

/// Zeroes the parameter gradients, records the regime's objective, runs one
/// backward pass and accumulates into the gradient slots. No update.
#[allow(clippy::too_many_arguments)]
pub fn compute_gradients<T: Real, N: WeightNoise<T> + ?Sized>(
    regime: Regime,
    params: &mut ParamSet<T>,
    spec: &ModelSpec,
    batch: &Tensor<T>,
    labels: &[usize],
    config: &TrainConfig,
    noise: &mut N,
    iteration: usize,
) -> Result<StepOutcome> {
    if labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    params.zero_grads();
    noise.begin_step();
    let sigma_d = config.device.sigma_d;

    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let input = graph.input(batch.detached());
    let objective = match regime {
        Regime::Vanilla => {
            let logits = models::forward_graph(&mut graph, &bound, spec, input, &mut Identity)?;
            Objective {
                loss: graph.softmax_cross_entropy(logits, labels)?,
                backbone: logits,
                sigmas: vec![0.0],
            }
        }
        Regime::NoiseInjection => {
            let logits =
                models::forward_graph(&mut graph, &bound, spec, input, &mut Noisy::new(noise, sigma_d))?;
            Objective {
                loss: graph.softmax_cross_entropy(logits, labels)?,
                backbone: logits,
                sigmas: vec![sigma_d],
            }
        }
        Regime::Ovf => ovf_objective(
            &mut graph,
            &bound,
            spec,
            input,
            labels,
            sigma_d,
            config.ovf()?,
            noise,
        )?,
    };

    let loss = graph.value(objective.loss).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            sigmas: objective.sigmas,
        });
    }
    graph.backward(objective.loss)?;
    params.accumulate_grads(&graph, &bound)?;

    let predictions = models::predict(graph.value(objective.backbone));
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(StepOutcome {
        loss,
        correct,
        sigmas: objective.sigmas,
    })
}

/// Clean forward, cross-entropy, backward, SGD update.
pub fn vanilla_step<T: Real>(
    params: &mut ParamSet<T>,
    spec: &ModelSpec,
    batch: &Tensor<T>,
    labels: &[usize],
    config: &TrainConfig,
    optimizer: &mut Sgd<T>,
    iteration: usize,
) -> Result<StepOutcome> {
    let mut none = NoNoise;
    let out = compute_gradients(Regime::Vanilla, params, spec, batch, labels, config, &mut none, iteration)?;
    optimizer.step(params);
    Ok(out)
}

/// One forward with device noise at `σ_d`, then as [`vanilla_step`].
#[allow(clippy::too_many_arguments)]
pub fn noise_injection_step<T: Real, N: WeightNoise<T> + ?Sized>(
    params: &mut ParamSet<T>,
    spec: &ModelSpec,
    batch: &Tensor<T>,
    labels: &[usize],
    config: &TrainConfig,
    optimizer: &mut Sgd<T>,
    noise: &mut N,
    iteration: usize,
) -> Result<StepOutcome> {
    let out = compute_gradients(
        Regime::NoiseInjection,
        params,
        spec,
        batch,
        labels,
        config,
        noise,
        iteration,
    )?;
    optimizer.step(params);
    Ok(out)
}

/// Backbone plus `N` oriented forwards, combined negatively, one backward, SGD update.
#[allow(clippy::too_many_arguments)]
pub fn ovf_step<T: Real, N: WeightNoise<T> + ?Sized>(
    params: &mut ParamSet<T>,
    spec: &ModelSpec,
    batch: &Tensor<T>,
    labels: &[usize],
    config: &TrainConfig,
    optimizer: &mut Sgd<T>,
    noise: &mut N,
    iteration: usize,
) -> Result<StepOutcome> {
    let out = compute_gradients(Regime::Ovf, params, spec, batch, labels, config, noise, iteration)?;
    optimizer.step(params);
    Ok(out)
}

struct NoNoise;

impl<T: Real> WeightNoise<T> for NoNoise {
    fn perturb(&mut self, _slot: usize, weights: &Tensor<T>, _sigma: f64) -> Result<Tensor<T>> {
        Ok(weights.detached())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    /// Backbone top-1 accuracy on the training batches seen this epoch.
    pub train_accuracy: f64,
    /// Clean accuracy on the validation set, when one is given.
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: ParamSet<T>,
    pub history: Vec<EpochMetrics>,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

/// Independent deterministic RNG streams derived from one seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// Full training run of `config.regime` on `train`.
///
/// A non-finite loss or a loss stuck above 10× its initial value for
/// [`DIVERGENCE_PATIENCE`] iterations stops the run and marks it non-converged.
pub fn train<T: Real>(
    spec: &ModelSpec,
    train: &Dataset<T>,
    validation: Option<&Dataset<T>>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut params = models::build(spec, &mut rng_stream(config.seed, STREAM_INIT))?;
    let mut shuffle_rng = rng_stream(config.seed, STREAM_SHUFFLE);
    let mut noise = DeviceNoise::new(
        config.device.clone(),
        config.noise_mode,
        rng_stream(config.seed, STREAM_NOISE),
    )
    .shared(config.ovf.as_ref().is_some_and(|o| o.shared_noise));
    let mut optimizer = Sgd::new(config.learning_rate, config.momentum);

    let mut history = Vec::new();
    let mut iteration = 0;
    let mut initial_loss = None;
    let mut above = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        optimizer.learning_rate = T::of(lr);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct, mut seen, mut batches) = (0.0, 0, 0, 0);

        for chunk in order.chunks(config.batch_size) {
            let batch = train.select(chunk)?;
            let step = match config.regime {
                Regime::Vanilla => vanilla_step(
                    &mut params,
                    spec,
                    &batch.inputs,
                    &batch.labels,
                    config,
                    &mut optimizer,
                    iteration,
                ),
                Regime::NoiseInjection => noise_injection_step(
                    &mut params,
                    spec,
                    &batch.inputs,
                    &batch.labels,
                    config,
                    &mut optimizer,
                    &mut noise,
                    iteration,
                ),
                Regime::Ovf => ovf_step(
                    &mut params,
                    spec,
                    &batch.inputs,
                    &batch.labels,
                    config,
                    &mut optimizer,
                    &mut noise,
                    iteration,
                ),
            };
            let step = match step {
                Ok(s) => s,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    log::warn!("{} run diverged: {e}", config.regime);
                    return Ok(TrainOutcome {
                        params,
                        history,
                        converged: false,
                        diagnostic: Some(e.to_string()),
                    });
                }
                Err(e) => return Err(e),
            };
            iteration += 1;
            let first = *initial_loss.get_or_insert(step.loss);
            if step.loss > DIVERGENCE_FACTOR * first {
                above += 1;
                if above >= DIVERGENCE_PATIENCE {
                    let msg = format!(
                        "loss above {DIVERGENCE_FACTOR}x initial ({first:.4}) for {above} iterations at iteration {iteration}"
                    );
                    log::warn!("{} run diverged: {msg}", config.regime);
                    return Ok(TrainOutcome {
                        params,
                        history,
                        converged: false,
                        diagnostic: Some(msg),
                    });
                }
            } else {
                above = 0;
            }
            loss_sum += step.loss;
            correct += step.correct;
            seen += chunk.len();
            batches += 1;
        }

        let val_accuracy = validation
            .map(|v| clean_accuracy(&params, spec, v, 500))
            .transpose()?;
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            learning_rate: lr,
            mean_loss: loss_sum / batches.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val_accuracy,
        };
        log::info!(
            "{} epoch {}: loss {:.4} train acc {:.4} val acc {:?}",
            config.regime,
            metrics.epoch,
            metrics.mean_loss,
            metrics.train_accuracy,
            metrics.val_accuracy
        );
        history.push(metrics);
    }
    Ok(TrainOutcome {
        params,
        history,
        converged: true,
        diagnostic: None,
    })
}

/// Noise-free top-1 accuracy.
pub fn clean_accuracy<T: Real>(
    params: &ParamSet<T>,
    spec: &ModelSpec,
    data: &Dataset<T>,
    batch_size: usize,
) -> Result<f64> {
    let mut correct = 0;
    for (x, labels) in data.batches(batch_size) {
        let logits = models::forward(params, spec, &x, &mut Identity)?;
        correct += models::predict(&logits)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Outcome of one β candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct BetaCandidate {
    pub beta: f64,
    /// Mean Monte Carlo accuracy, `None` when the candidate failed.
    pub score: Option<f64>,
    pub error: Option<String>,
}

/// Evaluates every candidate and returns the best β (ties go to the smaller β).
pub fn beta_search<F>(candidates: &[f64], mut evaluate: F) -> Result<(f64, Vec<BetaCandidate>)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::invalid("beta search needs at least one candidate"));
    }
    let outcomes: Vec<BetaCandidate> = candidates
        .iter()
        .map(|&beta| match evaluate(beta) {
            Ok(score) if score.is_finite() => BetaCandidate {
                beta,
                score: Some(score),
                error: None,
            },
            Ok(score) => BetaCandidate {
                beta,
                score: None,
                error: Some(format!("non-finite score {score}")),
            },
            Err(e) => BetaCandidate {
                beta,
                score: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let best = outcomes
        .iter()
        .filter_map(|c| c.score.map(|s| (c.beta, s)))
        .fold(None::<(f64, f64)>, |best, (beta, s)| match best {
            Some((bb, bs)) if bs > s || (bs == s && bb <= beta) => Some((bb, bs)),
            _ => Some((beta, s)),
        });
    match best {
        Some((beta, _)) => Ok((beta, outcomes)),
        None => Err(Error::AllCandidatesFailed(
            outcomes
                .iter()
                .map(|c| format!("beta={}: {}", c.beta, c.error.as_deref().unwrap_or("?")))
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{FrozenNoise, RecordingNoise};
    use rand::Rng;

    #[test]
    fn coefficients_for_three_forwards() {
        let cfg = OvfConfig::with_beta(0.1);
        let c = cfg.coefficients();
        let want = [0.25, -0.25 * 0.1 * 0.01, -0.25 * 0.1 * 0.1, -0.25 * 0.1 * 1.0];
        for (a, b) in c.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{c:?}");
        }
        assert_eq!(cfg.gammas().last(), Some(&1.0));
    }

    #[test]
    fn coefficient_signs_and_monotonicity() {
        for n in 1..6 {
            for beta in BETA_GRID {
                let cfg = OvfConfig {
                    n,
                    ..OvfConfig::with_beta(beta)
                };
                let c = cfg.coefficients();
                assert!(c[0] > 0.0);
                assert!(c[1..].iter().all(|&x| x < 0.0));
                assert!(c[1..].windows(2).all(|w| w[1].abs() > w[0].abs()));
                assert!((cfg.a_b() - 1.0 / (n as f64 + 1.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn schedules() {
        let cfg = OvfConfig::with_beta(0.1);
        let s = sigma_schedule(&cfg, 0.1).unwrap();
        for (a, b) in s.iter().zip([0.15, 0.20, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
        let one = OvfConfig {
            n: 1,
            ..cfg.clone()
        };
        assert_eq!(sigma_schedule(&one, 0.0).unwrap(), vec![0.05]);

        let lin = OvfConfig {
            n: 4,
            end: Some(0.4),
            schedule_mode: ScheduleMode::Linspace,
            ..cfg.clone()
        };
        let s = sigma_schedule(&lin, 0.2).unwrap();
        for (a, b) in s.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((a - b).abs() < 1e-12);
        }
        let clipped = OvfConfig {
            end: Some(0.2),
            ..cfg.clone()
        };
        assert_eq!(sigma_schedule(&clipped, 0.1).unwrap().last(), Some(&0.2));

        let bad = OvfConfig { n: 0, ..cfg };
        assert!(sigma_schedule(&bad, 0.1).is_err());
    }

    #[test]
    fn config_requires_ovf_section_iff_ovf() {
        let mut c = TrainConfig::new(Regime::Ovf, 1, 0.1, 0);
        assert!(c.validate().is_ok());
        c.ovf = None;
        assert!(c.validate().is_err());
        let mut v = TrainConfig::new(Regime::Vanilla, 1, 0.1, 0);
        assert!(v.validate().is_ok());
        v.ovf = Some(OvfConfig::with_beta(0.1));
        assert!(v.validate().is_err());
    }

    fn toy() -> (ModelSpec, ParamSet<f64>, Tensor<f64>, Vec<usize>) {
        let spec = ModelSpec::mlp(&[6, 5, 3]);
        let params = models::build(&spec, &mut rng_stream(7, 0)).unwrap();
        let mut rng = rng_stream(7, 9);
        let x = Tensor::new(vec![4, 6], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (spec, params, x, vec![0, 2, 1, 2])
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let (spec, mut params, x, y) = toy();
        let before = params.fingerprint();
        let cfg = TrainConfig::new(Regime::Vanilla, 1, 0.0, 0);
        let mut opt = Sgd::new(0.0, 0.9);
        vanilla_step(&mut params, &spec, &x, &y, &cfg, &mut opt, 0).unwrap();
        assert_eq!(params.fingerprint(), before);
    }

    #[test]
    fn zero_sigma_noise_injection_matches_vanilla() {
        let (spec, mut a, x, y) = toy();
        let mut b = a.clone();
        let cfg = TrainConfig::new(Regime::NoiseInjection, 1, 0.05, 0);
        // Off-grid weights make the σ = 0 device transform a pure quantizer,
        // so compare against weights already on the grid.
        for p in [&mut a, &mut b] {
            for (name, t) in p.iter_mut() {
                if name.ends_with("weight") {
                    *t = crate::device::quantize(t, &cfg.device).unwrap().dequantized();
                }
            }
        }
        let mut oa = Sgd::new(0.05, 0.9);
        let mut ob = Sgd::new(0.05, 0.9);
        let mut noise = DeviceNoise::new(cfg.device.clone(), NoiseMode::Device, rng_stream(1, 2));
        let la = vanilla_step(&mut a, &spec, &x, &y, &cfg, &mut oa, 0).unwrap();
        let lb = noise_injection_step(&mut b, &spec, &x, &y, &cfg, &mut ob, &mut noise, 0).unwrap();
        assert_eq!(la.loss, lb.loss);
        assert_eq!(a, b);
    }

    /// Records the clean weights every forward sees, per slot.
    struct Spy {
        seen: Vec<(usize, u64)>,
    }

    impl WeightNoise<f64> for Spy {
        fn perturb(&mut self, slot: usize, w: &Tensor<f64>, sigma: f64) -> Result<Tensor<f64>> {
            let mut p = ParamSet::new();
            p.insert("w", w.detached()).unwrap();
            self.seen.push((slot, p.fingerprint()));
            Ok(w.map(|v| v * (1.0 + sigma)))
        }
    }

    #[test]
    fn every_forward_reads_the_same_clean_weights() {
        let (spec, mut params, x, y) = toy();
        let mut cfg = TrainConfig::new(Regime::Ovf, 1, 0.1, 0);
        cfg.device.sigma_d = 0.1;
        let mut spy = Spy { seen: Vec::new() };
        compute_gradients(Regime::Ovf, &mut params, &spec, &x, &y, &cfg, &mut spy, 0).unwrap();
        assert_eq!(spy.seen.len(), 2 * 4);
        for slot in 0..2 {
            let hashes: Vec<u64> = spy.seen.iter().filter(|s| s.0 == slot).map(|s| s.1).collect();
            assert_eq!(hashes.len(), 4);
            assert!(hashes.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn pinned_noise_runs_are_reproducible() {
        let (spec, params, x, y) = toy();
        let mut cfg = TrainConfig::new(Regime::Ovf, 1, 0.1, 0);
        cfg.device.sigma_d = 0.2;
        let run = || {
            let mut p = params.clone();
            let mut opt = Sgd::new(0.1, 0.9);
            let mut noise = DeviceNoise::new(cfg.device.clone(), NoiseMode::Device, rng_stream(3, 2));
            for it in 0..3 {
                ovf_step(&mut p, &spec, &x, &y, &cfg, &mut opt, &mut noise, it).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_noise_reproduces_recorded_gradients() {
        let (spec, mut params, x, y) = toy();
        let mut cfg = TrainConfig::new(Regime::Ovf, 1, 0.1, 0);
        cfg.device.sigma_d = 0.2;
        let mut rec = RecordingNoise::new(DeviceNoise::new(
            cfg.device.clone(),
            NoiseMode::Device,
            rng_stream(5, 2),
        ));
        let a = compute_gradients(Regime::Ovf, &mut params, &spec, &x, &y, &cfg, &mut rec, 0).unwrap();
        let grads: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.grad().unwrap().to_vec()).collect();
        let mut frozen: FrozenNoise<f64> = rec.frozen();
        let b = compute_gradients(Regime::Ovf, &mut params, &spec, &x, &y, &cfg, &mut frozen, 0).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for ((_, t), g) in params.iter().zip(&grads) {
            for (x, y) in t.grad().unwrap().iter().zip(g) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn beta_search_harness() {
        let (b, rows) = beta_search(&[0.5], |_| Ok(0.1)).unwrap();
        assert_eq!((b, rows.len()), (0.5, 1));

        let mut calls = 0;
        let (b, _) = beta_search(&BETA_GRID, |beta| {
            calls += 1;
            Ok(if beta == 1e-3 { 0.9 } else { 0.5 })
        })
        .unwrap();
        assert_eq!((b, calls), (1e-3, 4));

        let (b, _) = beta_search(&BETA_GRID, |_| Ok(0.7)).unwrap();
        assert_eq!(b, 1e-4);

        let (b, rows) = beta_search(&BETA_GRID, |beta| {
            if beta > 1e-3 {
                Err(Error::invalid("diverged"))
            } else {
                Ok(beta)
            }
        })
        .unwrap();
        assert_eq!(b, 1e-3);
        assert!(rows[0].score.is_none());

        let err = beta_search(&BETA_GRID, |_| Err(Error::invalid("boom"))).unwrap_err();
        assert!(matches!(err, Error::AllCandidatesFailed(ref m) if m.matches("boom").count() == 4));
        assert!(beta_search(&[], |_| Ok(1.0)).is_err());
    }

    #[test]
    fn divergence_is_reported_not_raised() {
        let spec = ModelSpec::mlp(&[6, 3]);
        let data = crate::data::SyntheticDatasetSpec {
            num_classes: 3,
            samples_per_class: 20,
            input_dim: 6,
            cluster_separation: 0.0,
        }
        .generate::<f64>(1)
        .unwrap();
        let mut cfg = TrainConfig::new(Regime::Vanilla, 2 * DIVERGENCE_PATIENCE, 1e6, 0);
        cfg.batch_size = data.len();
        cfg.momentum = 0.0;
        let out = train(&spec, &data, None, &cfg).unwrap();
        assert!(!out.converged);
        assert!(out.diagnostic.is_some());
    }
}
