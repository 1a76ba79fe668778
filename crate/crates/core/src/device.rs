//! NVM programming model: quantization, bit-slicing onto multi-level devices,
//! Gaussian conductance variation and reconstruction of the programmed weight.
//!
//! A weight tensor is quantized per tensor to `M`-bit magnitudes
//! `level = round(|w|·(2^M−1)/max|W|)`; the sign is kept separately
//! (sign-magnitude mapping, negative weights live on a mirror array). Each
//! magnitude is split little-endian into `M/K` devices holding `K` bits. A
//! programmed device deviates from its target level by `Δg ~ N(0, s²)` and the
//! weight read back is
//!
//! ```text
//! w_p = w̄ + sign · (max|W| / (2^M−1)) · Σ_j Δg_j · 2^(j·K)
//! ```
//!
//! where `w̄` is the quantized weight. Conductances are measured in level
//! units, so `s = σ_d·(2^K−1)` under [`NoiseScale::MaxConductance`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Largest device variation considered realistic; larger values only warn.
pub const SIGMA_D_LIMIT: f64 = 0.4;

/// How `σ_d` translates into the standard deviation of `Δg` in level units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScale {
    /// `σ_d` is relative to the largest conductance of one device: `std = σ_d·(2^K−1)`.
    #[default]
    MaxConductance,
    /// `std = σ_d` in level units.
    Literal,
}

/// Where training-time weight noise is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// quantize → bit-slice → perturb devices → reconstruct.
    #[default]
    Device,
    /// Continuous weights plus a Gaussian with the device model's per-weight variance.
    WeightGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    /// Bits per weight (`M`).
    #[serde(default = "default_m_bits")]
    pub m_bits: u32,
    /// Bits per device (`K`).
    #[serde(default = "default_k_bits")]
    pub k_bits: u32,
    /// Relative conductance standard deviation.
    #[serde(default)]
    pub sigma_d: f64,
    #[serde(default)]
    pub noise_scale: NoiseScale,
}

fn default_m_bits() -> u32 {
    8
}

fn default_k_bits() -> u32 {
    2
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            m_bits: 8,
            k_bits: 2,
            sigma_d: 0.0,
            noise_scale: NoiseScale::MaxConductance,
        }
    }
}

impl DeviceConfig {
    pub fn new(m_bits: u32, k_bits: u32, sigma_d: f64) -> Result<Self> {
        let cfg = Self {
            m_bits,
            k_bits,
            sigma_d,
            noise_scale: NoiseScale::MaxConductance,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same device at a different variation level.
    pub fn with_sigma(&self, sigma_d: f64) -> Self {
        Self {
            sigma_d,
            ..self.clone()
        }
    }

    /// Checks the hard constraints and returns soft warnings (also logged).
    pub fn validate(&self) -> Result<Vec<String>> {
        self.check()?;
        let mut warnings = Vec::new();
        if self.sigma_d > SIGMA_D_LIMIT {
            let msg = format!(
                "sigma_d = {} is above the {SIGMA_D_LIMIT} regime considered realistic",
                self.sigma_d
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        Ok(warnings)
    }

    fn check(&self) -> Result<()> {
        if self.k_bits == 0 || self.m_bits == 0 {
            return Err(Error::invalid("M and K must be positive"));
        }
        if self.m_bits % self.k_bits != 0 {
            return Err(Error::invalid(format!(
                "M = {} is not a multiple of K = {}",
                self.m_bits, self.k_bits
            )));
        }
        if self.m_bits > 32 {
            return Err(Error::invalid(format!("M = {} exceeds 32 bits", self.m_bits)));
        }
        if !(self.sigma_d.is_finite() && self.sigma_d >= 0.0) {
            return Err(Error::invalid(format!("sigma_d = {} must be >= 0", self.sigma_d)));
        }
        Ok(())
    }

    /// `M / K`.
    pub fn devices_per_weight(&self) -> usize {
        (self.m_bits / self.k_bits) as usize
    }

    /// `2^M − 1`.
    pub fn max_level(&self) -> u64 {
        (1u64 << self.m_bits) - 1
    }

    /// `2^K − 1`.
    pub fn max_device_level(&self) -> u64 {
        (1u64 << self.k_bits) - 1
    }

    /// Standard deviation of `Δg` (level units) at variation `sigma`.
    pub fn delta_g_std(&self, sigma: f64) -> f64 {
        match self.noise_scale {
            NoiseScale::MaxConductance => sigma * self.max_device_level() as f64,
            NoiseScale::Literal => sigma,
        }
    }

    /// `Σ_j 4^(j·K)`: squared significance weights of all devices of a weight.
    pub fn significance_energy(&self) -> f64 {
        (0..self.devices_per_weight())
            .map(|j| 2f64.powi((2 * j as u32 * self.k_bits) as i32))
            .sum()
    }

    /// Closed-form per-weight variance of `w_p − w̄` for a layer with step `scale`.
    pub fn weight_variance(&self, scale: f64, sigma: f64) -> f64 {
        let s = self.delta_g_std(sigma);
        scale * scale * s * s * self.significance_energy()
    }
}

/// A weight tensor mapped onto devices.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer<T> {
    pub shape: Vec<usize>,
    /// ±1 per weight; zero weights get +1.
    pub sign: Vec<i8>,
    /// Magnitude levels in `[0, 2^M−1]`.
    pub levels: Vec<u64>,
    /// `max|W|`.
    pub max_abs: T,
    /// `max|W| / (2^M−1)`.
    pub scale: T,
    /// `M/K` device levels per weight, least significant device first.
    pub device_levels: Vec<u64>,
    pub m_bits: u32,
    pub k_bits: u32,
}

impl<T: Real> QuantizedLayer<T> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Devices of weight `i`.
    pub fn devices(&self, i: usize) -> &[u64] {
        let per = (self.m_bits / self.k_bits) as usize;
        &self.device_levels[i * per..(i + 1) * per]
    }

    /// Desired (noise-free) quantized weights `w̄`.
    pub fn dequantized(&self) -> Tensor<T> {
        let max_level = T::of(((1u64 << self.m_bits) - 1) as f64);
        let data = self
            .levels
            .iter()
            .zip(&self.sign)
            .map(|(&l, &s)| {
                let magnitude = self.max_abs * (T::of(l as f64) / max_level);
                if s < 0 {
                    -magnitude
                } else {
                    magnitude
                }
            })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("shape preserved")
    }
}

/// Per-tensor symmetric quantization to `M`-bit magnitudes plus device mapping.
///
/// An all-zero tensor yields an all-zero layer with `scale = 0`.
pub fn quantize<T: Real>(weights: &Tensor<T>, config: &DeviceConfig) -> Result<QuantizedLayer<T>> {
    config.check()?;
    if !weights.all_finite() {
        return Err(Error::invalid("cannot quantize non-finite weights"));
    }
    let max_abs = weights.max_abs();
    let max_level = config.max_level();
    let (levels, sign): (Vec<u64>, Vec<i8>) = weights
        .data()
        .iter()
        .map(|&w| {
            let level = if max_abs == T::zero() {
                0
            } else {
                let l = (w.abs() / max_abs * T::of(max_level as f64)).round().as_f64();
                (l as u64).min(max_level)
            };
            (level, if w < T::zero() { -1 } else { 1 })
        })
        .unzip();
    let device_levels = slice_to_devices(&levels, config)?;
    Ok(QuantizedLayer {
        shape: weights.shape().to_vec(),
        sign,
        levels,
        max_abs,
        scale: max_abs / T::of(max_level as f64),
        device_levels,
        m_bits: config.m_bits,
        k_bits: config.k_bits,
    })
}

/// Splits each level into `M/K` little-endian groups of `K` bits.
pub fn slice_to_devices(levels: &[u64], config: &DeviceConfig) -> Result<Vec<u64>> {
    let per = config.devices_per_weight();
    let max_level = config.max_level();
    let mask = config.max_device_level();
    let mut out = Vec::with_capacity(levels.len() * per);
    for &level in levels {
        if level > max_level {
            return Err(Error::invalid(format!(
                "level {level} exceeds 2^{} - 1",
                config.m_bits
            )));
        }
        out.extend((0..per).map(|j| (level >> (j as u32 * config.k_bits)) & mask));
    }
    Ok(out)
}

/// Inverse of [`slice_to_devices`] for one weight: `Σ_j g_j · 2^(j·K)`.
pub fn reassemble(devices: &[u64], k_bits: u32) -> u64 {
    devices
        .iter()
        .enumerate()
        .map(|(j, &g)| g << (j as u32 * k_bits))
        .sum()
}

/// Programs the layer once: fresh `Δg` for every device, returns `w_p`.
pub fn perturb<T: Real, R: Rng + ?Sized>(
    layer: &QuantizedLayer<T>,
    config: &DeviceConfig,
    rng: &mut R,
) -> Tensor<T> {
    let per = config.devices_per_weight();
    if config.sigma_d == 0.0 {
        return layer.dequantized();
    }
    let normals: Vec<T> = (0..layer.len() * per).map(|_| T::standard_normal(rng)).collect();
    perturb_with_normals(layer, config, config.sigma_d, &normals)
}

/// [`perturb`] with caller-supplied standard normals, one per device.
///
/// Reusing the same normals at several `sigma` values yields noise
/// realizations that differ only in amplitude.
pub fn perturb_with_normals<T: Real>(
    layer: &QuantizedLayer<T>,
    config: &DeviceConfig,
    sigma: f64,
    normals: &[T],
) -> Tensor<T> {
    let per = config.devices_per_weight();
    assert_eq!(normals.len(), layer.len() * per, "one normal per device");
    let mut out = layer.dequantized();
    if sigma == 0.0 {
        return out;
    }
    let std = T::of(config.delta_g_std(sigma));
    let significance: Vec<T> = (0..per)
        .map(|j| T::of(2f64.powi((j as u32 * config.k_bits) as i32)))
        .collect();
    for (i, w) in out.data_mut().iter_mut().enumerate() {
        let mut offset = T::zero();
        for (z, &sig) in normals[i * per..(i + 1) * per].iter().zip(&significance) {
            offset += std * *z * sig;
        }
        let signed = if layer.sign[i] < 0 { -offset } else { offset };
        *w += layer.scale * signed;
    }
    out
}

/// `perturb ∘ quantize`. During training the caller wires this through a
/// straight-through node so gradients reach the clean weights unchanged.
pub fn perturbed_forward_weights<T: Real, R: Rng + ?Sized>(
    weights: &Tensor<T>,
    config: &DeviceConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let layer = quantize(weights, config)?;
    Ok(perturb(&layer, config, rng))
}

/// Ablation: unquantized weights plus Gaussian noise whose per-weight variance
/// matches the device model at the same `sigma`.
pub fn weight_space_perturb<T: Real, R: Rng + ?Sized>(
    weights: &Tensor<T>,
    config: &DeviceConfig,
    sigma: f64,
    rng: &mut R,
) -> Tensor<T> {
    let scale = weights.max_abs().as_f64() / config.max_level() as f64;
    let std = T::of(config.weight_variance(scale, sigma).sqrt());
    let mut out = weights.detached();
    if sigma == 0.0 {
        return out;
    }
    for w in out.data_mut() {
        *w += std * T::standard_normal(rng);
    }
    out
}

/// Source of perturbed weights for noisy forwards.
///
/// `slot` numbers the weight tensors of one forward pass (0, 1, …) so that an
/// implementation can correlate noise across forwards of the same step.
pub trait WeightNoise<T: Real> {
    fn perturb(&mut self, slot: usize, weights: &Tensor<T>, sigma: f64) -> Result<Tensor<T>>;

    /// Marks the start of a training step.
    fn begin_step(&mut self) {}
}

/// Device-model noise driven by an explicit RNG.
#[derive(Clone, Debug)]
pub struct DeviceNoise<R> {
    pub config: DeviceConfig,
    pub mode: NoiseMode,
    /// Reuse one realization of standard normals per slot within a step.
    pub shared: bool,
    rng: R,
    cache: Vec<Option<Vec<f64>>>,
}

impl<R: Rng> DeviceNoise<R> {
    pub fn new(config: DeviceConfig, mode: NoiseMode, rng: R) -> Self {
        Self {
            config,
            mode,
            shared: false,
            rng,
            cache: Vec::new(),
        }
    }

    pub fn shared(mut self, shared: bool) -> Self {
        self.shared = shared;
        self
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }

    fn normals<T: Real>(&mut self, slot: usize, count: usize) -> Vec<T> {
        if !self.shared {
            return (0..count).map(|_| T::standard_normal(&mut self.rng)).collect();
        }
        if self.cache.len() <= slot {
            self.cache.resize(slot + 1, None);
        }
        let rng = &mut self.rng;
        let cached = self.cache[slot]
            .get_or_insert_with(|| (0..count).map(|_| f64::standard_normal(rng)).collect());
        assert_eq!(cached.len(), count, "slot {slot} changed size within a step");
        cached.iter().map(|&z| T::of(z)).collect()
    }
}

impl<T: Real, R: Rng> WeightNoise<T> for DeviceNoise<R> {
    fn perturb(&mut self, slot: usize, weights: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        match self.mode {
            NoiseMode::Device => {
                let config = self.config.with_sigma(sigma);
                let layer = quantize(weights, &config)?;
                if sigma == 0.0 {
                    return Ok(layer.dequantized());
                }
                let normals = self.normals(slot, layer.len() * config.devices_per_weight());
                Ok(perturb_with_normals(&layer, &config, sigma, &normals))
            }
            NoiseMode::WeightGaussian => {
                if sigma == 0.0 {
                    return Ok(weights.detached());
                }
                let normals: Vec<T> = self.normals(slot, weights.len());
                let scale = weights.max_abs().as_f64() / self.config.max_level() as f64;
                let std = T::of(self.config.weight_variance(scale, sigma).sqrt());
                let mut out = weights.detached();
                for (w, z) in out.data_mut().iter_mut().zip(normals) {
                    *w += std * z;
                }
                Ok(out)
            }
        }
    }

    fn begin_step(&mut self) {
        self.cache.clear();
    }
}

/// Wraps a noise source and records every offset `w_p − w` it produces.
#[derive(Debug)]
pub struct RecordingNoise<N, T> {
    pub inner: N,
    pub offsets: Vec<Vec<T>>,
}

impl<N, T> RecordingNoise<N, T> {
    pub fn new(inner: N) -> Self {
        Self {
            inner,
            offsets: Vec::new(),
        }
    }

    /// Replayer for the offsets captured so far.
    pub fn frozen(&self) -> FrozenNoise<T>
    where
        T: Clone,
    {
        FrozenNoise::new(self.offsets.clone())
    }
}

impl<T: Real, N: WeightNoise<T>> WeightNoise<T> for RecordingNoise<N, T> {
    fn perturb(&mut self, slot: usize, weights: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
        let out = self.inner.perturb(slot, weights, sigma)?;
        self.offsets
            .push(out.data().iter().zip(weights.data()).map(|(&p, &w)| p - w).collect());
        Ok(out)
    }

    fn begin_step(&mut self) {
        self.inner.begin_step();
    }
}

/// Replays recorded offsets in order: `w ↦ w + offset_k`.
///
/// With offsets frozen the perturbed loss is a smooth function of the clean
/// weights whose exact gradient equals the straight-through gradient, which
/// makes finite-difference checks of noisy objectives meaningful.
#[derive(Clone, Debug)]
pub struct FrozenNoise<T> {
    offsets: Vec<Vec<T>>,
    cursor: usize,
}

impl<T> FrozenNoise<T> {
    pub fn new(offsets: Vec<Vec<T>>) -> Self {
        Self { offsets, cursor: 0 }
    }

    pub fn rewind(&mut self) {
        self.cursor = 0;
    }
}

impl<T: Real> WeightNoise<T> for FrozenNoise<T> {
    fn perturb(&mut self, _slot: usize, weights: &Tensor<T>, _sigma: f64) -> Result<Tensor<T>> {
        let offset = self
            .offsets
            .get(self.cursor)
            .ok_or_else(|| Error::Contract("frozen noise exhausted".into()))?;
        if offset.len() != weights.len() {
            return Err(Error::dim("FrozenNoise", weights.shape(), &[offset.len()]));
        }
        self.cursor += 1;
        let mut out = weights.detached();
        for (w, &d) in out.data_mut().iter_mut().zip(offset) {
            *w += d;
        }
        Ok(out)
    }

    fn begin_step(&mut self) {
        self.rewind();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(sigma: f64) -> DeviceConfig {
        DeviceConfig::new(8, 2, sigma).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(DeviceConfig::new(8, 3, 0.1).is_err());
        assert!(DeviceConfig::new(8, 0, 0.1).is_err());
        assert!(DeviceConfig::new(8, 2, -0.1).is_err());
        assert!(cfg(0.4).validate().unwrap().is_empty());
        assert_eq!(cfg(0.5).validate().unwrap().len(), 1);
        let d = DeviceConfig::default();
        assert_eq!((d.m_bits, d.k_bits), (8, 2));
    }

    #[test]
    fn quantize_endpoints_and_hand_values() {
        let c = cfg(0.0);
        let w = Tensor::<f64>::from_f64(vec![1], &[0.37]).unwrap();
        let q = quantize(&w, &c).unwrap();
        assert_eq!(q.levels, vec![255]);
        assert_eq!(q.dequantized().data(), &[0.37]);

        let w = Tensor::<f64>::from_f64(vec![2], &[0.5, -1.0]).unwrap();
        let q = quantize(&w, &c).unwrap();
        assert_eq!(q.scale, 1.0 / 255.0);
        assert_eq!(q.levels, vec![128, 255]);
        assert_eq!(q.sign, vec![1, -1]);
        assert_eq!(q.dequantized().data(), &[128.0 / 255.0, -1.0]);
    }

    #[test]
    fn all_zero_tensor_is_degenerate_not_error() {
        let w = Tensor::<f64>::zeros(vec![4]);
        let q = quantize(&w, &cfg(0.3)).unwrap();
        assert_eq!(q.scale, 0.0);
        assert!(q.levels.iter().all(|&l| l == 0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb(&q, &cfg(0.3), &mut rng).data(), &[0.0; 4]);
    }

    #[test]
    fn quantization_error_is_at_most_half_a_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..500).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = Tensor::new(vec![500], data).unwrap();
        let q = quantize(&w, &cfg(0.0)).unwrap();
        for (a, b) in w.data().iter().zip(q.dequantized().data()) {
            assert!((a - b).abs() <= q.scale / 2.0 + 1e-15);
        }
    }

    #[test]
    fn slicing_examples() {
        let c = cfg(0.0);
        assert_eq!(slice_to_devices(&[0b1011_0010], &c).unwrap(), vec![2, 0, 3, 2]);
        assert_eq!(slice_to_devices(&[0], &c).unwrap(), vec![0; 4]);
        assert!(slice_to_devices(&[256], &c).is_err());
        let c = DeviceConfig::new(12, 4, 0.0).unwrap();
        assert_eq!(slice_to_devices(&[0xABC], &c).unwrap(), vec![0xC, 0xB, 0xA]);
    }

    #[test]
    fn slicing_round_trip_exhaustive_up_to_16_bits() {
        for (m, k) in [(8, 2), (8, 4), (8, 1), (8, 8), (12, 3), (16, 4), (16, 2)] {
            let c = DeviceConfig::new(m, k, 0.0).unwrap();
            let levels: Vec<u64> = (0..=c.max_level()).collect();
            let devices = slice_to_devices(&levels, &c).unwrap();
            let per = c.devices_per_weight();
            for (level, dev) in levels.iter().zip(devices.chunks_exact(per)) {
                assert!(dev.iter().all(|&g| g <= c.max_device_level()));
                assert_eq!(reassemble(dev, k), *level);
            }
        }
    }

    #[test]
    fn zero_sigma_perturb_is_exact() {
        let w = Tensor::<f64>::from_f64(vec![3], &[0.2, -0.7, 0.05]).unwrap();
        let q = quantize(&w, &cfg(0.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(perturb(&q, &cfg(0.0), &mut rng), q.dequantized());
    }

    #[test]
    fn grid_aligned_weights_are_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid = quantize(&Tensor::new(vec![300], data).unwrap(), &cfg(0.0))
            .unwrap()
            .dequantized();
        let again = perturbed_forward_weights(&grid, &cfg(0.0), &mut rng).unwrap();
        assert_eq!(again, grid);
    }

    #[test]
    fn noise_scale_conventions() {
        let c = cfg(0.1);
        assert!((c.delta_g_std(0.1) - 0.3).abs() < 1e-15);
        let lit = DeviceConfig {
            noise_scale: NoiseScale::Literal,
            ..c.clone()
        };
        assert_eq!(lit.delta_g_std(0.1), 0.1);
        assert_eq!(c.significance_energy(), 1.0 + 16.0 + 256.0 + 4096.0);
    }

    #[test]
    fn shared_noise_scales_one_realization() {
        let w = Tensor::<f64>::from_f64(vec![4], &[0.1, -0.5, 0.9, 0.0]).unwrap();
        let mut noise = DeviceNoise::new(cfg(0.1), NoiseMode::Device, ChaCha8Rng::seed_from_u64(2))
            .shared(true);
        let base = quantize(&w, &cfg(0.0)).unwrap().dequantized();
        let a = noise.perturb(0, &w, 0.1).unwrap();
        let b = noise.perturb(0, &w, 0.2).unwrap();
        for i in 0..4 {
            let (da, db) = (a.data()[i] - base.data()[i], b.data()[i] - base.data()[i]);
            assert!((db - 2.0 * da).abs() < 1e-12);
        }
        WeightNoise::<f64>::begin_step(&mut noise);
        let c = noise.perturb(0, &w, 0.1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn frozen_noise_replays_offsets() {
        let w = Tensor::<f64>::from_f64(vec![3], &[0.1, -0.5, 0.9]).unwrap();
        let inner = DeviceNoise::new(cfg(0.2), NoiseMode::Device, ChaCha8Rng::seed_from_u64(4));
        let mut rec = RecordingNoise::new(inner);
        let p = rec.perturb(0, &w, 0.2).unwrap();
        let mut frozen = rec.frozen();
        let replay = frozen.perturb(0, &w, 0.2).unwrap();
        for (a, b) in replay.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(frozen.perturb(0, &w, 0.2).is_err());
    }
}
