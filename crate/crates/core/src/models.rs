//! Desk-scale networks: a fully connected MLP and a LeNet-style SmallCNN.

use std::hash::Hasher;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::device::WeightNoise;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

const CNN_KERNEL: usize = 3;
const CNN_POOL: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `layer_sizes = [input, hidden…, classes]`, ReLU between layers.
    Mlp { layer_sizes: Vec<usize> },
    /// conv3×3 → relu → pool2 → conv3×3 → relu → pool2 → flatten → linear.
    SmallCnn {
        input_shape: [usize; 3],
        channels: [usize; 2],
        num_classes: usize,
    },
}

impl ModelSpec {
    pub fn mlp(layer_sizes: &[usize]) -> Self {
        ModelSpec::Mlp {
            layer_sizes: layer_sizes.to_vec(),
        }
    }

    /// The default SmallCNN for 1×28×28 inputs: 8 then 16 channels.
    pub fn small_cnn(num_classes: usize) -> Self {
        ModelSpec::SmallCnn {
            input_shape: [1, 28, 28],
            channels: [8, 16],
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Mlp { layer_sizes } => *layer_sizes.last().unwrap_or(&0),
            ModelSpec::SmallCnn { num_classes, .. } => *num_classes,
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::Mlp { layer_sizes } => vec![layer_sizes.first().copied().unwrap_or(0)],
            ModelSpec::SmallCnn { input_shape, .. } => input_shape.to_vec(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    fn cnn_features(input_shape: &[usize; 3], channels: &[usize; 2]) -> Option<usize> {
        let stage = |x: usize| x.checked_sub(CNN_KERNEL - 1).map(|v| v / CNN_POOL).filter(|&v| v > 0);
        let h = stage(stage(input_shape[1])?)?;
        let w = stage(stage(input_shape[2])?)?;
        Some(channels[1] * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() < 2 {
            return Err(Error::invalid("a model needs at least 2 classes"));
        }
        match self {
            ModelSpec::Mlp { layer_sizes } => {
                if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
                    return Err(Error::invalid(format!(
                        "MLP layer sizes {layer_sizes:?} must have >= 2 positive entries"
                    )));
                }
            }
            ModelSpec::SmallCnn {
                input_shape,
                channels,
                ..
            } => {
                if input_shape.contains(&0) || channels.contains(&0) {
                    return Err(Error::invalid("SmallCNN shapes must be positive"));
                }
                if Self::cnn_features(input_shape, channels).is_none() {
                    return Err(Error::invalid(format!(
                        "input {input_shape:?} too small for two conv/pool stages"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Ordered `(name, shape, fan_in)`; `fan_in` is `None` for biases.
    pub fn param_layout(&self) -> Result<Vec<(String, Vec<usize>, Option<usize>)>> {
        self.validate()?;
        let mut out = Vec::new();
        match self {
            ModelSpec::Mlp { layer_sizes } => {
                for (i, pair) in layer_sizes.windows(2).enumerate() {
                    out.push((format!("fc{}.weight", i + 1), vec![pair[0], pair[1]], Some(pair[0])));
                    out.push((format!("fc{}.bias", i + 1), vec![pair[1]], None));
                }
            }
            ModelSpec::SmallCnn {
                input_shape,
                channels,
                num_classes,
            } => {
                let k = CNN_KERNEL;
                let c0 = input_shape[0];
                let [c1, c2] = *channels;
                let features = Self::cnn_features(input_shape, channels).expect("validated");
                out.push(("conv1.weight".into(), vec![c1, c0, k, k], Some(c0 * k * k)));
                out.push(("conv1.bias".into(), vec![c1], None));
                out.push(("conv2.weight".into(), vec![c2, c1, k, k], Some(c1 * k * k)));
                out.push(("conv2.bias".into(), vec![c2], None));
                out.push(("fc.weight".into(), vec![features, *num_classes], Some(features)));
                out.push(("fc.bias".into(), vec![*num_classes], None));
            }
        }
        Ok(out)
    }
}

/// Named model parameters in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            tensors: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.values().map(|t| graph.param(t.detached())).collect(),
        }
    }

    /// Registers every parameter as a constant of `graph` (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.values().map(|t| graph.input(t.detached())).collect(),
        }
    }

    /// Adds the gradients the graph collected on `bound` into each grad slot.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>, bound: &Bound) -> Result<()> {
        for (tensor, &var) in self.tensors.values_mut().zip(&bound.vars) {
            match graph.grad(var) {
                Some(g) => tensor.accumulate_grad(g)?,
                None => tensor.accumulate_grad(&vec![T::zero(); tensor.len()])?,
            }
        }
        Ok(())
    }

    /// Hash of every name, shape and raw value; equal iff bit-identical.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let mut buf = Vec::new();
        for (name, t) in &self.tensors {
            h.write(name.as_bytes());
            for &d in t.shape() {
                h.write_usize(d);
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.write(&buf);
        }
        h.finish()
    }

    /// Checks names and shapes against the layout of `spec`.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.param_layout()?;
        if layout.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape, _), (have_name, t)) in layout.iter().zip(&self.tensors) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter {have_name} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph handles of a bound [`ParamSet`], in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Initializes parameters: uniform `±sqrt(2/fan_in)` for weights, zeros for biases.
pub fn build<T: Real, R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<ParamSet<T>> {
    let mut params = ParamSet::new();
    for (name, shape, fan_in) in spec.param_layout()? {
        let tensor = match fan_in {
            Some(fan_in) => {
                let bound = (2.0 / fan_in as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len)
                    .map(|_| T::of(rng.random_range(-bound..bound)))
                    .collect();
                Tensor::new(shape, data)?
            }
            None => Tensor::zeros(shape),
        };
        params.insert(name, tensor)?;
    }
    Ok(params)
}

/// Replaces weight tensors on their way into the forward pass.
pub trait WeightTransform<T: Real> {
    /// `None` leaves the weights untouched; `slot` counts weight tensors (biases excluded).
    fn apply(&mut self, slot: usize, weights: &Tensor<T>) -> Result<Option<Tensor<T>>>;
}

/// Clean inference.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl<T: Real> WeightTransform<T> for Identity {
    fn apply(&mut self, _slot: usize, _weights: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        Ok(None)
    }
}

/// Weights drawn from a noise source at a fixed device variation.
pub struct Noisy<'a, N: ?Sized> {
    pub noise: &'a mut N,
    pub sigma: f64,
}

impl<'a, N: ?Sized> Noisy<'a, N> {
    pub fn new(noise: &'a mut N, sigma: f64) -> Self {
        Self { noise, sigma }
    }
}

impl<T: Real, N: WeightNoise<T> + ?Sized> WeightTransform<T> for Noisy<'_, N> {
    fn apply(&mut self, slot: usize, weights: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        self.noise.perturb(slot, weights, self.sigma).map(Some)
    }
}

/// Fixed per-slot weights, e.g. one programmed chip reused across batches.
pub struct Programmed<T> {
    pub weights: Vec<Tensor<T>>,
}

impl<T: Real> WeightTransform<T> for Programmed<T> {
    fn apply(&mut self, slot: usize, weights: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let w = self
            .weights
            .get(slot)
            .ok_or_else(|| Error::Contract(format!("no programmed weights for slot {slot}")))?;
        if w.shape() != weights.shape() {
            return Err(Error::dim("Programmed", weights.shape(), w.shape()));
        }
        Ok(Some(w.clone()))
    }
}

fn weight<T: Real>(
    graph: &mut Graph<T>,
    var: Var,
    slot: usize,
    transform: &mut dyn WeightTransform<T>,
) -> Result<Var> {
    let replacement = transform.apply(slot, graph.value(var))?;
    match replacement {
        Some(w) => graph.straight_through(var, w),
        None => Ok(var),
    }
}

/// Records the network on `graph` and returns the logits node.
pub fn forward_graph<T: Real>(
    graph: &mut Graph<T>,
    bound: &Bound,
    spec: &ModelSpec,
    input: Var,
    transform: &mut dyn WeightTransform<T>,
) -> Result<Var> {
    let p = bound.vars();
    let in_shape = graph.value(input).shape().to_vec();
    let want = spec.input_shape();
    if in_shape.len() < 2 {
        return Err(Error::dim("forward", &in_shape, &want));
    }
    match spec {
        ModelSpec::Mlp { layer_sizes } => {
            let mut x = if in_shape.len() == 2 { input } else { graph.flatten(input)? };
            if graph.value(x).shape()[1] != want[0] {
                return Err(Error::dim("forward", &in_shape, &want));
            }
            let layers = layer_sizes.len() - 1;
            for layer in 0..layers {
                let w = weight(graph, p[2 * layer], layer, transform)?;
                x = graph.matmul(x, w)?;
                x = graph.bias_add(x, p[2 * layer + 1])?;
                if layer + 1 < layers {
                    x = graph.relu(x);
                }
            }
            Ok(x)
        }
        ModelSpec::SmallCnn { .. } => {
            if in_shape[1..] != want[..] {
                return Err(Error::dim("forward", &in_shape, &want));
            }
            let mut x = input;
            for stage in 0..2 {
                let w = weight(graph, p[2 * stage], stage, transform)?;
                x = graph.conv2d(x, w, 1, 0)?;
                x = graph.bias_add(x, p[2 * stage + 1])?;
                x = graph.relu(x);
                x = graph.maxpool2d(x, CNN_POOL)?;
            }
            x = graph.flatten(x)?;
            let w = weight(graph, p[4], 2, transform)?;
            x = graph.matmul(x, w)?;
            graph.bias_add(x, p[5])
        }
    }
}

/// Pure inference: logits `[batch × classes]`. Parameters are not modified.
pub fn forward<T: Real>(
    params: &ParamSet<T>,
    spec: &ModelSpec,
    batch: &Tensor<T>,
    transform: &mut dyn WeightTransform<T>,
) -> Result<Tensor<T>> {
    let mut graph = Graph::new();
    let bound = params.bind_frozen(&mut graph);
    let input = graph.input(batch.detached());
    let logits = forward_graph(&mut graph, &bound, spec, input, transform)?;
    Ok(graph.value(logits).detached())
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let classes = logits.shape().last().copied().unwrap_or(1);
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{quantize, DeviceConfig, DeviceNoise, NoiseMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_parameter_shapes() {
        let spec = ModelSpec::mlp(&[784, 128, 10]);
        let p: ParamSet<f32> = build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let shapes: Vec<_> = p.iter().map(|(_, t)| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![784, 128], vec![128], vec![128, 10], vec![10]]);
        assert!(p.get("fc1.bias").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn cnn_parameter_shapes() {
        let spec = ModelSpec::small_cnn(10);
        let layout = spec.param_layout().unwrap();
        assert_eq!(layout[0].1, vec![8, 1, 3, 3]);
        assert_eq!(layout[2].1, vec![16, 8, 3, 3]);
        assert_eq!(layout[4].1, vec![16 * 5 * 5, 10]);
    }

    #[test]
    fn invalid_specs() {
        assert!(ModelSpec::mlp(&[784]).validate().is_err());
        assert!(ModelSpec::mlp(&[784, 1]).validate().is_err());
        let tiny = ModelSpec::SmallCnn {
            input_shape: [1, 5, 5],
            channels: [2, 2],
            num_classes: 3,
        };
        assert!(tiny.validate().is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let spec = ModelSpec::small_cnn(10);
        let a: ParamSet<f32> = build(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b: ParamSet<f32> = build(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c: ParamSet<f32> = build(&spec, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn init_scale_matches_uniform_bound() {
        let spec = ModelSpec::mlp(&[784, 128, 10]);
        let p: ParamSet<f64> = build(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w = p.get("fc1.weight").unwrap().data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let want = (2.0f64 / 784.0).sqrt() / 3f64.sqrt();
        assert!((std / want - 1.0).abs() < 0.1, "std {std} want {want}");
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let spec = ModelSpec::small_cnn(10);
        let mut p: ParamSet<f64> = build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let x = Tensor::full(vec![2, 1, 28, 28], 0.5);
        let logits = forward(&p, &spec, &x, &mut Identity).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let spec = ModelSpec::small_cnn(10);
        let p: ParamSet<f64> = build(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::zeros(vec![2, 1, 27, 28]);
        assert!(matches!(
            forward(&p, &spec, &x, &mut Identity),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_noise_device_transform_matches_identity_on_grid() {
        let spec = ModelSpec::small_cnn(10);
        let dev = DeviceConfig::default();
        let mut p: ParamSet<f32> = build(&spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (name, t) in p.iter_mut() {
            if name.ends_with(".weight") {
                *t = quantize(t, &dev).unwrap().dequantized();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::new(
            vec![3, 1, 28, 28],
            (0..3 * 784).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap();
        let clean = forward(&p, &spec, &x, &mut Identity).unwrap();
        let mut noise = DeviceNoise::new(dev, NoiseMode::Device, rng);
        let noisy = forward(&p, &spec, &x, &mut Noisy::new(&mut noise, 0.0)).unwrap();
        assert_eq!(clean, noisy);
        let again = forward(&p, &spec, &x, &mut Identity).unwrap();
        assert_eq!(clean, again);
    }

    #[test]
    fn argmax_ties_go_low() {
        let logits = Tensor::<f64>::from_f64(vec![2, 3], &[1., 3., 3., 0., 0., 0.]).unwrap();
        assert_eq!(predict(&logits), vec![1, 0]);
    }
}
