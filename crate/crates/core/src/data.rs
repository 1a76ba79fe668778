//! Datasets: MNIST IDX files (optionally gzip-compressed) and a Gaussian-cluster generator.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled samples; `inputs` is `[n, …sample shape]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn new(inputs: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(Error::CountMismatch {
                images: inputs.shape().first().copied().unwrap_or(0),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} >= {num_classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Samples `start..end`.
    pub fn range(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.slice_rows(start, end)?,
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        })
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.select_rows(rows)?,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
        })
    }

    /// Reinterprets each sample with a new shape of the same size.
    pub fn reshape_samples(self, sample_shape: &[usize]) -> Result<Self> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(sample_shape);
        Ok(Self {
            inputs: self.inputs.reshape(shape)?,
            ..self
        })
    }

    /// Contiguous batches of at most `batch_size` samples.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = (Tensor<T>, &[usize])> + '_ {
        let n = self.len();
        let size = batch_size.max(1);
        (0..n.div_ceil(size)).map(move |b| {
            let (s, e) = (b * size, ((b + 1) * size).min(n));
            (
                self.inputs.slice_rows(s, e).expect("in range"),
                &self.labels[s..e],
            )
        })
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            inputs: self.inputs.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: "header".into(),
        })
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} of {need} pixel bytes", body.len()),
        });
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} of {n} labels", body.len()),
        });
    }
    Ok(body[..n].to_vec())
}

/// Loads an MNIST image/label pair as `[n, 1, 28, 28]` inputs scaled to `[0, 1]`.
pub fn load_mnist_idx<T: Real>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images)?, images)?;
    let label_bytes = parse_idx_labels(&read_maybe_gz(labels)?, labels)?;
    if label_bytes.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: label_bytes.len(),
        });
    }
    let norm = T::of(255.0);
    let data = pixels.iter().map(|&p| T::of(p as f64) / norm).collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], data)?;
    let labels = label_bytes.iter().map(|&l| l as usize).collect();
    Dataset::new(inputs, labels, 10)
}

/// Isotropic Gaussian clusters with means `separation · e_c` and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub cluster_separation: f64,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.samples_per_class == 0 {
            return Err(Error::invalid("synthetic data needs >= 2 classes and >= 1 sample each"));
        }
        if self.input_dim < self.num_classes {
            return Err(Error::invalid(format!(
                "input_dim {} must be >= num_classes {}",
                self.input_dim, self.num_classes
            )));
        }
        if !(self.cluster_separation.is_finite() && self.cluster_separation >= 0.0) {
            return Err(Error::invalid("cluster_separation must be >= 0"));
        }
        Ok(())
    }

    /// Deterministic draw, shuffled with the same seed.
    pub fn generate<T: Real>(&self, seed: u64) -> Result<Dataset<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..self.num_classes * self.samples_per_class)
            .map(|i| i % self.num_classes)
            .collect();
        order.shuffle(&mut rng);
        let mut data = Vec::with_capacity(order.len() * self.input_dim);
        for &c in &order {
            for d in 0..self.input_dim {
                let mean = if d == c { self.cluster_separation } else { 0.0 };
                data.push(T::of(mean + <f64 as Real>::standard_normal(&mut rng)));
            }
        }
        let inputs = Tensor::new(vec![order.len(), self.input_dim], data)?;
        Dataset::new(inputs, order, self.num_classes)
    }

    /// Accuracy of the Bayes classifier `argmax_c x_c`:
    /// `∫ φ(t − s) Φ(t)^(C−1) dt`, by composite Simpson quadrature.
    pub fn bayes_accuracy(&self) -> f64 {
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let s = self.cluster_separation;
        let others = (self.num_classes - 1) as i32;
        let (lo, hi, steps) = (s - 12.0, s + 12.0, 4000);
        let h = (hi - lo) / steps as f64;
        let f = |t: f64| normal.pdf(t - s) * normal.cdf(t).powi(others);
        let mut total = f(lo) + f(hi);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            total += w * f(lo + i as f64 * h);
        }
        total * h / 3.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, body: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(&28u32.to_be_bytes());
        b.extend_from_slice(&28u32.to_be_bytes());
        b.extend_from_slice(body);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn loads_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let mut px = vec![0u8; 2 * 784];
        px[0] = 0xFF;
        px[785] = 51;
        let im = write(dir.path(), "im", &idx_images(2, &px));
        let lb = write(dir.path(), "lb", &idx_labels(&[7, 3]));
        let ds: Dataset<f32> = load_mnist_idx(&im, &lb).unwrap();
        assert_eq!(ds.inputs.shape(), &[2, 1, 28, 28]);
        assert_eq!(ds.inputs.data()[0], 1.0);
        assert_eq!(ds.inputs.data()[785], 0.2);
        assert_eq!(ds.labels, vec![7, 3]);
    }

    #[test]
    fn error_paths_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let px = vec![0u8; 784];
        let im = write(dir.path(), "im", &idx_images(1, &px));
        let lb = write(dir.path(), "lb", &idx_labels(&[1]));

        let short = write(dir.path(), "short", &idx_images(2, &px));
        assert!(matches!(load_mnist_idx::<f32>(&short, &lb), Err(Error::Truncated { .. })));

        let header_only = write(dir.path(), "hdr", &IDX_IMAGES_MAGIC.to_be_bytes());
        assert!(matches!(load_mnist_idx::<f32>(&header_only, &lb), Err(Error::Truncated { .. })));

        assert!(matches!(load_mnist_idx::<f32>(&lb, &lb), Err(Error::BadMagic { .. })));
        assert!(matches!(load_mnist_idx::<f32>(&im, &im), Err(Error::BadMagic { .. })));

        let two = write(dir.path(), "two", &idx_labels(&[1, 2]));
        assert!(matches!(
            load_mnist_idx::<f32>(&im, &two),
            Err(Error::CountMismatch { images: 1, labels: 2 })
        ));
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let px = vec![7u8; 784];
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&idx_images(1, &px)).unwrap();
        let im = write(dir.path(), "im.gz", &enc.finish().unwrap());
        let lb = write(dir.path(), "lb", &idx_labels(&[4]));
        let ds: Dataset<f64> = load_mnist_idx(&im, &lb).unwrap();
        assert_eq!(ds.len(), 1);
        assert!((ds.inputs.data()[10] - 7.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticDatasetSpec {
            num_classes: 4,
            samples_per_class: 25,
            input_dim: 6,
            cluster_separation: 3.0,
        };
        let a: Dataset<f64> = spec.generate(5).unwrap();
        let b: Dataset<f64> = spec.generate(5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 100);
        for c in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 25);
        }
    }

    #[test]
    fn bayes_accuracy_closed_forms() {
        let mut spec = SyntheticDatasetSpec {
            num_classes: 2,
            samples_per_class: 1,
            input_dim: 2,
            cluster_separation: 2.0,
        };
        // Two classes: P(x0 - x1 > 0) with x0 - x1 ~ N(s, 2).
        let normal = Normal::new(0.0, 1.0).unwrap();
        let want = normal.cdf(2.0 / 2f64.sqrt());
        assert!((spec.bayes_accuracy() - want).abs() < 1e-9);
        spec.cluster_separation = 0.0;
        spec.num_classes = 5;
        assert!((spec.bayes_accuracy() - 0.2).abs() < 1e-9);
    }

    #[test]
    fn batches_cover_everything() {
        let ds = Dataset::new(Tensor::<f64>::zeros(vec![10, 3]), vec![0; 10], 2).unwrap();
        let sizes: Vec<usize> = ds.batches(4).map(|(x, l)| {
            assert_eq!(x.shape()[0], l.len());
            l.len()
        }).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }
}
