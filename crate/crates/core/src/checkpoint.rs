//! Versioned binary checkpoint container.
//!
//! ```text
//! magic      8 bytes   "OVFCKPT\0"
//! version    u32 LE    currently 1
//! header_len u32 LE
//! header     UTF-8     `key=value` lines: dtype, model, tensors, then metadata
//! tensors    repeated  u32 name_len, name, u32 ndim, u64 dims…, raw LE elements
//! ```
//!
//! The `model` value is a compact descriptor, `mlp 784,128,10` or
//! `small_cnn 1x28x28 8,16 10`. Elements are stored in the header's dtype and
//! converted on load when the caller asks for the other precision.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ModelSpec, ParamSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"OVFCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub spec: ModelSpec,
    pub params: ParamSet<T>,
    /// Free-form annotations, e.g. regime, seed or validation accuracy.
    pub metadata: BTreeMap<String, String>,
}

const RESERVED: [&str; 3] = ["dtype", "model", "tensors"];

impl<T: Real> Checkpoint<T> {
    pub fn new(spec: ModelSpec, params: ParamSet<T>) -> Result<Self> {
        params.check_against(&spec)?;
        Ok(Self {
            spec,
            params,
            metadata: BTreeMap::new(),
        })
    }

    pub fn with_metadata(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!(
            "dtype={}\nmodel={}\ntensors={}\n",
            T::DTYPE,
            describe(&self.spec),
            self.params.len()
        );
        for (k, v) in &self.metadata {
            if RESERVED.contains(&k.as_str()) || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("unusable metadata key/value {k:?}={v:?}")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let mut fields = BTreeMap::new();
        for line in header.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let mut field = |k: &str| {
            fields
                .remove(k)
                .ok_or_else(|| Error::Checkpoint(format!("header lacks {k}")))
        };
        let dtype = field("dtype")?;
        let spec = parse_descriptor(&field("model")?)?;
        let count: usize = field("tensors")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad tensor count".into()))?;

        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype.as_str() {
                "f32" => read_array::<f32, T>(&mut r, n)?,
                "f64" => read_array::<f64, T>(&mut r, n)?,
                other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        params
            .check_against(&spec)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match model: {e}")))?;
        Ok(Self {
            spec,
            params,
            metadata: fields,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn read_array<S: Real, T: Real>(r: &mut Reader<'_>, n: usize) -> Result<Vec<T>> {
    let raw = r.take(n.checked_mul(S::BYTES).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
    Ok(raw
        .chunks_exact(S::BYTES)
        .map(|c| T::of(S::read_le(c).as_f64()))
        .collect())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn join(xs: &[usize], sep: &str) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(sep)
}

pub fn describe(spec: &ModelSpec) -> String {
    match spec {
        ModelSpec::Mlp { layer_sizes } => format!("mlp {}", join(layer_sizes, ",")),
        ModelSpec::SmallCnn {
            input_shape,
            channels,
            num_classes,
        } => format!(
            "small_cnn {} {} {num_classes}",
            join(input_shape, "x"),
            join(channels, ",")
        ),
    }
}

pub fn parse_descriptor(text: &str) -> Result<ModelSpec> {
    let bad = || Error::Checkpoint(format!("bad model descriptor {text:?}"));
    let nums = |s: &str, sep: char| -> Result<Vec<usize>> {
        s.split(sep).map(|x| x.parse().map_err(|_| bad())).collect()
    };
    let parts: Vec<&str> = text.split_whitespace().collect();
    let spec = match parts.as_slice() {
        ["mlp", sizes] => ModelSpec::mlp(&nums(sizes, ',')?),
        ["small_cnn", shape, channels, classes] => ModelSpec::SmallCnn {
            input_shape: nums(shape, 'x')?.try_into().map_err(|_| bad())?,
            channels: nums(channels, ',')?.try_into().map_err(|_| bad())?,
            num_classes: classes.parse().map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    spec.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build;
    use crate::training::rng_stream;

    fn sample() -> Checkpoint<f32> {
        let spec = ModelSpec::small_cnn(10);
        let params = build(&spec, &mut rng_stream(4, 0)).unwrap();
        Checkpoint::new(spec, params)
            .unwrap()
            .with_metadata("regime", "ovf")
            .with_metadata("val_accuracy", 0.9125)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.params.fingerprint(), ck.params.fingerprint());
    }

    #[test]
    fn f32_checkpoint_loads_as_f64() {
        let ck = sample();
        let wide = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        for ((_, a), (_, b)) in ck.params.iter().zip(wide.params.iter()) {
            assert!(a.data().iter().zip(b.data()).all(|(&x, &y)| x as f64 == y));
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::<f32>::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&long).is_err());
        let reserved = sample().with_metadata("dtype", "f64");
        assert!(reserved.to_bytes().is_err());
    }

    #[test]
    fn descriptors() {
        for spec in [ModelSpec::mlp(&[784, 128, 10]), ModelSpec::small_cnn(10)] {
            assert_eq!(parse_descriptor(&describe(&spec)).unwrap(), spec);
        }
        assert!(parse_descriptor("mlp").is_err());
        assert!(parse_descriptor("small_cnn 1x28 8,16 10").is_err());
    }
}
