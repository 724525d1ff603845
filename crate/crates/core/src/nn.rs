//! Small building blocks shared by the anchor regressor and the transformer:
//! named parameter storage, seeded initialization, checkpoint containers.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered collection of named tensors; trainable entries are `Var`s.
#[derive(Clone, Debug)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            entries: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Var> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        if self.entries.insert(name.to_string(), var.clone()).is_some() {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        Ok(var)
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F64, &self.device)? * value)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.values().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every entry from `tensors`; names and shapes must match.
    pub fn load(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.entries {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::parse("checkpoint", format!("missing tensor {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::parse(
                    "checkpoint",
                    format!("{key}: shape {:?} != {:?}", t.dims(), var.dims()),
                ));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, var) in &self.entries {
            out.push((format!("{prefix}{name}"), var.as_tensor().clone()));
        }
    }

    /// SHA-256 over names and raw little-endian bytes of every entry.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.entries {
            h.update(name.as_bytes());
            let flat = var.as_tensor().flatten_all()?;
            match self.dtype {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        h.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// `x @ w (+ b)` over the last dimension.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(w)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Writes tensors plus string metadata as a safetensors file.
pub fn save_container(
    path: &Path,
    tensors: Vec<(String, Tensor)>,
    metadata: HashMap<String, String>,
) -> Result<()> {
    let tensors: Vec<(String, Tensor)> = tensors
        .into_iter()
        .map(|(k, t)| Ok((k, t.contiguous()?)))
        .collect::<Result<_>>()?;
    let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(metadata))
        .map_err(|e| Error::parse("checkpoint", e))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: &Path) -> Result<(HashMap<String, Tensor>, HashMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::parse(path.display().to_string(), e))?;
    let metadata = meta.metadata().clone().unwrap_or_default();
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((tensors, metadata))
}

/// Checks the `format` and `version` metadata keys of a checkpoint.
pub fn expect_format(meta: &HashMap<String, String>, format: &str, version: u32) -> Result<()> {
    let got = meta.get("format").map(String::as_str).unwrap_or("");
    if got != format {
        return Err(Error::parse("checkpoint", format!("expected format {format}, found {got:?}")));
    }
    let v: u32 = meta
        .get("version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::parse("checkpoint", "missing version"))?;
    if v != version {
        return Err(Error::parse("checkpoint", format!("unsupported version {v}")));
    }
    Ok(())
}

/// Cosine-annealed learning rate for `epoch` of `total` (zero floor).
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 6.0]], &Device::Cpu).unwrap();
        let g = Tensor::ones(4, DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        let y = layer_norm(&x, &g, &b, 0.0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(2.0, 5, 10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn store_roundtrip_and_hash() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new(DType::F32);
        s.normal("a", &[2, 3], 1.0, &mut rng).unwrap();
        s.constant("b", &[3], 0.5).unwrap();
        let h = s.content_hash().unwrap();
        let mut out = vec![];
        s.export("m.", &mut out);
        let map: HashMap<_, _> = out.into_iter().collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut t = ParamStore::new(DType::F32);
        t.normal("a", &[2, 3], 1.0, &mut rng).unwrap();
        t.constant("b", &[3], 0.0).unwrap();
        assert_ne!(t.content_hash().unwrap(), h);
        t.load(&map, "m.").unwrap();
        assert_eq!(t.content_hash().unwrap(), h);
    }
}
