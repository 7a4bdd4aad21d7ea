//! Latent codes: `z`, the extended `W⁺` code, and the `EGL1` latent file.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::container;
use crate::error::{mismatch, Error, Result};
use crate::tensor::Tensor;

const LATENT_MAGIC: &[u8; 4] = b"EGL1";

/// A point in `Z`, one standard-normal draw per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

/// Deterministic standard-normal latent for `seed`.
pub fn sample_latent(seed: u64, latent_dim: usize) -> LatentCode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentCode(Tensor::randn(&[latent_dim], 1.0, &mut rng).into_data())
}

/// One latent row per style layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedLatent(Tensor);

impl ExtendedLatent {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(mismatch("[layers, latent_dim]", t.shape()));
        }
        if !t.is_finite() {
            return Err(Error::InvalidConfig("latent contains non-finite values".into()));
        }
        Ok(Self(t))
    }

    pub fn zeros(layers: usize, latent_dim: usize) -> Self {
        Self(Tensor::zeros(&[layers, latent_dim]))
    }

    /// The same `w` on every layer.
    pub fn broadcast(w: &[f64], layers: usize) -> Self {
        let data = (0..layers).flat_map(|_| w.iter().copied()).collect();
        Self(Tensor::new(&[layers, w.len()], data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn num_layers(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn same_shape(&self, other: &ExtendedLatent) -> bool {
        self.0.shape() == other.0.shape()
    }

    /// `self + scale · offset`, elementwise in a fixed order.
    pub fn offset(&self, offset: &Tensor, scale: f64) -> Result<Self> {
        if offset.shape() != self.0.shape() {
            return Err(mismatch(self.0.shape(), offset.shape()));
        }
        Ok(Self(self.0.zip_map(offset, |b, d| b + scale * d)))
    }

    pub fn rounded_to_f32(mut self) -> Self {
        self.0.round_to_f32();
        self
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.0.to_le_bytes()))
    }

    /// `EGL1` bytes; values are stored as `f32`.
    pub fn to_bytes(&self, source_hash: &str) -> Vec<u8> {
        let header = json!({
            "latent_dim": self.latent_dim(),
            "num_style_layers": self.num_layers(),
            "source_hash": source_hash,
        });
        let payload: Vec<f32> = self.0.data().iter().map(|&v| v as f32).collect();
        container::encode(LATENT_MAGIC, &header, &payload)
    }

    /// Parses `EGL1` bytes, returning the latent and its source hash.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Self, String)> {
        let d = container::decode("latent", path, LATENT_MAGIC, bytes)?;
        let corrupt = |reason: &str| Error::Corrupt { kind: "latent", path: path.to_path_buf(), reason: reason.into() };
        let layers = container::header_usize(&d.header, "num_style_layers").ok_or_else(|| corrupt("missing num_style_layers"))?;
        let dim = container::header_usize(&d.header, "latent_dim").ok_or_else(|| corrupt("missing latent_dim"))?;
        let source = d.header.get("source_hash").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        if d.payload.len() != layers * dim {
            return Err(corrupt(&format!("payload has {} values, header implies {}", d.payload.len(), layers * dim)));
        }
        let t = Tensor::new(&[layers, dim], d.payload.iter().map(|&v| v as f64).collect());
        Ok((Self::new(t)?, source))
    }

    pub fn save(&self, path: &Path, source_hash: &str) -> Result<()> {
        container::write_atomic(path, &self.to_bytes(source_hash))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_is_deterministic_and_seed_sensitive() {
        assert_eq!(sample_latent(0, 16), sample_latent(0, 16));
        assert_ne!(sample_latent(0, 16), sample_latent(1, 16));
    }

    #[test]
    fn sample_moments_match_standard_normal() {
        // 10⁴ draws per coordinate, spread over seeds
        let dim = 8;
        let n = 10_000;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for seed in 0..n {
            for (i, v) in sample_latent(seed, dim).0.iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..dim {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.05, "mean {mean}");
            assert!((var - 1.0).abs() < 0.1, "var {var}");
        }
    }

    #[test]
    fn latent_file_round_trip_and_truncation() {
        let w = ExtendedLatent::new(Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, 0.0, 2.5, -0.125])).unwrap();
        let p = Path::new("w.egl");
        let bytes = w.to_bytes("abc");
        let (back, src) = ExtendedLatent::from_bytes(&bytes, p).unwrap();
        assert_eq!(back, w);
        assert_eq!(src, "abc");
        assert!(matches!(ExtendedLatent::from_bytes(&bytes[..bytes.len() - 4], p), Err(Error::Corrupt { .. })));
    }
}
