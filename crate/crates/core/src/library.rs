//! Persisted editing vectors: `EGV1` files and directory catalogs.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container;
use crate::editing::EditingVector;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const VECTOR_MAGIC: &[u8; 4] = b"EGV1";
pub const VECTOR_EXTENSION: &str = "egv";

/// An editing vector bound to the generator it was learned on.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorRecord {
    pub vector: EditingVector,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub generator_checkpoint_hash: String,
    pub notes: String,
}

impl VectorRecord {
    pub fn new(vector: EditingVector, generator_checkpoint_hash: impl Into<String>) -> Self {
        let created_at = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { vector, created_at, generator_checkpoint_hash: generator_checkpoint_hash.into(), notes: String::new() }
    }

    /// Errors unless the record was learned on `generator_hash`.
    pub fn check_compatible(&self, generator_hash: &str) -> Result<()> {
        if self.generator_checkpoint_hash != generator_hash {
            return Err(Error::IncompatibleVector {
                vector_hash: self.generator_checkpoint_hash.clone(),
                generator_hash: generator_hash.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let v = &self.vector;
        let header = json!({
            "name": v.name,
            "label_set": v.label_set,
            "source_image_hash": v.source_image_hash,
            "trained_scale": v.trained_scale,
            "shape": v.delta.shape(),
            "created_at": self.created_at,
            "generator_checkpoint_hash": self.generator_checkpoint_hash,
            "notes": self.notes,
        });
        let payload: Vec<f32> = v.delta.data().iter().map(|&x| x as f32).collect();
        container::encode(VECTOR_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let d = container::decode("vector", path, VECTOR_MAGIC, bytes)?;
        let corrupt = |reason: String| Error::Corrupt { kind: "vector", path: path.to_path_buf(), reason };
        let h = &d.header;
        let text = |k: &str| h.get(k).and_then(Value::as_str).map(str::to_string).ok_or_else(|| corrupt(format!("missing {k}")));
        let shape: Vec<usize> = serde_json::from_value(h.get("shape").cloned().unwrap_or(Value::Null)).map_err(|e| corrupt(format!("shape: {e}")))?;
        let label_set: BTreeSet<u8> =
            serde_json::from_value(h.get("label_set").cloned().unwrap_or(Value::Null)).map_err(|e| corrupt(format!("label_set: {e}")))?;
        if shape.len() != 2 || shape.iter().product::<usize>() != d.payload.len() {
            return Err(corrupt(format!("payload has {} values for shape {shape:?}", d.payload.len())));
        }
        let delta = Tensor::new(&shape, d.payload.iter().map(|&x| x as f64).collect());
        let mut vector = EditingVector::new(text("name")?, delta, label_set, text("source_image_hash")?).map_err(|e| corrupt(e.to_string()))?;
        vector.trained_scale = h.get("trained_scale").and_then(Value::as_f64).unwrap_or(1.0);
        Ok(Self {
            vector,
            created_at: h.get("created_at").and_then(Value::as_u64).unwrap_or(0),
            generator_checkpoint_hash: text("generator_checkpoint_hash")?,
            notes: h.get("notes").and_then(Value::as_str).unwrap_or_default().to_string(),
        })
    }
}

/// File name for a vector name: characters outside `[A-Za-z0-9._-]` become `_`.
pub fn vector_file_name(name: &str) -> String {
    let stem: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect();
    format!("{stem}.{VECTOR_EXTENSION}")
}

/// Writes `record` into `dir` atomically and returns its path.
pub fn save_vector(dir: &Path, record: &VectorRecord) -> Result<PathBuf> {
    let path = dir.join(vector_file_name(&record.vector.name));
    container::write_atomic(&path, &record.to_bytes())?;
    Ok(path)
}

pub fn load_vector(path: &Path) -> Result<VectorRecord> {
    let bytes = std::fs::read(path)?;
    VectorRecord::from_bytes(&bytes, path)
}

/// Loads a vector and checks it against the active generator.
pub fn load_vector_for(path: &Path, generator_hash: &str) -> Result<VectorRecord> {
    let record = load_vector(path)?;
    record.check_compatible(generator_hash)?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub label_set: BTreeSet<u8>,
    pub generator_checkpoint_hash: String,
    pub delta_hash: String,
    pub file: String,
    /// Against the generator passed to [`list_vectors_for`], if any.
    pub compatible: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    /// Sorted by name, then file.
    pub entries: Vec<CatalogEntry>,
    /// One message per unreadable file.
    pub warnings: Vec<String>,
}

impl Catalog {
    pub fn to_json(&self) -> String {
        container::canonical_json(&serde_json::to_value(self).expect("catalog serializes"))
    }

    pub fn find(&self, name: &str) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub fn list_vectors(dir: &Path) -> Result<Catalog> {
    list(dir, None)
}

/// Lists vectors, flagging (not hiding) those learned on another generator.
pub fn list_vectors_for(dir: &Path, generator_hash: &str) -> Result<Catalog> {
    list(dir, Some(generator_hash))
}

fn list(dir: &Path, generator_hash: Option<&str>) -> Result<Catalog> {
    let mut catalog = Catalog::default();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == VECTOR_EXTENSION))
        .collect();
    paths.sort();
    for path in paths {
        match load_vector(&path) {
            Ok(r) => catalog.entries.push(CatalogEntry {
                name: r.vector.name.clone(),
                label_set: r.vector.label_set.clone(),
                delta_hash: r.vector.delta_hash(),
                file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                compatible: generator_hash.map(|h| h == r.generator_checkpoint_hash),
                generator_checkpoint_hash: r.generator_checkpoint_hash,
            }),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                catalog.warnings.push(format!("{}: {e}", path.display()));
            }
        }
    }
    catalog.entries.sort_by(|a, b| (&a.name, &a.file).cmp(&(&b.name, &b.file)));
    Ok(catalog)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(name: &str, seed: u64) -> VectorRecord {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let v = EditingVector::new(name, Tensor::randn(&[3, 4], 0.5, &mut rng), [4, 5].into(), "img").unwrap();
        VectorRecord { notes: "wheel".into(), ..VectorRecord::new(v, "gen-a") }
    }

    #[test]
    fn round_trip_and_compatibility() {
        let dir = tempfile::tempdir().unwrap();
        let r = record("bigger wheels", 1);
        let p = save_vector(dir.path(), &r).unwrap();
        assert_eq!(p.file_name().unwrap(), "bigger_wheels.egv");
        let back = load_vector(&p).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());
        let err = load_vector_for(&p, "gen-b").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gen-a") && msg.contains("gen-b"), "{msg}");
    }

    #[test]
    fn listing_reports_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        for (i, n) in ["c", "a", "b"].iter().enumerate() {
            save_vector(dir.path(), &record(n, i as u64)).unwrap();
        }
        std::fs::write(dir.path().join("broken.egv"), b"EGV1\x05\x00").unwrap();
        let cat = list_vectors(dir.path()).unwrap();
        let names: Vec<&str> = cat.entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["a", "b", "c"]);
        assert_eq!(cat.warnings.len(), 1);
        let flagged = list_vectors_for(dir.path(), "other").unwrap();
        assert!(flagged.entries.iter().all(|e| e.compatible == Some(false)));
    }
}
