//! `EGW1` checkpoint files: generator weights plus optional segmentation
//! head and encoder sections.

use std::path::Path;

use serde_json::{json, Value};

use crate::container;
use crate::embedding::{Encoder, EncoderArch};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::ParamSet;
use crate::segmentation::SegmentationHead;
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"EGW1";

/// The trained 32×32 vehicle checkpoint shipped with the crate.
pub fn shipped_toy32_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join("toy32.egw")
}

/// A generator (with its head, if trained) and optionally an encoder.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub generator: Generator,
    pub encoder: Option<Encoder>,
}

impl Checkpoint {
    pub fn new(generator: Generator) -> Self {
        Self { generator, encoder: None }
    }

    /// Identity of the generator weights that latent-space artifacts are
    /// tied to. Head and encoder do not enter it.
    pub fn generator_hash(&self) -> String {
        self.generator.fingerprint()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut sections = serde_json::Map::new();
        sections.insert("generator".into(), json!({ "blobs": blobs(self.generator.params(), &mut payload) }));
        if let Some(head) = self.generator.head() {
            sections.insert(
                "segmentation_head".into(),
                json!({
                    "in_features": head.in_features(),
                    "hidden": head.hidden(),
                    "num_labels": head.num_labels(),
                    "blobs": blobs(head.params(), &mut payload),
                }),
            );
        }
        if let Some(enc) = &self.encoder {
            sections.insert("encoder".into(), json!({ "arch": enc.arch(), "blobs": blobs(enc.params(), &mut payload) }));
        }
        let header = json!({
            "config": self.generator.config(),
            "generator_hash": self.generator_hash(),
            "sections": Value::Object(sections),
        });
        container::encode(CHECKPOINT_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let d = container::decode("checkpoint", path, CHECKPOINT_MAGIC, bytes)?;
        let corrupt = |reason: String| Error::Corrupt { kind: "checkpoint", path: path.to_path_buf(), reason };
        let config: GeneratorConfig =
            serde_json::from_value(d.header.get("config").cloned().unwrap_or(Value::Null)).map_err(|e| corrupt(format!("config: {e}")))?;
        let sections = d.header.get("sections").ok_or_else(|| corrupt("missing sections".into()))?;
        let mut generator = Generator::new(config).map_err(|e| corrupt(e.to_string()))?;
        let gen_sec = sections.get("generator").ok_or_else(|| corrupt("missing generator section".into()))?;
        fill(generator.params_mut(), gen_sec, &d.payload).map_err(|r| corrupt(format!("generator: {r}")))?;

        if let Some(sec) = sections.get("segmentation_head") {
            let num = |k: &str| container::header_usize(sec, k).ok_or_else(|| corrupt(format!("segmentation_head: missing {k}")));
            let hidden: [usize; 2] =
                serde_json::from_value(sec.get("hidden").cloned().unwrap_or(Value::Null)).map_err(|e| corrupt(format!("segmentation_head: {e}")))?;
            let mut head = SegmentationHead::new(num("in_features")?, hidden, num("num_labels")?, 0);
            fill(head.params_mut(), sec, &d.payload).map_err(|r| corrupt(format!("segmentation_head: {r}")))?;
            generator.set_head(head).map_err(|e| corrupt(e.to_string()))?;
        }
        let encoder = match sections.get("encoder") {
            None => None,
            Some(sec) => {
                let arch: EncoderArch =
                    serde_json::from_value(sec.get("arch").cloned().unwrap_or(Value::Null)).map_err(|e| corrupt(format!("encoder: {e}")))?;
                let mut enc = Encoder::with_arch(arch, 0).map_err(|e| corrupt(e.to_string()))?;
                fill(enc.params_mut(), sec, &d.payload).map_err(|r| corrupt(format!("encoder: {r}")))?;
                Some(enc)
            }
        };
        let ck = Self { generator, encoder };
        if let Some(h) = d.header.get("generator_hash").and_then(Value::as_str) {
            if h != ck.generator_hash() {
                return Err(corrupt("generator weights do not match the recorded hash".into()));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

fn blobs(params: &ParamSet, payload: &mut Vec<f32>) -> Value {
    let list: Vec<Value> = params
        .iter()
        .map(|(name, t)| {
            let offset = payload.len();
            payload.extend(t.data().iter().map(|&v| v as f32));
            json!({ "name": name, "shape": t.shape(), "offset": offset })
        })
        .collect();
    Value::Array(list)
}

fn fill(params: &mut ParamSet, section: &Value, payload: &[f32]) -> std::result::Result<(), String> {
    let list = section.get("blobs").and_then(Value::as_array).ok_or("missing blob table")?;
    if list.len() != params.len() {
        return Err(format!("{} blobs, expected {}", list.len(), params.len()));
    }
    for blob in list {
        let name = blob.get("name").and_then(Value::as_str).ok_or("blob without name")?;
        let shape: Vec<usize> = serde_json::from_value(blob.get("shape").cloned().unwrap_or(Value::Null)).map_err(|e| e.to_string())?;
        let offset = blob.get("offset").and_then(Value::as_u64).ok_or("blob without offset")? as usize;
        let n: usize = shape.iter().product();
        let data = payload.get(offset..offset + n).ok_or_else(|| format!("blob {name} runs past the payload"))?;
        params.set(name, Tensor::new(&shape, data.iter().map(|&v| v as f64).collect()))?;
    }
    Ok(())
}
