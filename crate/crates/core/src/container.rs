//! The binary container shared by checkpoint, latent and vector files.
//!
//! Layout: 4 magic bytes (three-letter family plus a version digit), a
//! little-endian `u32` header length, the header as canonical JSON (UTF-8,
//! sorted keys), then little-endian `f32` payload values.

use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug)]
pub(crate) struct Decoded {
    pub header: Value,
    pub payload: Vec<f32>,
}

/// Serializes a JSON value with object keys in sorted order.
pub fn canonical_json(value: &Value) -> String {
    // serde_json's default map is a BTreeMap, so keys serialize sorted.
    let normalized: Value = serde_json::from_str(&value.to_string()).expect("valid json");
    normalized.to_string()
}

pub(crate) fn encode(magic: &[u8; 4], header: &Value, payload: &[f32]) -> Vec<u8> {
    let header = canonical_json(header);
    let mut out = Vec::with_capacity(8 + header.len() + 4 * payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode(kind: &'static str, path: &Path, magic: &[u8; 4], bytes: &[u8]) -> Result<Decoded> {
    let corrupt = |reason: String| Error::Corrupt { kind, path: path.to_path_buf(), reason };
    if bytes.len() < 8 {
        return Err(corrupt(format!("file is {} bytes, shorter than the preamble", bytes.len())));
    }
    if bytes[..3] != magic[..3] {
        return Err(corrupt(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    if bytes[3] != magic[3] {
        return Err(Error::VersionMismatch {
            kind,
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 8 + hlen {
        return Err(corrupt(format!("header length {hlen} exceeds file size")));
    }
    let header: Value = serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
    let rest = &bytes[8 + hlen..];
    if rest.len() % 4 != 0 {
        return Err(corrupt(format!("payload of {} bytes is not a whole number of f32", rest.len())));
    }
    let payload = rest.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Decoded { header, payload })
}

/// Writes via a sibling temp file and rename, so readers never see a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn header_usize(header: &Value, key: &str) -> Option<usize> {
    header.get(key).and_then(Value::as_u64).map(|v| v as usize)
}
