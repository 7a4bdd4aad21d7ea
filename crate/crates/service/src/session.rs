//! Edit sessions and their on-disk layout.
//!
//! A session directory holds `source.png`, `latent.egl`,
//! `predicted_mask.png`, the client's `user_mask.png` if one was uploaded,
//! and `session.json` with the applied vectors and the history.

use std::path::{Path, PathBuf};

use editgan::container::write_atomic;
use editgan::{ExtendedLatent, Image, Mask};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub operation: String,
    pub latent_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedVector {
    pub name: String,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct EditSession {
    pub id: String,
    pub source: Image,
    pub latent: ExtendedLatent,
    pub predicted_mask: Mask,
    /// Exactly the bytes the client uploaded.
    pub user_mask: Option<Vec<u8>>,
    pub applied: Vec<AppliedVector>,
    pub history: Vec<HistoryEntry>,
}

#[derive(Serialize, Deserialize)]
struct SessionMeta {
    id: String,
    applied: Vec<AppliedVector>,
    history: Vec<HistoryEntry>,
}

/// Session ids become directory names; only uuid-like ids are accepted.
pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_hexdigit() || c == '-')
}

impl EditSession {
    pub fn new(id: String, source: Image, latent: ExtendedLatent, predicted_mask: Mask) -> Self {
        let history = vec![HistoryEntry { operation: "embed".into(), latent_hash: latent.content_hash() }];
        Self { id, source, latent, predicted_mask, user_mask: None, applied: Vec::new(), history }
    }

    pub fn record(&mut self, operation: impl Into<String>) {
        self.history.push(HistoryEntry { operation: operation.into(), latent_hash: self.latent.content_hash() });
    }

    /// The last history entry names the current latent.
    pub fn history_consistent(&self) -> bool {
        self.history.last().is_some_and(|h| h.latent_hash == self.latent.content_hash())
    }

    pub fn dir(root: &Path, id: &str) -> PathBuf {
        root.join(id)
    }

    pub fn save(&self, root: &Path, palette: &[[u8; 3]]) -> editgan::Result<()> {
        let dir = Self::dir(root, &self.id);
        std::fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("source.png"), &self.source.to_png()?)?;
        write_atomic(&dir.join("latent.egl"), &self.latent.to_bytes(&self.source.content_hash()))?;
        write_atomic(&dir.join("predicted_mask.png"), &self.predicted_mask.to_png(palette)?)?;
        let user = dir.join("user_mask.png");
        match &self.user_mask {
            Some(bytes) => write_atomic(&user, bytes)?,
            None if user.exists() => std::fs::remove_file(&user)?,
            None => {}
        }
        let meta = SessionMeta { id: self.id.clone(), applied: self.applied.clone(), history: self.history.clone() };
        write_atomic(&dir.join("session.json"), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    pub fn load(root: &Path, id: &str) -> editgan::Result<Self> {
        let dir = Self::dir(root, id);
        let meta: SessionMeta = serde_json::from_slice(&std::fs::read(dir.join("session.json"))?)?;
        let source = Image::from_png(&std::fs::read(dir.join("source.png"))?)?;
        let (latent, _) = ExtendedLatent::load(&dir.join("latent.egl"))?;
        let predicted_mask = Mask::from_png(&std::fs::read(dir.join("predicted_mask.png"))?)?;
        let user = dir.join("user_mask.png");
        let user_mask = if user.exists() { Some(std::fs::read(user)?) } else { None };
        let s = Self { id: meta.id, source, latent, predicted_mask, user_mask, applied: meta.applied, history: meta.history };
        if !s.history_consistent() {
            return Err(editgan::Error::Corrupt {
                kind: "session",
                path: dir,
                reason: "history does not end at the stored latent".into(),
            });
        }
        Ok(s)
    }
}
