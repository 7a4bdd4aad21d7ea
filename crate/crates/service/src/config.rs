//! Service configuration: one TOML file, then `EDITGAN_*` environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub vectors_dir: PathBuf,
    pub sessions_dir: PathBuf,
    pub host: String,
    pub port: u16,
    /// Latent refinement steps when a session is created.
    pub embed_steps: usize,
    /// Optimization steps of an edit job unless the request overrides them.
    pub edit_steps: usize,
    /// Progress events are emitted every this many steps.
    pub progress_every: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint: editgan::checkpoint::shipped_toy32_path(),
            vectors_dir: PathBuf::from("vectors"),
            sessions_dir: PathBuf::from("sessions"),
            host: "127.0.0.1".into(),
            port: 8080,
            embed_steps: 200,
            edit_steps: 100,
            progress_every: 5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("environment variable {name}={value:?} is not a valid {kind}")]
    Env { name: String, value: String, kind: &'static str },
}

impl ServiceConfig {
    /// Reads `path` if given (defaults otherwise) and applies overrides from
    /// the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let base = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?;
                toml::from_str(&text).map_err(|source| ConfigError::Parse { path: p.to_path_buf(), source })?
            }
        };
        base.with_overrides(std::env::vars())
    }

    pub fn with_overrides(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        fn num<T: std::str::FromStr>(name: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::Env { name: name.into(), value: value.into(), kind: "number" })
        }
        for (name, value) in vars {
            match name.as_str() {
                "EDITGAN_CHECKPOINT" => self.checkpoint = value.into(),
                "EDITGAN_VECTORS_DIR" => self.vectors_dir = value.into(),
                "EDITGAN_SESSIONS_DIR" => self.sessions_dir = value.into(),
                "EDITGAN_HOST" => self.host = value,
                "EDITGAN_PORT" => self.port = num(&name, &value)?,
                "EDITGAN_EMBED_STEPS" => self.embed_steps = num(&name, &value)?,
                "EDITGAN_EDIT_STEPS" => self.edit_steps = num(&name, &value)?,
                "EDITGAN_PROGRESS_EVERY" => self.progress_every = num::<usize>(&name, &value)?.max(1),
                _ => {}
            }
        }
        Ok(self)
    }
}
