//! Service configuration: TOML file, then `COVIDSCREEN_*` environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub ct_checkpoint: Option<PathBuf>,
    pub cxr_checkpoint: Option<PathBuf>,
    /// SQLite file holding cases, images and rendered overlays.
    pub store_path: PathBuf,
    /// Largest accepted image upload in bytes.
    pub max_upload_bytes: usize,
    /// Concurrent inference jobs.
    pub workers: usize,
    /// Static bearer token; `None` leaves the API open.
    pub api_token: Option<String>,
    pub default_alpha: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            ct_checkpoint: None,
            cxr_checkpoint: None,
            store_path: PathBuf::from("covidscreen.db"),
            max_upload_bytes: 16 * 1024 * 1024,
            workers: 2,
            api_token: None,
            default_alpha: 0.4,
        }
    }
}

impl ServiceConfig {
    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `COVIDSCREEN_*` variables from the process environment.
    pub fn with_env(self) -> Result<Self, ServiceError> {
        self.with_overrides(std::env::vars())
    }

    pub fn with_overrides(mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, ServiceError> {
        let opt_path = |v: String| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        for (key, value) in vars {
            let Some(name) = key.strip_prefix("COVIDSCREEN_") else { continue };
            let bad = |what: &str| ServiceError::Config(format!("{key}={value:?} is not a valid {what}"));
            match name {
                "BIND" => self.bind = value,
                "PORT" => self.port = value.parse().map_err(|_| bad("port"))?,
                "CT_CHECKPOINT" => self.ct_checkpoint = opt_path(value),
                "CXR_CHECKPOINT" => self.cxr_checkpoint = opt_path(value),
                "STORE" => self.store_path = PathBuf::from(value),
                "MAX_UPLOAD_BYTES" => self.max_upload_bytes = value.parse().map_err(|_| bad("byte count"))?,
                "WORKERS" => self.workers = value.parse().map_err(|_| bad("worker count"))?,
                "API_TOKEN" => self.api_token = (!value.is_empty()).then_some(value),
                _ => {}
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.workers == 0 {
            return Err(ServiceError::Config("workers must be at least 1".into()));
        }
        if self.max_upload_bytes == 0 {
            return Err(ServiceError::Config("max_upload_bytes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.default_alpha) {
            return Err(ServiceError::Config(format!("default_alpha {} outside [0, 1]", self.default_alpha)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn env_overrides_file_values() {
        let base: ServiceConfig = toml::from_str("port = 9000\nworkers = 3\n").unwrap();
        let c = base
            .with_overrides(vars(&[
                ("COVIDSCREEN_PORT", "7001"),
                ("COVIDSCREEN_CT_CHECKPOINT", "/m/ct.ckpt"),
                ("COVIDSCREEN_API_TOKEN", "s3cret"),
                ("HOME", "/root"),
            ]))
            .unwrap();
        assert_eq!(c.port, 7001);
        assert_eq!(c.workers, 3);
        assert_eq!(c.ct_checkpoint, Some(PathBuf::from("/m/ct.ckpt")));
        assert_eq!(c.api_token.as_deref(), Some("s3cret"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(ServiceConfig::default().with_overrides(vars(&[("COVIDSCREEN_PORT", "x")])).is_err());
        assert!(ServiceConfig::default().with_overrides(vars(&[("COVIDSCREEN_WORKERS", "0")])).is_err());
    }
}
