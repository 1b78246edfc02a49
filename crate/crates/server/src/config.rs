use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServerError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub port: u16,
    /// Without a model the service answers 503 until one is loaded.
    pub model_path: Option<PathBuf>,
    /// Content-addressed image store.
    pub storage_dir: PathBuf,
    pub event_log: PathBuf,
    pub attempt_cap: u32,
    /// Re-picks head thresholds from the model's stored validation scores.
    pub fpr_cap: Option<f64>,
    pub max_upload_bytes: usize,
    /// Optional static bundle (the capture page) served at `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            model_path: None,
            storage_dir: "photoqa-images".into(),
            event_log: "photoqa-events.jsonl".into(),
            attempt_cap: photoqa::session::DEFAULT_ATTEMPT_CAP,
            fpr_cap: None,
            max_upload_bytes: 20 << 20,
            static_dir: None,
        }
    }
}

impl ServerConfig {
    /// TOML unless the file ends in `.json`.
    pub fn parse(text: &str, json: bool) -> Result<Self, ServerError> {
        let cfg: Self = if json {
            serde_json::from_str(text).map_err(|e| ServerError::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| ServerError::Config(e.to_string()))?
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ServerError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServerError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")))
    }

    pub fn check(&self) -> Result<(), ServerError> {
        if self.attempt_cap == 0 {
            return Err(ServerError::Config("attempt_cap must be at least 1".into()));
        }
        if let Some(c) = self.fpr_cap {
            if !(0.0..=1.0).contains(&c) {
                return Err(ServerError::Config(format!("fpr_cap {c} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let t = ServerConfig::parse("port = 9000\nattempt_cap = 6\nfpr_cap = 0.2\nmodel_path = \"m.json\"\n", false).unwrap();
        let j = ServerConfig::parse(r#"{"port": 9000, "attempt_cap": 6, "fpr_cap": 0.2, "model_path": "m.json"}"#, true).unwrap();
        assert_eq!(t, j);
        assert_eq!(t.event_log, ServerConfig::default().event_log);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ServerConfig::parse("attempt_cap = 0", false).is_err());
        assert!(ServerConfig::parse("fpr_cap = 1.5", false).is_err());
        assert!(ServerConfig::parse("prot = 1", false).is_err());
    }
}
