//! Server configuration: a TOML file, then environment overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use aero_core::notify::Notifier;
use aero_core::ServiceConfig;
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config file {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid value for {var}: {message}")]
    Env { var: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    /// Address of the `/v1` API.
    pub bind: SocketAddr,
    /// Address of the collection server. Must differ from `bind`.
    pub collection_bind: SocketAddr,
    pub state_dir: PathBuf,
    /// Base URL written into download links. Defaults to `http://{collection_bind}`.
    pub collection_url: Option<String>,
    /// Webhook for terminal flow failures. Failures are only logged when unset.
    pub notifier_url: Option<String>,
    pub max_concurrent_flows: usize,
    pub tick_interval_ms: u64,
    /// Largest body accepted by the upload route.
    pub max_upload_bytes: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            bind: ([127, 0, 0, 1], 8080).into(),
            collection_bind: ([127, 0, 0, 1], 8081).into(),
            state_dir: PathBuf::from("aero-state"),
            collection_url: None,
            notifier_url: None,
            max_concurrent_flows: 32,
            tick_interval_ms: 1000,
            max_upload_bytes: 1 << 30,
        }
    }
}

fn env_addr(var: &'static str, value: &str) -> Result<SocketAddr, ConfigError> {
    value.parse().map_err(|e: std::net::AddrParseError| ConfigError::Env {
        var,
        message: e.to_string(),
    })
}

impl GatewayConfig {
    /// Reads `path` if given and applies `AERO_*` overrides from `env`.
    pub fn load(
        path: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_owned(),
                    source,
                })?;
                toml::from_str(&text).map_err(|source| ConfigError::Parse {
                    path: p.to_owned(),
                    source,
                })?
            }
            None => Self::default(),
        };
        if let Some(v) = env("AERO_BIND") {
            cfg.bind = env_addr("AERO_BIND", &v)?;
        }
        if let Some(v) = env("AERO_COLLECTION_BIND") {
            cfg.collection_bind = env_addr("AERO_COLLECTION_BIND", &v)?;
        }
        if let Some(v) = env("AERO_STATE_DIR") {
            cfg.state_dir = PathBuf::from(v);
        }
        if let Some(v) = env("AERO_NOTIFIER_URL") {
            cfg.notifier_url = Some(v).filter(|s| !s.is_empty());
        }
        Ok(cfg)
    }

    /// Same as [`load`](Self::load) with the process environment.
    pub fn from_env(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load(path, |k| std::env::var(k).ok())
    }

    pub fn service_config(&self) -> ServiceConfig {
        let mut svc = ServiceConfig::new(&self.state_dir);
        svc.max_concurrent_flows = self.max_concurrent_flows;
        svc.tick_interval = Duration::from_millis(self.tick_interval_ms.max(10));
        if let Some(url) = &self.notifier_url {
            svc.notifier = Notifier::webhook(url);
        }
        svc
    }
}
