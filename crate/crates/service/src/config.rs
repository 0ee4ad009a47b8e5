//! Service configuration: one TOML document plus `CTAGENT_` environment
//! overrides.
//!
//! An override names a key path with `__` between levels, e.g.
//! `CTAGENT_BACKEND__PLANNER_URL=http://host/v1/chat` or
//! `CTAGENT_RETRIEVAL__TOP_K=5`. Values are read as TOML literals when they
//! parse as one and as plain strings otherwise.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use ctagent_core::compression::{CompressionConfig, DEFAULT_PROJECTED_DIM};
use ctagent_core::memory::DEFAULT_TOP_K;
use serde::{Deserialize, Serialize};

use crate::ServiceError;

pub const ENV_PREFIX: &str = "CTAGENT_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    /// Use the built-in deterministic backends; no network access.
    pub mock: bool,
    pub planner_url: Option<String>,
    /// Defaults to `planner_url`.
    pub region_url: Option<String>,
    pub embedder_url: Option<String>,
    pub planner_model: String,
    pub region_model: String,
    pub embedder_model: String,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            mock: false,
            planner_url: None,
            region_url: None,
            embedder_url: None,
            planner_model: "planner".into(),
            region_model: "region".into(),
            embedder_model: "embedder".into(),
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionSection {
    pub dominant: usize,
    pub contextual: usize,
    pub projected_dim: usize,
    pub moe_experts: usize,
    pub moe_top_k: usize,
}

impl Default for CompressionSection {
    fn default() -> Self {
        let c = CompressionConfig::default();
        Self {
            dominant: c.dominant,
            contextual: c.contextual,
            projected_dim: DEFAULT_PROJECTED_DIM,
            moe_experts: 4,
            moe_top_k: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub top_k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self { top_k: DEFAULT_TOP_K }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamsSection {
    /// `CTPW` file with MoE and projection weights. Seeded weights otherwise.
    pub weights: Option<PathBuf>,
    /// Directory of `*.ctla` adapters, one per region. Seeded otherwise.
    pub adapters_dir: Option<PathBuf>,
    /// Seed for any weights not loaded from files.
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StorageSection {
    /// `CTES` exemplar store; reports run zero-shot without one.
    pub store: Option<PathBuf>,
    /// JSONL history log; kept in memory when unset.
    pub history: Option<PathBuf>,
    pub fsync: bool,
    /// `*.ctfv` files here are registered at startup.
    pub studies_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    pub listen: String,
    /// Reports return 202 with a poll URL instead of blocking.
    #[serde(rename = "async")]
    pub async_reports: bool,
    pub max_upload_bytes: usize,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self { listen: "127.0.0.1:8080".into(), async_reports: false, max_upload_bytes: 1 << 30 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub template_dir: Option<PathBuf>,
    pub backend: BackendConfig,
    pub compression: CompressionSection,
    pub retrieval: RetrievalSection,
    pub params: ParamsSection,
    pub storage: StorageSection,
    pub server: ServerSection,
}

fn invalid(msg: impl Into<String>) -> ServiceError {
    ServiceError::ConfigInvalid(msg.into())
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fails only for integers TOML cannot hold (above `i64::MAX`).
    pub fn to_toml(&self) -> Result<String, ServiceError> {
        toml::to_string(self).map_err(|e| invalid(e.to_string()))
    }

    /// Reads `path` (defaults when `None`), then applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ServiceError> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ServiceError> {
        let cfg = Self::parse_with_env(path, env)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`Self::load_with_env`] but only checks syntax and key names;
    /// commands that never contact a backend use this.
    pub fn parse_with_env(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ServiceError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut doc: toml::Table = toml::from_str(&text).map_err(|e| invalid(e.to_string()))?;
        let mut overrides: Vec<(String, String)> =
            env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (key, value) in overrides {
            apply_override(&mut doc, &key[ENV_PREFIX.len()..], &value)?;
        }
        toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let c = &self.compression;
        if c.dominant == 0 {
            return Err(invalid("compression.dominant must be at least 1"));
        }
        if c.projected_dim == 0 {
            return Err(invalid("compression.projected_dim must be at least 1"));
        }
        if c.moe_experts == 0 || c.moe_top_k == 0 || c.moe_top_k > c.moe_experts {
            return Err(invalid(format!(
                "compression.moe_top_k={} must be in 1..=moe_experts={}",
                c.moe_top_k, c.moe_experts
            )));
        }
        if !self.backend.mock && (self.backend.planner_url.is_none() || self.backend.embedder_url.is_none()) {
            return Err(invalid("backend.planner_url and backend.embedder_url are required unless backend.mock is set"));
        }
        self.listen_addr()?;
        Ok(())
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, ServiceError> {
        self.server
            .listen
            .parse()
            .map_err(|e| invalid(format!("server.listen {:?}: {e}", self.server.listen)))
    }

    pub fn compression_config(&self) -> CompressionConfig {
        CompressionConfig::new(self.compression.dominant, self.compression.contextual)
    }
}

fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<(), ServiceError> {
    let path: Vec<String> = key.split("__").map(|p| p.to_ascii_lowercase()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(invalid(format!("malformed override {ENV_PREFIX}{key}")));
    }
    let value = parse_env_value(raw);
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("{ENV_PREFIX}{key}: {p} is not a section")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

fn parse_env_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    match toml::from_str::<Probe>(&format!("v = {raw}")) {
        Ok(p) => p.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_need_backend_urls() {
        assert!(matches!(EngineConfig::from_toml(""), Err(ServiceError::ConfigInvalid(_))));
        let cfg = EngineConfig::from_toml("[backend]\nmock = true\n").unwrap();
        assert_eq!(cfg.compression.dominant, 54);
        assert_eq!(cfg.compression.contextual, 10);
        assert_eq!(cfg.retrieval.top_k, 3);
        assert_eq!(cfg.compression.projected_dim, 4096);
    }

    #[test]
    fn env_overrides_apply_by_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[backend]\nmock = true\n[retrieval]\ntop_k = 3\n").unwrap();
        let cfg = EngineConfig::load_with_env(
            Some(&p),
            env(&[
                ("CTAGENT_RETRIEVAL__TOP_K", "5"),
                ("CTAGENT_SERVER__ASYNC", "true"),
                ("CTAGENT_STORAGE__HISTORY", "/tmp/h.jsonl"),
                ("CTAGENT_BACKEND__PLANNER_URL", "http://x:1/v1/chat"),
                ("OTHER", "ignored"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.retrieval.top_k, 5);
        assert!(cfg.server.async_reports);
        assert_eq!(cfg.storage.history.as_deref(), Some(Path::new("/tmp/h.jsonl")));
        assert_eq!(cfg.backend.planner_url.as_deref(), Some("http://x:1/v1/chat"));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(EngineConfig::from_toml("[backend]\nmock = true\nbogus = 1\n").is_err());
        let e = EngineConfig::load_with_env(None, env(&[("CTAGENT_BACKEND__MOCK", "true"), ("CTAGENT_NOPE", "1")]));
        assert!(e.is_err());
        let e = EngineConfig::load_with_env(
            None,
            env(&[("CTAGENT_BACKEND__MOCK", "true"), ("CTAGENT_SERVER__LISTEN", "not an addr")]),
        );
        assert!(e.is_err());
        assert!(EngineConfig::from_toml("[backend]\nmock = true\n[compression]\ndominant = 0\n").is_err());
    }
}
