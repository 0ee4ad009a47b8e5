//! HTTP service and command-line front end for the CT agent engine.
//!
//! [`build_engine`] turns an [`EngineConfig`] into a ready
//! [`Engine`](ctagent_core::orchestration::Engine); [`server`] exposes it over
//! JSON/HTTP and [`cli`] drives it from the shell.

pub mod cli;
pub mod config;
pub mod mock_backend;
pub mod server;

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use ctagent_core::adapters::{AdapterError, AdapterRegistry, DEFAULT_ALPHA, DEFAULT_RANK};
use ctagent_core::backend::{BackendError, HttpEmbeddingClient, HttpLlmClient, MOCK_EMBEDDING_DIM};
use ctagent_core::compression::load_params;
use ctagent_core::container::FormatError;
use ctagent_core::evaluation::EvalError;
use ctagent_core::feature_io::load_volume;
use ctagent_core::memory::{ExemplarStore, HistoryLog, MemoryError, QueryHub};
use ctagent_core::orchestration::{Backends, Engine, EngineError, EngineSettings};
use ctagent_core::templates::{TemplateError, TemplateSet};
use thiserror::Error;

pub use config::EngineConfig;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl ServiceError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

pub fn engine_settings(cfg: &EngineConfig) -> EngineSettings {
    EngineSettings {
        compression: cfg.compression_config(),
        top_k: cfg.retrieval.top_k,
        projected_dim: cfg.compression.projected_dim,
        seed: cfg.params.seed,
        moe_experts: cfg.compression.moe_experts,
        moe_top_k: cfg.compression.moe_top_k,
    }
}

fn backends(cfg: &EngineConfig) -> Result<Backends, ServiceError> {
    let b = &cfg.backend;
    if b.mock {
        return Ok(Backends::mock());
    }
    let missing = |what: &str| ServiceError::ConfigInvalid(format!("backend.{what} is required"));
    let planner_url = b.planner_url.clone().ok_or_else(|| missing("planner_url"))?;
    let region_url = b.region_url.clone().unwrap_or_else(|| planner_url.clone());
    let embedder_url = b.embedder_url.clone().ok_or_else(|| missing("embedder_url"))?;
    let timeout = Duration::from_secs(b.timeout_secs.max(1));
    Ok(Backends {
        planner: Arc::new(HttpLlmClient::with_timeout(planner_url, &b.planner_model, timeout)?),
        region: Arc::new(HttpLlmClient::with_timeout(region_url, &b.region_model, timeout)?),
        embedder: Arc::new(HttpEmbeddingClient::new(embedder_url, &b.embedder_model)?),
    })
}

/// Builds the engine and registers any studies in `storage.studies_dir`.
///
/// HTTP clients are blocking; call this outside an async runtime.
pub fn build_engine(cfg: &EngineConfig) -> Result<Engine, ServiceError> {
    cfg.validate()?;
    let settings = engine_settings(cfg);
    let templates = match &cfg.template_dir {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::builtin(),
    };
    let registry = match &cfg.params.adapters_dir {
        Some(dir) => {
            let reg = AdapterRegistry::load_dir(dir)?;
            let missing = reg.missing_regions();
            if !missing.is_empty() {
                return Err(ServiceError::ConfigInvalid(format!(
                    "{} has no adapter for {missing:?}",
                    dir.display()
                )));
            }
            reg
        }
        None => {
            let d = settings.projected_dim;
            AdapterRegistry::seeded(settings.seed, d, d, DEFAULT_RANK.min(d), DEFAULT_ALPHA)?
        }
    };
    let store = match &cfg.storage.store {
        Some(p) if p.exists() => ExemplarStore::load(p)?,
        Some(p) => {
            tracing::warn!(path = %p.display(), "exemplar store not found; reports run zero-shot");
            ExemplarStore::new(MOCK_EMBEDDING_DIM)
        }
        None => ExemplarStore::new(MOCK_EMBEDDING_DIM),
    };
    let history = match &cfg.storage.history {
        Some(p) => HistoryLog::open(p, cfg.storage.fsync)?,
        None => HistoryLog::in_memory(),
    };
    let mut engine =
        Engine::new(settings, backends(cfg)?, templates, registry, QueryHub::default(), store, history);
    if let Some(p) = &cfg.params.weights {
        let (moe, proj) = load_params(p)?;
        if proj.output_dim() != cfg.compression.projected_dim {
            return Err(ServiceError::ConfigInvalid(format!(
                "{} projects to {} but compression.projected_dim is {}",
                p.display(),
                proj.output_dim(),
                cfg.compression.projected_dim
            )));
        }
        engine = engine.with_params(moe, proj)?;
    }
    if let Some(dir) = &cfg.storage.studies_dir {
        let entries = std::fs::read_dir(dir).map_err(|e| ServiceError::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ctfv"))
            .collect();
        paths.sort();
        for p in paths {
            engine.add_study(load_volume(&p)?)?;
        }
    }
    Ok(engine)
}
