//! Deployment configuration, read from TOML.
//!
//! ```toml
//! [server]
//! listen_addr = "127.0.0.1:8080"
//!
//! [pool]
//! log_path = "var/pool.ndjson"
//! quality_threshold = 0.6
//! capacity = 100
//!
//! [gate]
//! min_draft_bytes = 16
//!
//! [backend]
//! kind = "http"            # or "scripted"
//! endpoint = "https://llm.example/v1/chat/completions"
//! model = "vision-model"
//! deadline_ms = 30000
//! max_in_flight = 8
//!
//! [catalog]
//! problems_path = "problems.json"
//! ```
//!
//! Every key is optional. Credentials never live here: the model key comes
//! from `VATE_LLM_API_KEY` and the service token from `VATE_API_TOKEN`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::draft::GateConfig;
use crate::gateway::{Backend, Gateway, HttpBackend, HttpBackendConfig, ScriptedBackend};
use crate::model::ProblemCatalog;
use crate::pipeline::{AnalysisPipeline, PipelineConfig};
use crate::pool::{ErrorPool, FsyncPolicy, PoolConfig, ReplayReport, StorageError, DEFAULT_CAPACITY, DEFAULT_QUALITY_THRESHOLD};

pub const DEFAULT_LISTEN_ADDR: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VateConfig {
    pub server: ServerSection,
    pub pool: PoolSection,
    pub gate: GateSection,
    pub backend: BackendSection,
    pub catalog: CatalogSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub listen_addr: String,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self { listen_addr: DEFAULT_LISTEN_ADDR.to_owned() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    /// Without a path the pool lives in memory only.
    pub log_path: Option<PathBuf>,
    pub quality_threshold: f64,
    pub capacity: usize,
    pub fsync: FsyncPolicy,
}

impl Default for PoolSection {
    fn default() -> Self {
        Self {
            log_path: None,
            quality_threshold: DEFAULT_QUALITY_THRESHOLD,
            capacity: DEFAULT_CAPACITY,
            fsync: FsyncPolicy::Never,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSection {
    pub min_draft_bytes: usize,
}

impl Default for GateSection {
    fn default() -> Self {
        Self { min_draft_bytes: GateConfig::default().min_draft_bytes }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub deadline_ms: u64,
    pub max_in_flight: usize,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self { kind: BackendKind::Scripted, endpoint: None, model: None, deadline_ms: 30_000, max_in_flight: 8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogSection {
    /// JSON array of problems. The bundled sample catalog is used when unset.
    pub problems_path: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("loading problems from {path}: {message}")]
    Catalog { path: PathBuf, message: String },
    #[error(transparent)]
    Storage(#[from] StorageError),
}

impl VateConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if !(0.0..=1.0).contains(&self.pool.quality_threshold) {
            return invalid("pool.quality_threshold must lie in [0, 1]");
        }
        if self.pool.capacity == 0 {
            return invalid("pool.capacity must be at least 1");
        }
        if self.backend.kind == BackendKind::Http && (self.backend.endpoint.is_none() || self.backend.model.is_none()) {
            return invalid("backend.kind = \"http\" needs backend.endpoint and backend.model");
        }
        Ok(())
    }

    pub fn pool_config(&self) -> PoolConfig {
        PoolConfig { capacity: self.pool.capacity, quality_threshold: self.pool.quality_threshold, fsync: self.pool.fsync }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig { gate: GateConfig { min_draft_bytes: self.gate.min_draft_bytes }, ..PipelineConfig::default() }
    }

    pub fn backend(&self) -> Result<Arc<dyn Backend>, ConfigError> {
        self.validate()?;
        Ok(match self.backend.kind {
            BackendKind::Scripted => Arc::new(ScriptedBackend::new()),
            BackendKind::Http => Arc::new(HttpBackend::from_env(HttpBackendConfig {
                endpoint: self.backend.endpoint.clone().unwrap_or_default(),
                model: self.backend.model.clone().unwrap_or_default(),
                deadline_ms: self.backend.deadline_ms,
                max_in_flight: self.backend.max_in_flight,
            })),
        })
    }

    pub fn catalog(&self) -> Result<ProblemCatalog, ConfigError> {
        match &self.catalog.problems_path {
            None => Ok(crate::fixtures::catalog()),
            Some(path) => {
                let err = |message: String| ConfigError::Catalog { path: path.clone(), message };
                let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
                ProblemCatalog::from_json(&text).map_err(|e| err(e.to_string()))
            }
        }
    }

    pub fn open_pool(&self) -> Result<(ErrorPool, ReplayReport), ConfigError> {
        match &self.pool.log_path {
            None => Ok((ErrorPool::in_memory(self.pool_config()), ReplayReport::default())),
            Some(path) => Ok(ErrorPool::open(self.pool_config(), path)?),
        }
    }

    /// Builds the full pipeline: backend, catalog and pool, replaying the
    /// pool log if one is configured.
    pub fn build_pipeline(&self, clock: Arc<dyn Clock>) -> Result<(AnalysisPipeline, ReplayReport), ConfigError> {
        let gateway = Gateway::new(self.backend()?);
        let catalog = self.catalog()?;
        let (pool, report) = self.open_pool()?;
        let pipeline = AnalysisPipeline::new(Arc::new(catalog), gateway, Arc::new(pool), clock, self.pipeline_config());
        Ok((pipeline, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SystemClock;

    #[test]
    fn empty_file_gives_defaults() {
        let c = VateConfig::from_toml_str("").unwrap();
        assert_eq!(c, VateConfig::default());
        assert_eq!(c.server.listen_addr, DEFAULT_LISTEN_ADDR);
        assert_eq!(c.pool_config(), PoolConfig::default());
    }

    #[test]
    fn documented_keys_parse() {
        let c = VateConfig::from_toml_str(
            r#"
            [server]
            listen_addr = "0.0.0.0:9000"
            [pool]
            log_path = "/tmp/p.ndjson"
            quality_threshold = 0.5
            capacity = 7
            [gate]
            min_draft_bytes = 100
            [backend]
            kind = "http"
            endpoint = "http://localhost:1/v1/chat/completions"
            model = "m"
            deadline_ms = 500
            max_in_flight = 2
            "#,
        )
        .unwrap();
        assert_eq!(c.pool.capacity, 7);
        assert_eq!(c.gate.min_draft_bytes, 100);
        assert_eq!(c.backend.kind, BackendKind::Http);
        assert_eq!(c.pipeline_config().gate.min_draft_bytes, 100);
        assert_eq!(c.backend().unwrap().name(), "http:m");
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(VateConfig::from_toml_str("[pool]\napi_key = \"x\""), Err(ConfigError::Parse(_))));
        assert!(matches!(VateConfig::from_toml_str("[pool]\ncapacity = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(VateConfig::from_toml_str("[backend]\nkind = \"http\""), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn pipeline_replays_configured_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.ndjson");
        let c = VateConfig { pool: PoolSection { log_path: Some(path.clone()), ..PoolSection::default() }, ..VateConfig::default() };
        let (p, report) = c.build_pipeline(Arc::new(SystemClock)).unwrap();
        assert!(report.records.is_empty());
        assert_eq!(p.catalog().len(), 3);
        assert!(path.exists());
    }
}
