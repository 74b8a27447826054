//! Run configuration: a TOML file, then `GG_*` environment variables, then
//! command-line flags, each layer overriding the previous one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ChunkParams, FieldMap, Strictness};
use crate::embedding::{Backend, EmbedderConfig};
use crate::llm::RemoteChatConfig;
use crate::pipeline::{PipelineConfig, QueryMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("environment variable {name}: {message}")]
    Env { name: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub fields: FieldMap,
    /// Abort on the first bad record instead of skipping it.
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkingSection {
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for ChunkingSection {
    fn default() -> Self {
        let p = ChunkParams::default();
        Self {
            chunk_size: p.chunk_size(),
            overlap: p.overlap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QueryModeName {
    #[default]
    Fixed,
    PerDiagnosis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub n_queries: usize,
    pub query_mode: QueryModeName,
    pub k: usize,
    pub workers: usize,
    pub prompt_dir: Option<PathBuf>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            n_queries: 5,
            query_mode: QueryModeName::Fixed,
            k: p.k,
            workers: 1,
            prompt_dir: None,
            temperature: p.temperature,
            max_tokens: p.max_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LlmBackend {
    #[default]
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub backend: LlmBackend,
    pub mock_transcript: Option<PathBuf>,
    pub base_url: String,
    pub model: String,
    pub api_key_env: String,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for LlmSection {
    fn default() -> Self {
        let r = RemoteChatConfig::default();
        Self {
            backend: LlmBackend::Remote,
            mock_transcript: None,
            base_url: r.base_url,
            model: r.model,
            api_key_env: "GG_API_KEY".into(),
            max_attempts: r.max_attempts,
            initial_backoff_ms: r.initial_backoff_ms,
            max_in_flight: r.max_in_flight,
            timeout_secs: r.timeout_secs,
        }
    }
}

impl LlmSection {
    pub fn remote_config(&self) -> RemoteChatConfig {
        RemoteChatConfig {
            base_url: self.base_url.clone(),
            model: self.model.clone(),
            max_attempts: self.max_attempts,
            initial_backoff_ms: self.initial_backoff_ms,
            max_in_flight: self.max_in_flight,
            timeout_secs: self.timeout_secs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub corpus: CorpusSection,
    pub chunking: ChunkingSection,
    pub embedding: EmbedderConfig,
    pub pipeline: PipelineSection,
    pub llm: LlmSection,
}

/// Values given on the command line; `None` leaves the lower layers alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub strict: Option<bool>,
    pub mock_transcript: Option<PathBuf>,
    pub workers: Option<usize>,
    pub k: Option<usize>,
    pub n_queries: Option<usize>,
    pub per_diagnosis: Option<bool>,
    pub prompt_dir: Option<PathBuf>,
}

fn env_parse<T: std::str::FromStr>(env: &dyn Fn(&str) -> Option<String>, name: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    match env(name) {
        None => Ok(None),
        Some(raw) => raw.trim().parse().map(Some).map_err(|e: T::Err| ConfigError::Env {
            name: name.into(),
            message: e.to_string(),
        }),
    }
}

impl Config {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.into(),
            message: e.to_string(),
        })
    }

    /// Parses a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        for slot in [&mut cfg.pipeline.prompt_dir, &mut cfg.llm.mock_transcript] {
            if let Some(p) = slot.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Applies `GG_BASE_URL` (both services), `GG_EMBED_BASE_URL`, `GG_MODEL`, `GG_K`,
    /// `GG_QUERIES` and `GG_WORKERS`.
    pub fn apply_env(&mut self, env: &dyn Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(url) = env("GG_BASE_URL") {
            self.llm.base_url = url.clone();
            self.embedding.base_url = Some(url);
        }
        if let Some(url) = env("GG_EMBED_BASE_URL") {
            self.embedding.base_url = Some(url);
        }
        if let Some(model) = env("GG_MODEL") {
            self.llm.model = model;
        }
        if let Some(k) = env_parse(env, "GG_K")? {
            self.pipeline.k = k;
        }
        if let Some(n) = env_parse(env, "GG_QUERIES")? {
            self.pipeline.n_queries = n;
        }
        if let Some(w) = env_parse(env, "GG_WORKERS")? {
            self.pipeline.workers = w;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, o: &Overrides) {
        if let Some(s) = o.strict {
            self.corpus.strict = s;
        }
        if let Some(p) = &o.mock_transcript {
            self.llm.backend = LlmBackend::Mock;
            self.llm.mock_transcript = Some(p.clone());
        }
        if let Some(w) = o.workers {
            self.pipeline.workers = w;
        }
        if let Some(k) = o.k {
            self.pipeline.k = k;
        }
        if let Some(n) = o.n_queries {
            self.pipeline.n_queries = n;
            self.pipeline.query_mode = QueryModeName::Fixed;
        }
        if let Some(true) = o.per_diagnosis {
            self.pipeline.query_mode = QueryModeName::PerDiagnosis;
        }
        if let Some(p) = &o.prompt_dir {
            self.pipeline.prompt_dir = Some(p.clone());
        }
    }

    /// File (or defaults), then environment, then flags; validated.
    pub fn resolve(
        file: Option<&Path>,
        env: &dyn Fn(&str) -> Option<String>,
        overrides: &Overrides,
    ) -> Result<Self, ConfigError> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env(env)?;
        cfg.apply_overrides(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        self.chunk_params()?;
        self.embedding
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("embedding: {e}")))?;
        if self.pipeline.n_queries == 0 {
            return invalid("n_queries must be at least 1".into());
        }
        if self.pipeline.k == 0 {
            return invalid("k must be at least 1".into());
        }
        if self.pipeline.workers == 0 {
            return invalid("workers must be at least 1".into());
        }
        if let Some(dir) = &self.pipeline.prompt_dir {
            if !dir.is_dir() {
                return invalid(format!("prompt directory {} does not exist", dir.display()));
            }
        }
        match self.llm.backend {
            LlmBackend::Mock => {
                match &self.llm.mock_transcript {
                    None => return invalid("the mock LLM backend needs a transcript".into()),
                    Some(p) if !p.is_file() => {
                        return invalid(format!("mock transcript {} does not exist", p.display()))
                    }
                    Some(_) => {}
                }
                if self.pipeline.workers > 1 {
                    return invalid(format!(
                        "the mock LLM backend is sequential; workers must be 1 (got {})",
                        self.pipeline.workers
                    ));
                }
            }
            LlmBackend::Remote => {}
        }
        Ok(())
    }

    pub fn chunk_params(&self) -> Result<ChunkParams, ConfigError> {
        ChunkParams::new(self.chunking.chunk_size, self.chunking.overlap)
            .map_err(|e| ConfigError::Invalid(format!("chunking: {e}")))
    }

    pub fn strictness(&self) -> Strictness {
        if self.corpus.strict {
            Strictness::Abort
        } else {
            Strictness::Skip
        }
    }

    pub fn query_mode(&self) -> QueryMode {
        match self.pipeline.query_mode {
            QueryModeName::Fixed => QueryMode::Fixed(self.pipeline.n_queries),
            QueryModeName::PerDiagnosis => QueryMode::PerDiagnosis,
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            query_mode: self.query_mode(),
            k: self.pipeline.k,
            temperature: self.pipeline.temperature,
            max_tokens: self.pipeline.max_tokens,
        }
    }

    pub fn uses_network(&self) -> bool {
        self.embedding.backend == Backend::Remote || self.llm.backend == LlmBackend::Remote
    }
}

/// Reads variables from the process environment.
pub fn process_env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}
