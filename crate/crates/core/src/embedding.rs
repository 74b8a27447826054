//! Unit-norm text embeddings with Matryoshka prefix truncation.
//!
//! Two backends sit behind [`Embedder`]: [`HashEmbedder`], a signed
//! feature-hashing bag of words that needs no model or network, and
//! [`RemoteEmbedder`], which calls an `/embeddings` HTTP endpoint.
//! Every vector that leaves this module has unit L2 norm.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::corpus::tokenize;
use crate::http::{HttpClient, HttpError, RetryPolicy};

/// Tolerance on the unit-norm postcondition.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("no texts to embed")]
    NoInput,
    #[error("text {index} is empty")]
    EmptyText { index: usize },
    #[error("text has no tokens")]
    NoTokens,
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("truncation dimension {d_prime} exceeds vector dimension {dim}")]
    TruncateTooLarge { d_prime: usize, dim: usize },
    #[error("embedding service returned {actual}-dimensional vectors, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding request failed{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Remote {
        status: Option<u16>,
        retryable: bool,
        message: String,
    },
    #[error("malformed embedding response: {0}")]
    BadResponse(String),
    #[error("embedder configuration: {0}")]
    Config(String),
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Remote { retryable: true, .. })
    }
}

impl From<HttpError> for EmbedError {
    fn from(e: HttpError) -> Self {
        EmbedError::Remote {
            status: e.status(),
            retryable: e.is_retryable(),
            message: e.to_string(),
        }
    }
}

/// A fixed-dimension vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::ZeroDim);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn from_f32(values: &[f32]) -> Result<Self, EmbedError> {
        Self::new(values.iter().map(|&v| v as f64).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE
    }

    pub fn normalize(&self) -> Result<Self, EmbedError> {
        normalize_values(&self.values).map(|values| Self { values })
    }

    /// Keeps the first `d_prime` components and renormalizes.
    pub fn truncate_matryoshka(&self, d_prime: usize) -> Result<Self, EmbedError> {
        if d_prime == 0 {
            return Err(EmbedError::ZeroDim);
        }
        if d_prime > self.dim() {
            return Err(EmbedError::TruncateTooLarge {
                d_prime,
                dim: self.dim(),
            });
        }
        normalize_values(&self.values[..d_prime]).map(|values| Self { values })
    }
}

fn normalize_values(values: &[f64]) -> Result<Vec<f64>, EmbedError> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok(values.iter().map(|v| v / norm).collect())
}

/// Seed for the token hash (first 64 bits of the fractional part of √2).
pub const HASH_SEED: u64 = 0x6a09_e667_f3bc_c908;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the UTF-8 bytes starting from [`HASH_SEED`], finished with the
/// MurmurHash3 `fmix64` avalanche.
pub fn token_hash(token: &str) -> u64 {
    let mut h = HASH_SEED;
    for &b in token.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

/// Signed feature-hashing bag of words.
///
/// Each whitespace token `t` adds `±1` at bucket `token_hash(t) % dim`; the
/// sign is `+1` when bit 63 of the hash is clear, `-1` otherwise. The sum is
/// L2-normalized. Token order never matters.
pub fn deterministic_embed(text: &str, dim: usize) -> Result<EmbeddingVector, EmbedError> {
    if dim == 0 {
        return Err(EmbedError::ZeroDim);
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(EmbedError::NoTokens);
    }
    let mut acc = vec![0.0f64; dim];
    for t in tokens {
        let h = token_hash(t);
        let bucket = (h % dim as u64) as usize;
        acc[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    // Opposite-signed collisions can cancel everything out.
    EmbeddingVector { values: acc }.normalize()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Remote,
    #[default]
    DeterministicHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub backend: Backend,
    pub model_name: String,
    pub full_dim: usize,
    /// Matryoshka prefix length; `None` keeps the full dimension.
    pub truncate_dim: Option<usize>,
    pub base_url: Option<String>,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::DeterministicHash,
            model_name: "pubmedbert-base-embeddings-matryoshka".into(),
            full_dim: 768,
            truncate_dim: None,
            base_url: None,
            api_key_env: "GG_API_KEY".into(),
            batch_size: 64,
            max_in_flight: 4,
            max_attempts: 3,
            initial_backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

impl EmbedderConfig {
    pub fn output_dim(&self) -> usize {
        self.truncate_dim.unwrap_or(self.full_dim)
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.full_dim == 0 || self.output_dim() == 0 {
            return Err(EmbedError::ZeroDim);
        }
        if self.output_dim() > self.full_dim {
            return Err(EmbedError::Config(format!(
                "truncate_dim {} exceeds full_dim {}",
                self.output_dim(),
                self.full_dim
            )));
        }
        if self.backend == Backend::Remote && self.base_url.as_deref().unwrap_or("").is_empty() {
            return Err(EmbedError::Config("remote backend requires a base URL".into()));
        }
        if self.batch_size == 0 {
            return Err(EmbedError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

pub trait Embedder: Send + Sync {
    /// Stable identity recorded in index metadata; the retriever refuses an
    /// index built by a different embedder.
    fn identity(&self) -> String;

    /// Output dimension after truncation.
    fn dim(&self) -> usize;

    /// One unit vector per text, in input order.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;
}

fn check_texts(texts: &[String]) -> Result<(), EmbedError> {
    if texts.is_empty() {
        return Err(EmbedError::NoInput);
    }
    match texts.iter().position(|t| t.trim().is_empty()) {
        Some(index) => Err(EmbedError::EmptyText { index }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct HashEmbedder {
    full_dim: usize,
    truncate_dim: usize,
}

impl HashEmbedder {
    pub const MODEL: &'static str = "fnv1a-fmix64-bow-v1";

    pub fn new(full_dim: usize, truncate_dim: usize) -> Result<Self, EmbedError> {
        if full_dim == 0 || truncate_dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        if truncate_dim > full_dim {
            return Err(EmbedError::TruncateTooLarge {
                d_prime: truncate_dim,
                dim: full_dim,
            });
        }
        Ok(Self {
            full_dim,
            truncate_dim,
        })
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        deterministic_embed(text, self.full_dim)?.truncate_matryoshka(self.truncate_dim)
    }
}

impl Embedder for HashEmbedder {
    fn identity(&self) -> String {
        format!(
            "deterministic-hash:{}:{}/{}",
            Self::MODEL,
            self.full_dim,
            self.truncate_dim
        )
    }

    fn dim(&self) -> usize {
        self.truncate_dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_texts(texts)?;
        crate::par::map_slice(texts, |t| self.embed_one(t))
            .into_iter()
            .collect()
    }
}

pub struct RemoteEmbedder {
    client: HttpClient,
    model: String,
    full_dim: usize,
    truncate_dim: usize,
    batch_size: usize,
}

impl RemoteEmbedder {
    pub fn new(cfg: &EmbedderConfig, api_key: Option<String>) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let base_url = cfg.base_url.clone().unwrap_or_default();
        let retry = RetryPolicy {
            max_attempts: cfg.max_attempts.max(1),
            initial_backoff: Duration::from_millis(cfg.initial_backoff_ms),
            ..RetryPolicy::default()
        };
        Ok(Self {
            client: HttpClient::new(
                &base_url,
                api_key,
                retry,
                cfg.max_in_flight,
                Duration::from_secs(cfg.timeout_secs),
            ),
            model: cfg.model_name.clone(),
            full_dim: cfg.full_dim,
            truncate_dim: cfg.output_dim(),
            batch_size: cfg.batch_size,
        })
    }

    fn embed_batch(&self, batch: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let reply = self
            .client
            .post_json("embeddings", &json!({"model": self.model, "input": batch}))?;
        let raw = parse_embeddings_response(&reply, batch.len())?;
        raw.into_iter()
            .map(|values| {
                if values.len() != self.full_dim {
                    return Err(EmbedError::DimensionMismatch {
                        expected: self.full_dim,
                        actual: values.len(),
                    });
                }
                EmbeddingVector::new(values)?.truncate_matryoshka(self.truncate_dim)
            })
            .collect()
    }
}

/// Pulls `data[].embedding` out of a response, re-sorted by `data[].index`.
pub fn parse_embeddings_response(reply: &Value, expected: usize) -> Result<Vec<Vec<f64>>, EmbedError> {
    let data = reply
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| EmbedError::BadResponse("missing `data` array".into()))?;
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; expected];
    for (pos, item) in data.iter().enumerate() {
        let index = item
            .get("index")
            .and_then(Value::as_u64)
            .map(|i| i as usize)
            .unwrap_or(pos);
        let embedding = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::BadResponse(format!("item {pos} has no `embedding`")))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| EmbedError::BadResponse("non-numeric component".into())))
            .collect::<Result<Vec<_>, _>>()?;
        let slot = slots
            .get_mut(index)
            .ok_or_else(|| EmbedError::BadResponse(format!("index {index} out of range")))?;
        if slot.replace(embedding).is_some() {
            return Err(EmbedError::BadResponse(format!("duplicate index {index}")));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| EmbedError::BadResponse(format!("missing index {i}"))))
        .collect()
}

impl Embedder for RemoteEmbedder {
    fn identity(&self) -> String {
        format!("remote:{}:{}/{}", self.model, self.full_dim, self.truncate_dim)
    }

    fn dim(&self) -> usize {
        self.truncate_dim
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        check_texts(texts)?;
        let batches = crate::par::map_chunks(texts, self.batch_size, |_, b| self.embed_batch(b));
        let mut out = Vec::with_capacity(texts.len());
        for b in batches {
            out.extend(b?);
        }
        Ok(out)
    }
}

/// Builds the configured backend. The remote key is read from `cfg.api_key_env`.
pub fn build_embedder(cfg: &EmbedderConfig) -> Result<Box<dyn Embedder>, EmbedError> {
    cfg.validate()?;
    match cfg.backend {
        Backend::DeterministicHash => Ok(Box::new(HashEmbedder::new(cfg.full_dim, cfg.output_dim())?)),
        Backend::Remote => {
            let key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
            Ok(Box::new(RemoteEmbedder::new(cfg, key)?))
        }
    }
}

pub fn embed_texts(texts: &[String], cfg: &EmbedderConfig) -> Result<Vec<EmbeddingVector>, EmbedError> {
    build_embedder(cfg)?.embed_texts(texts)
}
