//! Access to text-generation and embedding backends.
//!
//! Every call to a model goes through a [`Gateway`], which validates inputs
//! and outputs, bounds the number of in-flight requests, and counts calls.
//! Two backends are provided: [`HttpBackend`] for Ollama-compatible servers and
//! [`MockBackend`], a pure function of its seed, fixture and inputs.

mod http;
mod mock;

use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::{hashed_bow_embedding, MockBackend, MOCK_EMBEDDING_DIM};

/// Overrides the configured `base_url` of HTTP backends.
pub const BASE_URL_ENV: &str = "CQFORGE_BASE_URL";
/// Bearer token sent with HTTP requests when set.
pub const API_KEY_ENV: &str = "CQFORGE_API_KEY";

pub const DEFAULT_MAX_IN_FLIGHT: usize = 2;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request to model '{model}' timed out after {attempts} attempt(s)")]
    Timeout { model: String, attempts: u32 },
    #[error("backend error for model '{model}'{}: {message}", .status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Backend { model: String, status: Option<u16>, message: String },
    #[error("embedding dimension mismatch: vector {index} has {found} entries, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize, index: usize },
    #[error("invalid request: {0}")]
    InvalidInput(String),
    #[error("invalid backend descriptor: {0}")]
    Descriptor(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    pub model: String,
    /// `None` leaves the backend default in place; nothing is sent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout_secs() -> u64 {
    300
}

fn default_retries() -> u32 {
    2
}

impl GenParams {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            temperature: None,
            max_tokens: None,
            request_timeout_secs: default_timeout_secs(),
            retries: default_retries(),
        }
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs(self.request_timeout_secs)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model.trim().is_empty() {
            return Err(GatewayError::InvalidInput("model name is empty".into()));
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t >= 0.0) {
                return Err(GatewayError::InvalidInput(format!("temperature must be >= 0, got {t}")));
            }
        }
        if self.max_tokens == Some(0) {
            return Err(GatewayError::InvalidInput("max_tokens must be > 0".into()));
        }
        Ok(())
    }
}

/// A dense embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::InvalidInput("embedding has dimension 0".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GatewayError::InvalidInput(format!("embedding entry {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

/// Where a backend lives: an HTTP endpoint, or a seeded mock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl BackendDescriptor {
    pub fn http(base_url: impl Into<String>) -> Self {
        Self { kind: BackendKind::Http, base_url: Some(base_url.into()), fixture: None, seed: None }
    }

    pub fn mock(seed: u64) -> Self {
        Self { kind: BackendKind::Mock, base_url: None, fixture: None, seed: Some(seed) }
    }

    /// Applies `CQFORGE_BASE_URL` to HTTP descriptors.
    pub fn with_env_overrides(mut self) -> Self {
        if self.kind == BackendKind::Http {
            if let Ok(url) = std::env::var(BASE_URL_ENV) {
                if !url.trim().is_empty() {
                    self.base_url = Some(url);
                }
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.kind {
            BackendKind::Http if self.base_url.as_deref().is_none_or(|u| u.trim().is_empty()) => {
                Err(GatewayError::Descriptor("http backend requires base_url".into()))
            }
            BackendKind::Mock if self.seed.is_none() => {
                Err(GatewayError::Descriptor("mock backend requires seed".into()))
            }
            _ => Ok(()),
        }
    }

    /// Builds the backend this descriptor names.
    pub fn connect(&self) -> Result<Arc<dyn Backend>, GatewayError> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Http => {
                let mut b = HttpBackend::new(self.base_url.clone().unwrap_or_default());
                if let Ok(key) = std::env::var(API_KEY_ENV) {
                    if !key.is_empty() {
                        b = b.with_api_key(key);
                    }
                }
                Arc::new(b)
            }
            BackendKind::Mock => {
                let mut m = MockBackend::new(self.seed.unwrap_or_default());
                if let Some(path) = &self.fixture {
                    m = m.with_fixture_file(path)?;
                }
                Arc::new(m)
            }
        })
    }
}

/// A text-generation and embedding provider.
pub trait Backend: Send + Sync {
    fn generate(&self, params: &GenParams, prompt: &str) -> Result<String, GatewayError>;
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallRecord {
    Generate { model: String, prompt: String },
    Embed { model: String, count: usize },
}

struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self { max: max.max(1), in_flight: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Validating, rate-limited front for a [`Backend`]. Safe to share across threads.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    limiter: Limiter,
    generate_calls: AtomicUsize,
    embed_calls: AtomicUsize,
    peak_in_flight: AtomicUsize,
    log: Option<Mutex<Vec<CallRecord>>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("max_in_flight", &self.limiter.max)
            .field("generate_calls", &self.generate_calls())
            .field("embed_calls", &self.embed_calls())
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self::with_limit(backend, DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_limit(backend: Arc<dyn Backend>, max_in_flight: usize) -> Self {
        Self {
            backend,
            limiter: Limiter::new(max_in_flight),
            generate_calls: AtomicUsize::new(0),
            embed_calls: AtomicUsize::new(0),
            peak_in_flight: AtomicUsize::new(0),
            log: None,
        }
    }

    pub fn from_descriptor(desc: &BackendDescriptor, max_in_flight: usize) -> Result<Self, GatewayError> {
        Ok(Self::with_limit(desc.clone().with_env_overrides().connect()?, max_in_flight))
    }

    /// Keeps a log of every call, retrievable with [`Gateway::calls`].
    pub fn recording(mut self) -> Self {
        self.log = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.max
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneous backend calls observed so far.
    pub fn peak_in_flight(&self) -> usize {
        self.peak_in_flight.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.as_ref().map(|l| l.lock().unwrap().clone()).unwrap_or_default()
    }

    fn record(&self, rec: CallRecord) {
        if let Some(log) = &self.log {
            log.lock().unwrap().push(rec);
        }
    }

    fn permit(&self) -> Permit<'_> {
        let permit = self.limiter.acquire();
        let now = *self.limiter.in_flight.lock().unwrap();
        self.peak_in_flight.fetch_max(now, Ordering::SeqCst);
        permit
    }

    /// Raw completion for `prompt`.
    pub fn generate(&self, params: &GenParams, prompt: &str) -> Result<String, GatewayError> {
        params.validate()?;
        if prompt.trim().is_empty() {
            return Err(GatewayError::InvalidInput("prompt is empty".into()));
        }
        self.generate_calls.fetch_add(1, Ordering::SeqCst);
        self.record(CallRecord::Generate { model: params.model.clone(), prompt: prompt.to_owned() });
        let _permit = self.permit();
        self.backend.generate(params, prompt)
    }

    /// One vector per text, in input order, all of the same dimension.
    pub fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidInput("no texts to embed".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(GatewayError::InvalidInput(format!("text {i} is empty")));
        }
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        self.record(CallRecord::Embed { model: model.to_owned(), count: texts.len() });
        let vectors = {
            let _permit = self.permit();
            self.backend.embed(model, texts)?
        };
        if vectors.len() != texts.len() {
            return Err(GatewayError::Backend {
                model: model.to_owned(),
                status: None,
                message: format!("{} embeddings returned for {} texts", vectors.len(), texts.len()),
            });
        }
        check_uniform_dim(&vectors)?;
        Ok(vectors)
    }
}

pub(crate) fn check_uniform_dim(vectors: &[EmbeddingVector]) -> Result<(), GatewayError> {
    if let Some(first) = vectors.first() {
        let expected = first.dim();
        if let Some((index, v)) = vectors.iter().enumerate().find(|(_, v)| v.dim() != expected) {
            return Err(GatewayError::DimensionMismatch { expected, found: v.dim(), index });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    struct Slow;

    impl Backend for Slow {
        fn generate(&self, _: &GenParams, prompt: &str) -> Result<String, GatewayError> {
            thread::sleep(Duration::from_millis(20));
            Ok(prompt.to_owned())
        }
        fn embed(&self, _: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
            Ok(texts.iter().enumerate().map(|(i, _)| EmbeddingVector::new(vec![1.0; i + 1]).unwrap()).collect())
        }
    }

    #[test]
    fn in_flight_bound_is_enforced() {
        let gw = Gateway::with_limit(Arc::new(Slow), 2);
        thread::scope(|s| {
            for i in 0..8 {
                let gw = &gw;
                s.spawn(move || gw.generate(&GenParams::new("m"), &format!("p{i}")).unwrap());
            }
        });
        assert_eq!(gw.generate_calls(), 8);
        assert!(gw.peak_in_flight() <= 2);
    }

    #[test]
    fn ragged_embeddings_are_rejected() {
        let gw = Gateway::new(Arc::new(Slow));
        let err = gw.embed("m", &["a".into(), "b".into()]).unwrap_err();
        assert!(matches!(err, GatewayError::DimensionMismatch { expected: 1, found: 2, index: 1 }));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let gw = Gateway::new(Arc::new(Slow));
        assert!(matches!(gw.generate(&GenParams::new("m"), "  "), Err(GatewayError::InvalidInput(_))));
        assert!(matches!(gw.embed("m", &[]), Err(GatewayError::InvalidInput(_))));
        assert!(matches!(gw.embed("m", &["".into()]), Err(GatewayError::InvalidInput(_))));
        assert_eq!(gw.generate_calls() + gw.embed_calls(), 0);
    }

    #[test]
    fn params_validation() {
        let mut p = GenParams::new("m");
        p.temperature = Some(-0.1);
        assert!(p.validate().is_err());
        p.temperature = Some(0.0);
        assert!(p.validate().is_ok());
        p.max_tokens = Some(0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn non_finite_embeddings_are_rejected() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
    }

    #[test]
    fn descriptor_requirements() {
        let mut d = BackendDescriptor::http("http://localhost:11434");
        assert!(d.validate().is_ok());
        d.base_url = None;
        assert!(d.validate().is_err());
        let mut m = BackendDescriptor::mock(1);
        assert!(m.validate().is_ok());
        m.seed = None;
        assert!(m.validate().is_err());
    }

    #[test]
    fn recording_gateway_logs_calls() {
        let gw = Gateway::new(Arc::new(Slow)).recording();
        gw.generate(&GenParams::new("m"), "hello").unwrap();
        gw.embed("e", &["x".into()]).unwrap();
        assert_eq!(
            gw.calls(),
            vec![
                CallRecord::Generate { model: "m".into(), prompt: "hello".into() },
                CallRecord::Embed { model: "e".into(), count: 1 }
            ]
        );
    }
}
