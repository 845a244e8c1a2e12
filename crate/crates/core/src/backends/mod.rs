//! Model backend interfaces and the client that fronts them.
//!
//! A [`Backend`] answers raw [`BackendRequest`]s; the mock family and the
//! HTTP adapter both implement it. [`Backends`] routes each request kind to
//! a backend and wraps every call in the response cache, the per-kind rate
//! limiter and the retry policy, in that order. The typed traits
//! ([`Captioner`], [`Expander`], ...) are what pipeline stages depend on.

pub mod cache;
pub mod clock;
pub mod http;
pub mod mock;
pub mod ratelimit;
pub mod retry;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::imaging::{self, RgbImage};
use crate::seed;
use cache::ResponseCache;
use clock::Clock;
use ratelimit::{RateLimit, SlidingWindowLimiter};
use retry::RetryPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Caption,
    Expand,
    Summarize,
    Refine,
    GenerateImage,
    EmbedImage,
    EmbedText,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::Caption,
        Kind::Expand,
        Kind::Summarize,
        Kind::Refine,
        Kind::GenerateImage,
        Kind::EmbedImage,
        Kind::EmbedText,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Caption => "caption",
            Kind::Expand => "expand",
            Kind::Summarize => "summarize",
            Kind::Refine => "refine",
            Kind::GenerateImage => "generate_image",
            Kind::EmbedImage => "embed_image",
            Kind::EmbedText => "embed_text",
        }
    }

    pub fn parse(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    /// Base64 of a PPM-encoded image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_base64: Option<String>,
}

/// Wire envelope sent to a backend: `{kind, payload, seed}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub kind: Kind,
    pub payload: Payload,
    pub seed: u64,
}

impl BackendRequest {
    pub fn new(kind: Kind, payload: Payload, seed: u64) -> Self {
        BackendRequest {
            kind,
            payload,
            seed,
        }
    }

    pub fn prompt(kind: Kind, prompt: &str, seed: u64) -> Self {
        Self::new(
            kind,
            Payload {
                prompt: Some(prompt.to_string()),
                ..Default::default()
            },
            seed,
        )
    }

    /// Content hash of `(kind, payload, seed)`.
    pub fn idempotency_key(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("request serializes");
        seed::sha256_hex(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendResponse {
    Text(String),
    Lines(Vec<String>),
    ImageBase64(String),
    Vector(Vec<f64>),
}

impl BackendResponse {
    pub fn image(img: &RgbImage) -> Self {
        BackendResponse::ImageBase64(
            base64::engine::general_purpose::STANDARD.encode(imaging::encode_ppm(img)),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// Transient failure (unavailable, throttled); worth retrying.
    #[error("{kind} backend temporarily failed: {message}")]
    Retryable { kind: Kind, message: String },
    /// Permanent failure, or retries exhausted.
    #[error("{kind} backend failed: {message}")]
    Hard { kind: Kind, message: String },
}

impl BackendError {
    pub fn retryable(kind: Kind, message: impl Into<String>) -> Self {
        BackendError::Retryable {
            kind,
            message: message.into(),
        }
    }

    pub fn hard(kind: Kind, message: impl Into<String>) -> Self {
        BackendError::Hard {
            kind,
            message: message.into(),
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Retryable { .. })
    }
}

pub type BackendResult<T> = std::result::Result<T, BackendError>;

/// A model service that answers raw requests. Must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    fn call(&self, request: &BackendRequest) -> BackendResult<BackendResponse>;
}

/// An L2-normalized embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    vector: Vec<f64>,
}

impl Embedding {
    /// Normalizes `raw` to unit length. Fails on empty, zero or non-finite input.
    pub fn normalized(raw: Vec<f64>) -> Option<Embedding> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if raw.is_empty() || !norm.is_finite() || norm == 0.0 {
            return None;
        }
        Some(Embedding {
            vector: raw.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    /// Cosine similarity, clamped to [-1, 1].
    pub fn cosine(&self, other: &Embedding) -> f64 {
        assert_eq!(self.dim(), other.dim(), "embedding dimensions differ");
        let dot: f64 = self
            .vector
            .iter()
            .zip(&other.vector)
            .map(|(a, b)| a * b)
            .sum();
        dot.clamp(-1.0, 1.0)
    }
}

pub trait Captioner: Send + Sync {
    fn caption(&self, image_ref: &str, prompt: &str, seed: u64) -> BackendResult<String>;
}

pub trait Expander: Send + Sync {
    fn expand(&self, prompt: &str, seed: u64) -> BackendResult<Vec<String>>;
}

pub trait Summarizer: Send + Sync {
    fn summarize(&self, prompt: &str, seed: u64) -> BackendResult<String>;
}

pub trait Refiner: Send + Sync {
    fn refine(&self, prompt: &str, seed: u64) -> BackendResult<String>;
}

pub trait ImageGenerator: Send + Sync {
    fn generate_image(&self, description: &str, seed: u64) -> BackendResult<RgbImage>;
}

pub trait Embedder: Send + Sync {
    fn embed_image(&self, image: &RgbImage) -> BackendResult<Embedding>;
    fn embed_text(&self, text: &str) -> BackendResult<Embedding>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallTally {
    /// Requests that reached a backend (every attempt counts).
    pub calls: u64,
    pub cache_hits: u64,
    pub retries: u64,
    pub failures: u64,
}

/// Routes requests by kind through cache, rate limiter and retry policy.
pub struct Backends {
    routes: BTreeMap<Kind, Arc<dyn Backend>>,
    limiters: BTreeMap<Kind, SlidingWindowLimiter>,
    cache: Option<Arc<dyn ResponseCache>>,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
    tallies: Mutex<BTreeMap<Kind, CallTally>>,
}

impl Backends {
    /// Routes every kind to `backend`, with no cache and no rate limits.
    pub fn uniform(backend: Arc<dyn Backend>, clock: Arc<dyn Clock>) -> Self {
        Backends {
            routes: Kind::ALL
                .into_iter()
                .map(|k| (k, backend.clone()))
                .collect(),
            limiters: BTreeMap::new(),
            cache: None,
            retry: RetryPolicy::default(),
            clock,
            tallies: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_route(mut self, kind: Kind, backend: Arc<dyn Backend>) -> Self {
        self.routes.insert(kind, backend);
        self
    }

    pub fn with_cache(mut self, cache: Arc<dyn ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, kind: Kind, limit: RateLimit) -> crate::Result<Self> {
        self.limiters
            .insert(kind, SlidingWindowLimiter::new(limit)?);
        Ok(self)
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn tallies(&self) -> BTreeMap<Kind, CallTally> {
        self.tallies.lock().unwrap().clone()
    }

    fn tally(&self, kind: Kind, f: impl FnOnce(&mut CallTally)) {
        f(self.tallies.lock().unwrap().entry(kind).or_default());
    }

    pub fn call(&self, request: &BackendRequest) -> BackendResult<BackendResponse> {
        let kind = request.kind;
        let key = request.idempotency_key();
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key) {
                self.tally(kind, |t| t.cache_hits += 1);
                return Ok(hit);
            }
        }
        let backend = self
            .routes
            .get(&kind)
            .ok_or_else(|| BackendError::hard(kind, "no backend configured"))?;
        let attempts = self.retry.max_attempts();
        for attempt in 0..attempts {
            if let Some(limiter) = self.limiters.get(&kind) {
                limiter.acquire(self.clock.as_ref());
            }
            self.tally(kind, |t| t.calls += 1);
            match backend.call(request) {
                Ok(response) => {
                    if let Some(cache) = &self.cache {
                        if let Err(e) = cache.put(&key, &response) {
                            log::warn!("cache write for {kind} failed: {e}");
                        }
                    }
                    return Ok(response);
                }
                Err(BackendError::Retryable { message, .. }) if attempt + 1 < attempts => {
                    log::debug!(
                        "{kind} attempt {} failed ({message}); backing off",
                        attempt + 1
                    );
                    self.tally(kind, |t| t.retries += 1);
                    self.clock.sleep(self.retry.backoff(attempt, &key));
                }
                Err(BackendError::Retryable { message, .. }) => {
                    self.tally(kind, |t| t.failures += 1);
                    return Err(BackendError::hard(
                        kind,
                        format!("gave up after {attempts} attempts: {message}"),
                    ));
                }
                Err(hard) => {
                    self.tally(kind, |t| t.failures += 1);
                    return Err(hard);
                }
            }
        }
        unreachable!("retry loop always returns")
    }

    fn call_text(&self, request: BackendRequest) -> BackendResult<String> {
        match self.call(&request)? {
            BackendResponse::Text(t) => Ok(t),
            BackendResponse::Lines(lines) => Ok(lines.join("\n")),
            other => Err(unexpected(request.kind, &other)),
        }
    }

    fn call_vector(&self, request: BackendRequest) -> BackendResult<Embedding> {
        let kind = request.kind;
        match self.call(&request)? {
            BackendResponse::Vector(v) => Embedding::normalized(v)
                .ok_or_else(|| BackendError::hard(kind, "degenerate embedding vector")),
            other => Err(unexpected(kind, &other)),
        }
    }
}

fn unexpected(kind: Kind, response: &BackendResponse) -> BackendError {
    let got = match response {
        BackendResponse::Text(_) => "text",
        BackendResponse::Lines(_) => "lines",
        BackendResponse::ImageBase64(_) => "image_base64",
        BackendResponse::Vector(_) => "vector",
    };
    BackendError::hard(kind, format!("unexpected `{got}` response"))
}

pub fn decode_image_base64(kind: Kind, data: &str) -> BackendResult<RgbImage> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data)
        .map_err(|e| BackendError::hard(kind, format!("bad base64 image: {e}")))?;
    imaging::decode_image(&bytes).map_err(|e| BackendError::hard(kind, format!("bad image: {e}")))
}

impl Captioner for Backends {
    fn caption(&self, image_ref: &str, prompt: &str, seed: u64) -> BackendResult<String> {
        self.call_text(BackendRequest::new(
            Kind::Caption,
            Payload {
                prompt: Some(prompt.to_string()),
                image_ref: Some(image_ref.to_string()),
                image_base64: None,
            },
            seed,
        ))
    }
}

impl Expander for Backends {
    fn expand(&self, prompt: &str, seed: u64) -> BackendResult<Vec<String>> {
        let request = BackendRequest::prompt(Kind::Expand, prompt, seed);
        match self.call(&request)? {
            BackendResponse::Lines(lines) => Ok(lines),
            BackendResponse::Text(text) => Ok(text.lines().map(str::to_string).collect()),
            other => Err(unexpected(Kind::Expand, &other)),
        }
    }
}

impl Summarizer for Backends {
    fn summarize(&self, prompt: &str, seed: u64) -> BackendResult<String> {
        self.call_text(BackendRequest::prompt(Kind::Summarize, prompt, seed))
    }
}

impl Refiner for Backends {
    fn refine(&self, prompt: &str, seed: u64) -> BackendResult<String> {
        self.call_text(BackendRequest::prompt(Kind::Refine, prompt, seed))
    }
}

impl ImageGenerator for Backends {
    fn generate_image(&self, description: &str, seed: u64) -> BackendResult<RgbImage> {
        let request = BackendRequest::prompt(Kind::GenerateImage, description, seed);
        match self.call(&request)? {
            BackendResponse::ImageBase64(data) => decode_image_base64(Kind::GenerateImage, &data),
            other => Err(unexpected(Kind::GenerateImage, &other)),
        }
    }
}

impl Embedder for Backends {
    fn embed_image(&self, image: &RgbImage) -> BackendResult<Embedding> {
        let BackendResponse::ImageBase64(data) = BackendResponse::image(image) else {
            unreachable!()
        };
        self.call_vector(BackendRequest::new(
            Kind::EmbedImage,
            Payload {
                image_base64: Some(data),
                ..Default::default()
            },
            0,
        ))
    }

    fn embed_text(&self, text: &str) -> BackendResult<Embedding> {
        self.call_vector(BackendRequest::prompt(Kind::EmbedText, text, 0))
    }
}

#[cfg(test)]
mod tests {
    use super::clock::SimulatedClock;
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    /// Fails the first `failures` calls with a retryable error.
    struct Flaky {
        failures: u32,
        seen: AtomicU32,
    }

    impl Backend for Flaky {
        fn call(&self, request: &BackendRequest) -> BackendResult<BackendResponse> {
            let n = self.seen.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(BackendError::retryable(
                    request.kind,
                    "429 too many requests",
                ))
            } else {
                Ok(BackendResponse::Text(format!("ok after {n}")))
            }
        }
    }

    fn flaky(failures: u32) -> Arc<Flaky> {
        Arc::new(Flaky {
            failures,
            seen: AtomicU32::new(0),
        })
    }

    #[test]
    fn idempotency_key_is_content_hash() {
        let a = BackendRequest::prompt(Kind::Expand, "p", 1);
        assert_eq!(
            a.idempotency_key(),
            BackendRequest::prompt(Kind::Expand, "p", 1).idempotency_key()
        );
        assert_ne!(
            a.idempotency_key(),
            BackendRequest::prompt(Kind::Expand, "p", 2).idempotency_key()
        );
        assert_ne!(
            a.idempotency_key(),
            BackendRequest::prompt(Kind::Refine, "p", 1).idempotency_key()
        );
        assert_eq!(a.idempotency_key().len(), 64);
    }

    #[test]
    fn retries_then_succeeds_once() {
        let clock = Arc::new(SimulatedClock::new());
        let backend = flaky(2);
        let hub = Backends::uniform(backend.clone(), clock.clone())
            .with_cache(Arc::new(cache::MemoryCache::new()));
        let out = hub.summarize("p", 0).unwrap();
        assert_eq!(out, "ok after 2");
        let t = hub.tallies()[&Kind::Summarize];
        assert_eq!((t.calls, t.retries, t.failures), (3, 2, 0));
        assert!(
            clock.now() > std::time::Duration::ZERO,
            "backoff slept on the clock"
        );
        // recorded once: the replay is a cache hit
        hub.summarize("p", 0).unwrap();
        assert_eq!(hub.tallies()[&Kind::Summarize].cache_hits, 1);
        assert_eq!(backend.seen.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhaustion_is_one_hard_error_without_side_effects() {
        let clock = Arc::new(SimulatedClock::new());
        let cache = Arc::new(cache::MemoryCache::new());
        let hub = Backends::uniform(flaky(100), clock)
            .with_cache(cache.clone())
            .with_retry(RetryPolicy {
                max_retries: 4,
                ..Default::default()
            });
        let err = hub.refine("p", 0).unwrap_err();
        assert!(!err.is_retryable());
        let t = hub.tallies()[&Kind::Refine];
        assert_eq!((t.calls, t.failures), (4, 1));
        let key = BackendRequest::prompt(Kind::Refine, "p", 0).idempotency_key();
        assert!(cache.get(&key).is_none());
    }

    #[test]
    fn cache_disabled_calls_twice() {
        let backend = flaky(0);
        let hub = Backends::uniform(backend.clone(), Arc::new(SimulatedClock::new()));
        hub.expand("same prompt", 3).unwrap();
        hub.expand("same prompt", 3).unwrap();
        assert_eq!(backend.seen.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn embedding_normalization() {
        let e = Embedding::normalized(vec![3.0, 4.0]).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-12);
        assert!((e.cosine(&e) - 1.0).abs() < 1e-12);
        assert!(Embedding::normalized(vec![0.0, 0.0]).is_none());
        assert!(Embedding::normalized(vec![]).is_none());
    }

    #[test]
    fn wire_envelope_shape() {
        let r = BackendRequest::prompt(Kind::GenerateImage, "d", 9);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"kind": "generate_image", "payload": {"prompt": "d"}, "seed": 9})
        );
        let resp: BackendResponse = serde_json::from_str(r#"{"lines": ["a", "b"]}"#).unwrap();
        assert_eq!(resp, BackendResponse::Lines(vec!["a".into(), "b".into()]));
    }
}
