//! Clients for the external model services: text-to-image generation,
//! open-vocabulary detection and the model under test.
//!
//! All three speak JSON over HTTP POST (see [`wire`]). A [`ServiceClient`]
//! adds what the pipeline needs on top of a raw [`Transport`]:
//!
//! * a per-endpoint cap on concurrent requests (`max_in_flight`),
//! * retries with exponential backoff for timeouts, connection failures
//!   and 5xx responses,
//! * a request-keyed response cache, so replaying a run makes no network
//!   calls,
//! * a log of every request/response pair by content hash.
//!
//! Base URLs with the `mock://` scheme select the deterministic in-process
//! services in [`mock`].

pub mod http;
pub mod mock;
pub mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::content_ref;
use crate::imaging;
use crate::prompts::ImagePromptSpec;
pub use wire::Detection;
use wire::*;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub error: String,
    pub backoff_ms: u64,
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("transport error calling {url}{path} after {} attempt(s): {}", attempts.len(), attempts.last().map(|a| a.error.as_str()).unwrap_or("unknown"))]
    Transport {
        url: String,
        path: String,
        attempts: Vec<AttemptRecord>,
    },
    #[error("protocol error from {url}{path}: {message}")]
    Protocol {
        url: String,
        path: String,
        message: String,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid endpoint: {0}")]
    Endpoint(String),
}

impl ServiceError {
    pub fn is_transport(&self) -> bool {
        matches!(self, ServiceError::Transport { .. })
    }
}

/// Failure of a single transport attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportFailure {
    Timeout,
    Connect(String),
    Status { code: u16, body: String },
    Io(String),
}

impl TransportFailure {
    pub fn retryable(&self) -> bool {
        match self {
            TransportFailure::Status { code, .. } => *code >= 500,
            _ => true,
        }
    }
}

impl std::fmt::Display for TransportFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportFailure::Timeout => f.write_str("timed out"),
            TransportFailure::Connect(e) => write!(f, "connection failed: {e}"),
            TransportFailure::Status { code, body } => write!(f, "HTTP {code}: {body}"),
            TransportFailure::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

/// Moves one JSON request body to a service and returns the response body.
pub trait Transport: Send + Sync {
    fn post(&self, path: &str, body: &[u8]) -> Result<Vec<u8>, TransportFailure>;
}

/// Request-keyed store of validated response bodies.
pub trait ResponseCache: Send + Sync {
    fn get(&self, key: &str) -> Option<Vec<u8>>;
    fn put(&self, key: &str, body: &[u8]) -> std::io::Result<()>;
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    250
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceEndpoint {
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// First retry delay; doubles on each subsequent attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bearer_token: Option<String>,
}

impl ServiceEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
            retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            bearer_token: None,
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.max_in_flight == 0 {
            return Err(ServiceError::Endpoint(format!(
                "{}: max_in_flight must be at least 1",
                self.base_url
            )));
        }
        let url = url::Url::parse(&self.base_url)
            .map_err(|e| ServiceError::Endpoint(format!("{}: {e}", self.base_url)))?;
        match url.scheme() {
            "http" | "mock" => Ok(()),
            other => Err(ServiceError::Endpoint(format!(
                "{}: unsupported scheme '{other}' (expected http or mock)",
                self.base_url
            ))),
        }
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock://")
    }

    /// Copy safe to write into manifests.
    pub fn redacted(&self) -> Self {
        Self {
            bearer_token: self.bearer_token.as_ref().map(|_| "<redacted>".into()),
            ..self.clone()
        }
    }
}

/// Cache key: hash over endpoint identity, path and exact body bytes.
pub fn request_key(base_url: &str, path: &str, body: &[u8]) -> String {
    let mut buf = Vec::with_capacity(base_url.len() + path.len() + body.len() + 2);
    buf.extend_from_slice(base_url.trim_end_matches('/').as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(path.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(body);
    content_ref(&buf)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub base_url: String,
    pub path: String,
    pub request_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_hash: Option<String>,
    pub cached: bool,
    pub attempts: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub network_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

struct InFlightLimiter {
    max: usize,
    current: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    fn new(max: usize) -> Self {
        Self {
            max,
            current: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().expect("limiter lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter lock");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().expect("limiter lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// A decoded text-to-image result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedImage {
    pub png: Vec<u8>,
    pub backend_id: String,
}

/// Thread-safe client for one endpoint.
pub struct ServiceClient {
    endpoint: ServiceEndpoint,
    transport: Arc<dyn Transport>,
    limiter: InFlightLimiter,
    cache: Option<Arc<dyn ResponseCache>>,
    network_calls: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
    log: Mutex<Vec<RequestLogEntry>>,
}

impl std::fmt::Debug for ServiceClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceClient")
            .field("endpoint", &self.endpoint.redacted())
            .finish_non_exhaustive()
    }
}

impl ServiceClient {
    /// Picks the HTTP or in-process mock transport from the URL scheme.
    pub fn connect(endpoint: ServiceEndpoint) -> Result<Self, ServiceError> {
        endpoint.validate()?;
        let transport: Arc<dyn Transport> = if endpoint.is_mock() {
            Arc::new(mock::MockService::from_url(&endpoint.base_url)?)
        } else {
            Arc::new(http::HttpTransport::new(&endpoint)?)
        };
        Ok(Self::with_transport(endpoint, transport))
    }

    pub fn with_transport(endpoint: ServiceEndpoint, transport: Arc<dyn Transport>) -> Self {
        let max = endpoint.max_in_flight.max(1);
        Self {
            endpoint,
            transport,
            limiter: InFlightLimiter::new(max),
            cache: None,
            network_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            cache_misses: AtomicU64::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn with_cache(mut self, cache: Arc<dyn ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn endpoint(&self) -> &ServiceEndpoint {
        &self.endpoint
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            network_calls: self.network_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            cache_misses: self.cache_misses.load(Ordering::SeqCst),
        }
    }

    /// Drains the request log, sorted by request hash so the output does
    /// not depend on completion order.
    pub fn take_log(&self) -> Vec<RequestLogEntry> {
        let mut log = std::mem::take(&mut *self.log.lock().expect("log lock"));
        log.sort_by(|a, b| (&a.path, &a.request_hash).cmp(&(&b.path, &b.request_hash)));
        log
    }

    fn record(&self, entry: RequestLogEntry) {
        tracing::debug!(
            path = %entry.path,
            request = %entry.request_hash,
            response = ?entry.response_hash,
            cached = entry.cached,
            attempts = entry.attempts,
            "service call"
        );
        self.log.lock().expect("log lock").push(entry);
    }

    /// Sends `body` to `path`, validating the response with `parse` before
    /// it is cached or returned.
    fn call<T>(
        &self,
        path: &str,
        body: &[u8],
        parse: impl Fn(&[u8]) -> Result<T, String>,
    ) -> Result<T, ServiceError> {
        let key = request_key(&self.endpoint.base_url, path, body);
        let protocol = |message: String| ServiceError::Protocol {
            url: self.endpoint.base_url.clone(),
            path: path.to_owned(),
            message,
        };
        let mut entry = RequestLogEntry {
            base_url: self.endpoint.base_url.clone(),
            path: path.to_owned(),
            request_hash: key.clone(),
            response_hash: None,
            cached: false,
            attempts: 0,
            error: None,
        };

        if let Some(cache) = &self.cache {
            if let Some(bytes) = cache.get(&key) {
                if let Ok(value) = parse(&bytes) {
                    self.cache_hits.fetch_add(1, Ordering::SeqCst);
                    entry.cached = true;
                    entry.response_hash = Some(content_ref(&bytes));
                    self.record(entry);
                    return Ok(value);
                }
            }
            self.cache_misses.fetch_add(1, Ordering::SeqCst);
        }

        let mut attempts = Vec::new();
        for attempt in 0..=self.endpoint.retries {
            entry.attempts = attempt + 1;
            let result = {
                let _permit = self.limiter.acquire();
                self.network_calls.fetch_add(1, Ordering::SeqCst);
                self.transport.post(path, body)
            };
            match result {
                Ok(bytes) => {
                    entry.response_hash = Some(content_ref(&bytes));
                    return match parse(&bytes) {
                        Ok(value) => {
                            if let Some(cache) = &self.cache {
                                if let Err(e) = cache.put(&key, &bytes) {
                                    tracing::warn!("failed to write cache entry {key}: {e}");
                                }
                            }
                            self.record(entry);
                            Ok(value)
                        }
                        Err(message) => {
                            entry.error = Some(message.clone());
                            self.record(entry);
                            Err(protocol(message))
                        }
                    };
                }
                Err(failure) if !failure.retryable() => {
                    entry.error = Some(failure.to_string());
                    self.record(entry);
                    return Err(protocol(failure.to_string()));
                }
                Err(failure) => {
                    let backoff_ms = if attempt < self.endpoint.retries {
                        self.endpoint.backoff_ms.saturating_mul(1 << attempt.min(16))
                    } else {
                        0
                    };
                    tracing::debug!("{}{path} attempt {} failed: {failure}", self.endpoint.base_url, attempt + 1);
                    attempts.push(AttemptRecord {
                        attempt: attempt + 1,
                        error: failure.to_string(),
                        backoff_ms,
                    });
                    if backoff_ms > 0 {
                        std::thread::sleep(Duration::from_millis(backoff_ms));
                    }
                }
            }
        }
        entry.error = attempts.last().map(|a| a.error.clone());
        self.record(entry);
        Err(ServiceError::Transport {
            url: self.endpoint.base_url.clone(),
            path: path.to_owned(),
            attempts,
        })
    }

    pub fn txt2img(&self, spec: &ImagePromptSpec, width: u32, height: u32) -> Result<GeneratedImage, ServiceError> {
        let req = Txt2ImgRequest {
            prompt: spec.prompt.clone(),
            negative_prompt: spec.negative_prompt.clone(),
            style: spec.style,
            seed: spec.seed,
            width,
            height,
        };
        let body = serde_json::to_vec(&req).expect("request serializes");
        self.call(TXT2IMG_PATH, &body, |bytes| {
            let resp: Txt2ImgResponse = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
            let png = BASE64
                .decode(resp.image_png_base64.as_bytes())
                .map_err(|e| format!("image_png_base64 is not base64: {e}"))?;
            imaging::validate_png(&png).map_err(|e| format!("payload is not a PNG: {e}"))?;
            Ok(GeneratedImage {
                png,
                backend_id: resp.backend_id,
            })
        })
    }

    /// Detections at or above `threshold`, sorted by confidence desc
    /// (ties by label).
    pub fn detect(&self, png: &[u8], vocabulary: &[String], threshold: f64) -> Result<Vec<Detection>, ServiceError> {
        if vocabulary.is_empty() {
            return Err(ServiceError::InvalidRequest("detection vocabulary is empty".into()));
        }
        imaging::validate_png(png).map_err(|e| ServiceError::InvalidRequest(format!("image is not a PNG: {e}")))?;
        let req = DetectRequest {
            image_png_base64: BASE64.encode(png),
            vocabulary: vocabulary.to_vec(),
            confidence_threshold: threshold,
        };
        let body = serde_json::to_vec(&req).expect("request serializes");
        self.call(DETECT_PATH, &body, |bytes| {
            let resp: DetectResponse = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
            for d in &resp.detections {
                d.validate()?;
                if !vocabulary.contains(&d.label) {
                    return Err(format!("detection label '{}' not in requested vocabulary", d.label));
                }
            }
            let mut kept: Vec<Detection> = resp
                .detections
                .into_iter()
                .filter(|d| d.confidence >= threshold)
                .collect();
            kept.sort_by(|a, b| {
                b.confidence
                    .total_cmp(&a.confidence)
                    .then_with(|| a.label.cmp(&b.label))
            });
            Ok(kept)
        })
    }

    /// Raw model text, unmodified.
    pub fn query(&self, png: &[u8], prompt: &str) -> Result<String, ServiceError> {
        if prompt.is_empty() {
            return Err(ServiceError::InvalidRequest("prompt is empty".into()));
        }
        let req = QueryRequest {
            image_png_base64: BASE64.encode(png),
            prompt: prompt.to_owned(),
        };
        let body = serde_json::to_vec(&req).expect("request serializes");
        self.call(QUERY_PATH, &body, |bytes| {
            let resp: QueryResponse = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
            if resp.text.is_empty() {
                return Err("empty response text".into());
            }
            Ok(resp.text)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Concept;
    use crate::prompts::{image_prompt, Style, Templates};
    use crate::sampler::{ConceptPair, Criterion};
    use std::collections::HashMap;

    #[derive(Default)]
    struct MemCache(Mutex<HashMap<String, Vec<u8>>>);

    impl ResponseCache for MemCache {
        fn get(&self, key: &str) -> Option<Vec<u8>> {
            self.0.lock().unwrap().get(key).cloned()
        }
        fn put(&self, key: &str, body: &[u8]) -> std::io::Result<()> {
            self.0.lock().unwrap().insert(key.to_owned(), body.to_vec());
            Ok(())
        }
    }

    struct Scripted {
        failures: Mutex<Vec<TransportFailure>>,
        ok: Vec<u8>,
    }

    impl Transport for Scripted {
        fn post(&self, _path: &str, _body: &[u8]) -> Result<Vec<u8>, TransportFailure> {
            match self.failures.lock().unwrap().pop() {
                Some(f) => Err(f),
                None => Ok(self.ok.clone()),
            }
        }
    }

    fn spec() -> ImagePromptSpec {
        let pair = ConceptPair::new(Concept::entity("dog"), Concept::entity("frisbee"), 3, Criterion::Common);
        image_prompt(&pair, Style::Photo, 42, &Templates::default())
    }

    fn fast(url: &str, retries: u32) -> ServiceEndpoint {
        ServiceEndpoint {
            retries,
            backoff_ms: 1,
            ..ServiceEndpoint::new(url)
        }
    }

    #[test]
    fn retries_5xx_then_succeeds() {
        let t = Arc::new(Scripted {
            failures: Mutex::new(vec![
                TransportFailure::Status { code: 503, body: String::new() },
                TransportFailure::Timeout,
            ]),
            ok: br#"{"text":"Yes"}"#.to_vec(),
        });
        let client = ServiceClient::with_transport(fast("http://x", 2), t);
        assert_eq!(client.query(b"png", "Is there a dog in the image?").unwrap(), "Yes");
        assert_eq!(client.stats().network_calls, 3);
    }

    #[test]
    fn exhausted_retries_carry_attempt_log() {
        let t = Arc::new(Scripted {
            failures: Mutex::new(vec![TransportFailure::Timeout; 5]),
            ok: Vec::new(),
        });
        let client = ServiceClient::with_transport(fast("http://x", 2), t);
        match client.query(b"png", "hi").unwrap_err() {
            ServiceError::Transport { attempts, .. } => {
                assert_eq!(attempts.len(), 3);
                assert_eq!(attempts[0].backoff_ms, 1);
                assert_eq!(attempts[1].backoff_ms, 2);
                assert_eq!(attempts[2].backoff_ms, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn client_errors_are_not_retried() {
        let t = Arc::new(Scripted {
            failures: Mutex::new(vec![TransportFailure::Status { code: 400, body: "bad".into() }]),
            ok: br#"{"text":"Yes"}"#.to_vec(),
        });
        let client = ServiceClient::with_transport(fast("http://x", 3), t);
        assert!(matches!(client.query(b"png", "hi"), Err(ServiceError::Protocol { .. })));
        assert_eq!(client.stats().network_calls, 1);
    }

    #[test]
    fn empty_text_is_protocol_error() {
        let t = Arc::new(Scripted { failures: Mutex::new(vec![]), ok: br#"{"text":""}"#.to_vec() });
        let client = ServiceClient::with_transport(fast("http://x", 0), t);
        assert!(matches!(client.query(b"png", "hi"), Err(ServiceError::Protocol { .. })));
    }

    #[test]
    fn non_png_payload_is_protocol_error() {
        let body = serde_json::to_vec(&Txt2ImgResponse {
            image_png_base64: BASE64.encode(b"GIF89a....."),
            backend_id: "x".into(),
        })
        .unwrap();
        let t = Arc::new(Scripted { failures: Mutex::new(vec![]), ok: body });
        let client = ServiceClient::with_transport(fast("http://x", 3), t);
        assert!(matches!(client.txt2img(&spec(), 64, 64), Err(ServiceError::Protocol { .. })));
    }

    #[test]
    fn cache_serves_replay_without_network() {
        let cache = Arc::new(MemCache::default());
        let first = ServiceClient::connect(fast("mock://t2i", 0)).unwrap().with_cache(cache.clone());
        let a = first.txt2img(&spec(), 512, 512).unwrap();
        assert_eq!(first.stats(), ClientStats { network_calls: 1, cache_hits: 0, cache_misses: 1 });
        let second = ServiceClient::connect(fast("mock://t2i", 0)).unwrap().with_cache(cache);
        let b = second.txt2img(&spec(), 512, 512).unwrap();
        assert_eq!(a, b);
        assert_eq!(second.stats(), ClientStats { network_calls: 0, cache_hits: 1, cache_misses: 0 });
        let log = second.take_log();
        assert_eq!(log.len(), 1);
        assert!(log[0].cached);
    }

    #[test]
    fn cache_key_separates_endpoints() {
        assert_ne!(request_key("mock://truthful", "/v1/query", b"{}"), request_key("mock://refuser", "/v1/query", b"{}"));
        assert_eq!(request_key("http://h/", "/p", b"x"), request_key("http://h", "/p", b"x"));
    }

    #[test]
    fn endpoint_validation() {
        assert!(ServiceEndpoint::new("http://127.0.0.1:8000").validate().is_ok());
        assert!(ServiceEndpoint::new("https://example.com").validate().is_err());
        assert!(ServiceEndpoint::new("not a url").validate().is_err());
        let zero = ServiceEndpoint { max_in_flight: 0, ..ServiceEndpoint::new("mock://t2i") };
        assert!(zero.validate().is_err());
        let tok = ServiceEndpoint { bearer_token: Some("s3cret".into()), ..ServiceEndpoint::new("http://h") };
        assert_eq!(tok.redacted().bearer_token.as_deref(), Some("<redacted>"));
    }

    #[test]
    fn detect_rejects_empty_vocabulary() {
        let client = ServiceClient::connect(fast("mock://detect", 0)).unwrap();
        assert!(matches!(client.detect(b"x", &[], 0.5), Err(ServiceError::InvalidRequest(_))));
    }
}
