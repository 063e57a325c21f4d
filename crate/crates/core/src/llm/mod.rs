//! Model backend abstraction with caching, retries and rate limiting.
//!
//! Every model call goes through [`LlmClient::call`]: the request hash is
//! looked up in the response cache first; on a miss the backend is called
//! under the rate limiter and the in-flight bound, retried with exponential
//! backoff, and the raw response is persisted before it is returned.

pub mod cache;
pub mod http;
pub mod limiter;
pub mod mock;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use cache::ResponseCache;
pub use http::{HttpBackend, HttpConfig};
pub use limiter::{InFlightLimiter, RateLimiter};
pub use mock::{BiasRule, BiasTable, MockBackend};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSettings {
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl SamplingSettings {
    pub const EXTRACTION: SamplingSettings = SamplingSettings {
        temperature: 0.3,
        max_output_tokens: 1024,
    };
    pub const RECONSTRUCTION: SamplingSettings = SamplingSettings {
        temperature: 0.0,
        max_output_tokens: 1024,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub template_id: String,
    pub prompt: String,
    pub image_refs: Vec<String>,
    pub settings: SamplingSettings,
    /// User the request is about. Lets a test backend look up ground truth;
    /// it is not part of the request hash and never sent over the wire.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

fn put_field(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

impl BackendRequest {
    pub fn new(template_id: &str, prompt: String, settings: SamplingSettings) -> Self {
        BackendRequest {
            template_id: template_id.to_string(),
            prompt,
            image_refs: Vec::new(),
            settings,
            subject: None,
        }
    }

    pub fn with_images(mut self, refs: Vec<String>) -> Self {
        self.image_refs = refs;
        self
    }

    pub fn with_subject(mut self, subject: &str) -> Self {
        self.subject = Some(subject.to_string());
        self
    }

    /// SHA-256 over the length-prefixed template id, prompt, image contents
    /// and sampling settings. Image refs that are not readable local files
    /// (URLs, missing paths) contribute the ref string instead.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        put_field(&mut h, b"ad-audit-request-v1");
        put_field(&mut h, self.template_id.as_bytes());
        put_field(&mut h, self.prompt.as_bytes());
        h.update((self.image_refs.len() as u64).to_le_bytes());
        for r in &self.image_refs {
            match fs::read(Path::new(r)) {
                Ok(bytes) => {
                    put_field(&mut h, b"bytes");
                    put_field(&mut h, &bytes);
                }
                Err(_) => {
                    put_field(&mut h, b"ref");
                    put_field(&mut h, r.as_bytes());
                }
            }
        }
        h.update(self.settings.temperature.to_bits().to_le_bytes());
        h.update(self.settings.max_output_tokens.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub raw: String,
    pub hash: String,
    pub latency_ms: u64,
    pub backend: String,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendError {
    pub retryable: bool,
    pub message: String,
}

impl BackendError {
    pub fn retryable(message: impl Into<String>) -> Self {
        BackendError {
            retryable: true,
            message: message.into(),
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        BackendError {
            retryable: false,
            message: message.into(),
        }
    }
}

pub trait Backend: Send + Sync {
    /// Stable identifier; responses are cached under a namespace per tag.
    fn tag(&self) -> String;

    fn complete(&self, request: &BackendRequest) -> std::result::Result<String, BackendError>;

    /// True when responses depend on `request.subject`, so cache entries
    /// must be keyed per subject as well.
    fn subject_sensitive(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Default)]
pub struct CallStats {
    pub backend_calls: AtomicU64,
    pub cache_hits: AtomicU64,
}

pub struct LlmClient {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    rate: RateLimiter,
    in_flight: InFlightLimiter,
    pub stats: CallStats,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        LlmClient {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            rate: RateLimiter::unlimited(),
            in_flight: InFlightLimiter::new(8),
            stats: CallStats::default(),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_minute: f64) -> Self {
        self.rate = RateLimiter::per_minute(requests_per_minute);
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.in_flight = InFlightLimiter::new(n);
        self
    }

    pub fn backend_tag(&self) -> String {
        self.backend.tag()
    }

    pub fn call(&self, request: &BackendRequest) -> Result<BackendResponse> {
        let hash = request.hash();
        let tag = self.backend.tag();
        let key = match &request.subject {
            Some(s) if self.backend.subject_sensitive() => {
                let mut h = Sha256::new();
                put_field(&mut h, hash.as_bytes());
                put_field(&mut h, s.as_bytes());
                hex::encode(h.finalize())
            }
            _ => hash.clone(),
        };
        if let Some(cache) = &self.cache {
            if let Some(raw) = cache.get(&tag, &key)? {
                self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(BackendResponse {
                    raw,
                    hash,
                    latency_ms: 0,
                    backend: tag,
                    cached: true,
                });
            }
        }
        let start = Instant::now();
        let raw = self.call_with_retries(request)?;
        let latency_ms = start.elapsed().as_millis() as u64;
        if let Some(cache) = &self.cache {
            cache.put(&tag, &key, &request.template_id, &raw)?;
        }
        Ok(BackendResponse {
            raw,
            hash,
            latency_ms,
            backend: tag,
            cached: false,
        })
    }

    fn call_with_retries(&self, request: &BackendRequest) -> Result<String> {
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            self.rate.acquire();
            let _slot = self.in_flight.acquire();
            self.stats.backend_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.complete(request) {
                Ok(raw) if !raw.trim().is_empty() => return Ok(raw),
                Ok(_) => last = "empty response".into(),
                Err(e) if e.retryable => last = e.message,
                Err(e) => {
                    return Err(Error::Transport {
                        attempts: attempt + 1,
                        message: e.message,
                    })
                }
            }
            log::debug!("backend attempt {} failed: {last}", attempt + 1);
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }
}

/// Extracts the first balanced JSON object from a model response, tolerating
/// code fences and surrounding prose.
pub fn extract_json_object(raw: &str) -> Option<&str> {
    let start = raw.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in raw[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&raw[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Flaky {
        failures_left: Mutex<u32>,
        fatal: bool,
    }

    impl Backend for Flaky {
        fn tag(&self) -> String {
            "flaky".into()
        }

        fn complete(&self, _: &BackendRequest) -> std::result::Result<String, BackendError> {
            let mut left = self.failures_left.lock().unwrap();
            if *left > 0 {
                *left -= 1;
                return Err(if self.fatal {
                    BackendError::fatal("bad request")
                } else {
                    BackendError::retryable("503")
                });
            }
            Ok("{\"ok\": true}".into())
        }
    }

    fn no_wait() -> RetryPolicy {
        RetryPolicy {
            base_delay_ms: 0,
            ..Default::default()
        }
    }

    fn req() -> BackendRequest {
        BackendRequest::new("t", "hello".into(), SamplingSettings::RECONSTRUCTION)
    }

    #[test]
    fn hash_ignores_subject_but_not_settings() {
        let a = req();
        let b = req().with_subject("u1");
        assert_eq!(a.hash(), b.hash());
        let mut c = req();
        c.settings.temperature = 0.3;
        assert_ne!(a.hash(), c.hash());
        let d = req().with_images(vec!["https://x/y.png".into()]);
        assert_ne!(a.hash(), d.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn hash_uses_image_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        fs::write(&p, b"one").unwrap();
        let r = req().with_images(vec![p.to_string_lossy().into_owned()]);
        let h1 = r.hash();
        fs::write(&p, b"two").unwrap();
        assert_ne!(h1, r.hash());
    }

    #[test]
    fn retries_then_succeeds() {
        let b = Arc::new(Flaky {
            failures_left: Mutex::new(4),
            fatal: false,
        });
        let client = LlmClient::new(b).with_retry(no_wait());
        assert!(client.call(&req()).is_ok());
        assert_eq!(client.stats.backend_calls.load(Ordering::Relaxed), 5);
    }

    #[test]
    fn five_failures_is_transport_error() {
        let b = Arc::new(Flaky {
            failures_left: Mutex::new(5),
            fatal: false,
        });
        let client = LlmClient::new(b).with_retry(no_wait());
        match client.call(&req()) {
            Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let b = Arc::new(Flaky {
            failures_left: Mutex::new(1),
            fatal: true,
        });
        let client = LlmClient::new(b).with_retry(no_wait());
        assert!(matches!(
            client.call(&req()),
            Err(Error::Transport { attempts: 1, .. })
        ));
    }

    #[test]
    fn second_identical_request_is_cached() {
        let dir = tempfile::tempdir().unwrap();
        let b = Arc::new(Flaky {
            failures_left: Mutex::new(0),
            fatal: false,
        });
        let client = LlmClient::new(b).with_cache(ResponseCache::new(dir.path()));
        let first = client.call(&req()).unwrap();
        let second = client.call(&req()).unwrap();
        assert!(!first.cached && second.cached);
        assert_eq!(first.raw, second.raw);
        assert_eq!(client.stats.backend_calls.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 100,
            max_delay_ms: 350,
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(2), Duration::from_millis(350));
    }

    #[test]
    fn json_extraction() {
        assert_eq!(extract_json_object("```json\n{\"a\": \"}\"}\n```"), Some("{\"a\": \"}\"}"));
        assert_eq!(extract_json_object("x {\"a\": {\"b\": 1}} y"), Some("{\"a\": {\"b\": 1}}"));
        assert_eq!(extract_json_object("none"), None);
        assert_eq!(extract_json_object("{ unterminated"), None);
    }
}
