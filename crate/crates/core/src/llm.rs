//! Chat-completion client for OpenAI-compatible endpoints.
//!
//! Every response is stored in a content-addressed cache keyed by the
//! SHA-256 of the canonical request JSON, so a run can be replayed offline
//! in cache-only mode with bit-identical replies.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: "assistant".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    /// Serialization with object keys in sorted order.
    pub fn canonical_json(&self) -> String {
        // serde_json's default map is ordered by key.
        let value = serde_json::to_value(self).expect("request serializes");
        value.to_string()
    }

    pub fn to_wire(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("request serializes")
    }
}

/// Hex SHA-256 over [`ChatRequest::canonical_json`].
pub fn request_digest(request: &ChatRequest) -> String {
    hex::encode(Sha256::digest(request.canonical_json().as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub digest: String,
    pub response: String,
    pub timestamp: u64,
    pub endpoint: String,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("no cached response for request {digest} in cache-only mode")]
    CacheMiss { digest: String },
    #[error("endpoint failed after {attempts} attempts: {last}")]
    Endpoint { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("client configuration: {0}")]
    Config(String),
    #[error("cache io at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// One file per digest, written atomically via temp-file rename.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| LlmError::Io {
            path: dir.clone(),
            source,
        })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Option<CacheRecord> {
        let text = fs::read_to_string(self.path(digest)).ok()?;
        let rec: CacheRecord = serde_json::from_str(&text).ok()?;
        (rec.digest == digest).then_some(rec)
    }

    pub fn put(&self, record: &CacheRecord) -> Result<(), LlmError> {
        let target = self.path(&record.digest);
        let io = |source| LlmError::Io {
            path: target.clone(),
            source,
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io)?;
        let body = serde_json::to_vec_pretty(record).expect("record serializes");
        tmp.write_all(&body).map_err(io)?;
        tmp.persist(&target).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|it| {
                it.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub enum TransportError {
    /// Worth retrying: connection failures, 429, 5xx.
    Transient(String),
    Fatal(String),
}

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Transient(m) => write!(f, "transient: {m}"),
            Self::Fatal(m) => write!(f, "fatal: {m}"),
        }
    }
}

/// Sends a chat-completions body and returns the raw response body.
pub trait Transport: Send + Sync {
    fn send(&self, url: &str, api_key: Option<&str>, body: &serde_json::Value)
        -> Result<String, TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl Transport for HttpTransport {
    fn send(
        &self,
        url: &str,
        api_key: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<String, TransportError> {
        let mut req = self.agent.post(url).set("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body.clone()) {
            Ok(resp) => resp
                .into_string()
                .map_err(|e| TransportError::Transient(e.to_string())),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {text}");
                if code == 429 || code >= 500 {
                    Err(TransportError::Transient(msg))
                } else {
                    Err(TransportError::Fatal(msg))
                }
            }
            Err(e) => Err(TransportError::Transient(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    #[default]
    Online,
    CacheOnly,
}

impl FromStr for CacheMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "online" => Ok(Self::Online),
            "cache_only" | "offline" => Ok(Self::CacheOnly),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: String,
    pub cache_dir: Option<PathBuf>,
    pub mode: CacheMode,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            api_key: None,
            model: "Qwen2.5-32B-Instruct".into(),
            cache_dir: None,
            mode: CacheMode::Online,
            max_in_flight: 4,
            max_attempts: 3,
            backoff_base_ms: 500,
        }
    }
}

impl LlmConfig {
    /// Completion URL, appending `/chat/completions` to a base URL.
    pub fn completions_url(&self) -> Option<String> {
        self.endpoint.as_ref().map(|e| {
            let e = e.trim_end_matches('/');
            if e.ends_with("/chat/completions") {
                e.to_string()
            } else {
                format!("{e}/chat/completions")
            }
        })
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    available: Mutex<usize>,
    cv: Condvar,
}

struct GateGuard<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            available: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.available.lock().expect("gate lock");
        while *n == 0 {
            n = self.cv.wait(n).expect("gate lock");
        }
        *n -= 1;
        GateGuard(self)
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub cache_hits: u64,
    pub network_calls: u64,
    pub retries: u64,
}

pub struct LlmClient {
    config: LlmConfig,
    transport: Box<dyn Transport>,
    cache: Option<ResponseCache>,
    gate: Gate,
    cache_hits: AtomicU64,
    network_calls: AtomicU64,
    retries: AtomicU64,
}

impl fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmClient")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl LlmClient {
    pub fn new(config: LlmConfig) -> Result<Self, LlmError> {
        Self::with_transport(config, Box::new(HttpTransport::default()))
    }

    pub fn with_transport(
        config: LlmConfig,
        transport: Box<dyn Transport>,
    ) -> Result<Self, LlmError> {
        if config.mode == CacheMode::Online && config.endpoint.is_none() {
            return Err(LlmError::Config("online mode needs an endpoint".into()));
        }
        if config.mode == CacheMode::CacheOnly && config.cache_dir.is_none() {
            return Err(LlmError::Config("cache-only mode needs a cache directory".into()));
        }
        if config.max_attempts == 0 {
            return Err(LlmError::Config("max_attempts must be at least 1".into()));
        }
        let cache = config.cache_dir.clone().map(ResponseCache::open).transpose()?;
        Ok(Self {
            gate: Gate::new(config.max_in_flight),
            config,
            transport,
            cache,
            cache_hits: AtomicU64::new(0),
            network_calls: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            network_calls: self.network_calls.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
        }
    }

    /// Convenience for single-prompt requests with the configured model.
    pub fn prompt(&self, messages: Vec<ChatMessage>) -> Result<String, LlmError> {
        self.complete(&ChatRequest::new(self.config.model.clone(), messages))
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        if request.messages.is_empty() {
            return Err(LlmError::Config("request has no messages".into()));
        }
        let digest = request_digest(request);
        if let Some(rec) = self.cache.as_ref().and_then(|c| c.get(&digest)) {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(rec.response);
        }
        if self.config.mode == CacheMode::CacheOnly {
            return Err(LlmError::CacheMiss { digest });
        }
        let url = self
            .config
            .completions_url()
            .ok_or_else(|| LlmError::Config("no endpoint".into()))?;
        let body = request.to_wire();

        let mut last = String::new();
        for attempt in 0..self.config.max_attempts {
            if attempt > 0 {
                self.retries.fetch_add(1, Ordering::Relaxed);
                let wait = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(wait));
            }
            let sent = {
                let _slot = self.gate.acquire();
                self.network_calls.fetch_add(1, Ordering::Relaxed);
                self.transport
                    .send(&url, self.config.api_key.as_deref(), &body)
            };
            match sent {
                Ok(raw) => {
                    let text = extract_content(&raw)?;
                    if let Some(cache) = &self.cache {
                        cache.put(&CacheRecord {
                            digest: digest.clone(),
                            response: text.clone(),
                            timestamp: SystemTime::now()
                                .duration_since(UNIX_EPOCH)
                                .map(|d| d.as_secs())
                                .unwrap_or(0),
                            endpoint: url.clone(),
                        })?;
                    }
                    return Ok(text);
                }
                Err(TransportError::Fatal(m)) => {
                    return Err(LlmError::Endpoint {
                        attempts: attempt + 1,
                        last: m,
                    })
                }
                Err(TransportError::Transient(m)) => {
                    tracing::warn!(attempt, error = %m, "chat completion failed");
                    last = m;
                }
            }
        }
        Err(LlmError::Endpoint {
            attempts: self.config.max_attempts,
            last,
        })
    }
}

/// Pulls `choices[0].message.content` out of a chat-completions body.
pub fn extract_content(raw: &str) -> Result<String, LlmError> {
    let v: serde_json::Value =
        serde_json::from_str(raw).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))
}

/// Wraps reply text in a minimal chat-completions body.
pub fn completion_body(content: &str) -> String {
    serde_json::json!({
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    struct Echo {
        calls: Arc<AtomicU64>,
        fail_first: u64,
        fatal: bool,
    }

    impl Transport for Echo {
        fn send(&self, _: &str, _: Option<&str>, body: &serde_json::Value) -> Result<String, TransportError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return if self.fatal {
                    Err(TransportError::Fatal("400".into()))
                } else {
                    Err(TransportError::Transient("503".into()))
                };
            }
            let last = body["messages"].as_array().unwrap().last().unwrap()["content"]
                .as_str()
                .unwrap()
                .to_string();
            Ok(completion_body(&format!("echo: {last}")))
        }
    }

    fn client(dir: &Path, fail_first: u64, fatal: bool) -> (LlmClient, Arc<AtomicU64>) {
        let calls = Arc::new(AtomicU64::new(0));
        let config = LlmConfig {
            endpoint: Some("http://localhost:1/v1".into()),
            cache_dir: Some(dir.to_path_buf()),
            backoff_base_ms: 0,
            ..LlmConfig::default()
        };
        let t = Echo {
            calls: calls.clone(),
            fail_first,
            fatal,
        };
        (LlmClient::with_transport(config, Box::new(t)).unwrap(), calls)
    }

    #[test]
    fn second_identical_request_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let (c, calls) = client(dir.path(), 0, false);
        let req = ChatRequest::new("m", vec![ChatMessage::user("hi")]);
        assert_eq!(c.complete(&req).unwrap(), "echo: hi");
        assert_eq!(c.complete(&req).unwrap(), "echo: hi");
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(c.stats().cache_hits, 1);
    }

    #[test]
    fn transient_failures_are_retried() {
        let dir = tempfile::tempdir().unwrap();
        let (c, calls) = client(dir.path(), 2, false);
        let req = ChatRequest::new("m", vec![ChatMessage::user("x")]);
        assert_eq!(c.complete(&req).unwrap(), "echo: x");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(c.stats().retries, 2);
    }

    #[test]
    fn retries_are_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let (c, calls) = client(dir.path(), 10, false);
        let req = ChatRequest::new("m", vec![ChatMessage::user("x")]);
        assert!(matches!(c.complete(&req), Err(LlmError::Endpoint { attempts: 3, .. })));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let dir = tempfile::tempdir().unwrap();
        let (c, calls) = client(dir.path(), 10, true);
        let req = ChatRequest::new("m", vec![ChatMessage::user("x")]);
        assert!(matches!(c.complete(&req), Err(LlmError::Endpoint { attempts: 1, .. })));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn cache_only_miss() {
        let dir = tempfile::tempdir().unwrap();
        let config = LlmConfig {
            mode: CacheMode::CacheOnly,
            cache_dir: Some(dir.path().to_path_buf()),
            ..LlmConfig::default()
        };
        let c = LlmClient::new(config).unwrap();
        let req = ChatRequest::new("m", vec![ChatMessage::user("novel")]);
        assert!(matches!(c.complete(&req), Err(LlmError::CacheMiss { .. })));
    }

    #[test]
    fn digest_is_field_sensitive() {
        let a = ChatRequest::new("m", vec![ChatMessage::user("x")]);
        let mut b = a.clone();
        b.temperature = 0.1;
        assert_eq!(request_digest(&a), request_digest(&a.clone()));
        assert_ne!(request_digest(&a), request_digest(&b));
    }

    #[test]
    fn malformed_body() {
        assert!(matches!(extract_content("{}"), Err(LlmError::MalformedResponse(_))));
        assert!(matches!(extract_content("nope"), Err(LlmError::MalformedResponse(_))));
        assert_eq!(extract_content(&completion_body("ok")).unwrap(), "ok");
    }

    #[test]
    fn url_joining() {
        let mut c = LlmConfig {
            endpoint: Some("http://h/v1/".into()),
            ..LlmConfig::default()
        };
        assert_eq!(c.completions_url().unwrap(), "http://h/v1/chat/completions");
        c.endpoint = Some("http://h/v1/chat/completions".into());
        assert_eq!(c.completions_url().unwrap(), "http://h/v1/chat/completions");
    }
}
