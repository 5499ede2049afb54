//! Pluggable chat-completion client: a deterministic mock, an HTTP client
//! with bounded retry, and a content-addressed write-once response cache
//! that either can be wrapped in.
//!
//! Cache keys hash the model name, sampling parameters, and a canonical
//! encoding of the bundle where every image is replaced by the digest of
//! its bytes, so moved files still hit and any content change misses.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use mmgl_core::prompt::{PromptBundle, PromptSegment};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// The one environment variable holding endpoint credentials. Its value is
/// sent as a bearer token and never logged or printed.
pub const TOKEN_ENV: &str = "MMGL_API_TOKEN";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("endpoint returned status {status}")]
    HttpStatus { status: u16 },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("image {path} unreadable: {reason}")]
    ImageUnreadable { path: String, reason: String },
    #[error("empty prompt bundle")]
    EmptyBundle,
    #[error("cache entry {key} corrupt: {reason}")]
    CacheCorrupt { key: String, reason: String },
    #[error("cache io at {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model_name: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub temperature: f64,
    pub max_tokens: u32,
    pub concurrency_limit: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint: String::new(),
            model_name: "mock-vlm".to_string(),
            timeout: Duration::from_secs(30),
            max_retries: 2,
            backoff_base: Duration::from_millis(250),
            temperature: 0.0,
            max_tokens: 512,
            concurrency_limit: 1,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.concurrency_limit < 1 {
            return Err("concurrency_limit must be at least 1".to_string());
        }
        Ok(())
    }
}

/// The slice of the config that identifies a request for caching.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestFingerprint {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl RequestFingerprint {
    pub fn of(cfg: &ClientConfig) -> Self {
        RequestFingerprint {
            model_name: cfg.model_name.clone(),
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
        }
    }
}

#[derive(Serialize)]
struct CanonicalSegment<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_sha256: Option<String>,
}

#[derive(Serialize)]
struct CanonicalRequest<'a> {
    model: &'a str,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    system: Option<&'a str>,
    segments: Vec<CanonicalSegment<'a>>,
}

fn image_digest(path: &str) -> Result<String, ClientError> {
    let bytes = fs::read(path).map_err(|e| ClientError::ImageUnreadable {
        path: path.to_string(),
        reason: e.to_string(),
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Content-addressed key: constructed (never parsed), so JSON whitespace
/// cannot perturb it, while any change to text, image bytes, model, or
/// sampling parameters does.
pub fn request_digest(
    fp: &RequestFingerprint,
    bundle: &PromptBundle,
) -> Result<String, ClientError> {
    if bundle.segments.is_empty() {
        return Err(ClientError::EmptyBundle);
    }
    let mut segments = Vec::with_capacity(bundle.segments.len());
    for seg in &bundle.segments {
        segments.push(match seg {
            PromptSegment::Text(t) => CanonicalSegment {
                text: Some(t),
                image_sha256: None,
            },
            PromptSegment::Image(p) => CanonicalSegment {
                text: None,
                image_sha256: Some(image_digest(p)?),
            },
        });
    }
    let canonical = CanonicalRequest {
        model: &fp.model_name,
        temperature: fp.temperature,
        max_tokens: fp.max_tokens,
        system: bundle.system.as_deref(),
        segments,
    };
    let encoded = serde_json::to_vec(&canonical).expect("canonical request serializes");
    Ok(hex::encode(Sha256::digest(&encoded)))
}

pub trait VlmClient: Send + Sync {
    fn fingerprint(&self) -> &RequestFingerprint;
    fn complete(&self, bundle: &PromptBundle) -> Result<String, ClientError>;
    fn concurrency_limit(&self) -> usize {
        1
    }
}

impl<C: VlmClient + ?Sized> VlmClient for Box<C> {
    fn fingerprint(&self) -> &RequestFingerprint {
        (**self).fingerprint()
    }
    fn complete(&self, bundle: &PromptBundle) -> Result<String, ClientError> {
        (**self).complete(bundle)
    }
    fn concurrency_limit(&self) -> usize {
        (**self).concurrency_limit()
    }
}

/// Test double: responses by request digest with a default, plus a call log.
/// No cache of its own; wrap it in [`CachedClient`] to test composition.
pub struct MockClient {
    fp: RequestFingerprint,
    rules: BTreeMap<String, String>,
    default: String,
    log: Mutex<Vec<String>>,
}

impl MockClient {
    pub fn new(rules: BTreeMap<String, String>, default: impl Into<String>) -> Self {
        MockClient {
            fp: RequestFingerprint {
                model_name: "mock-vlm".to_string(),
                temperature: 0.0,
                max_tokens: 512,
            },
            rules,
            default: default.into(),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn digest(&self, bundle: &PromptBundle) -> Result<String, ClientError> {
        request_digest(&self.fp, bundle)
    }

    /// Registers a rule for this exact bundle.
    pub fn respond_to(&mut self, bundle: &PromptBundle, response: impl Into<String>) {
        let key = self.digest(bundle).expect("bundle digests");
        self.rules.insert(key, response.into());
    }

    pub fn calls(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn call_log(&self) -> Vec<String> {
        self.log.lock().unwrap().clone()
    }
}

impl VlmClient for MockClient {
    fn fingerprint(&self) -> &RequestFingerprint {
        &self.fp
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String, ClientError> {
        let key = request_digest(&self.fp, bundle)?;
        self.log.lock().unwrap().push(key.clone());
        Ok(self
            .rules
            .get(&key)
            .cloned()
            .unwrap_or_else(|| self.default.clone()))
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    request_digest: String,
    response: String,
    created_at: u64,
}

/// Directory of one JSON file per key, filename = hex digest. First write
/// wins; later writers and readers get the original bytes back.
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ClientError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| ClientError::CacheIo {
            path: dir.clone(),
            source,
        })?;
        Ok(ResponseCache { dir })
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(key)
    }

    pub fn get(&self, key: &str) -> Result<Option<String>, ClientError> {
        let path = self.entry_path(key);
        let raw = match fs::read_to_string(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(ClientError::CacheIo { path, source }),
        };
        let entry: CacheFile =
            serde_json::from_str(&raw).map_err(|e| ClientError::CacheCorrupt {
                key: key.to_string(),
                reason: e.to_string(),
            })?;
        if entry.request_digest != key {
            return Err(ClientError::CacheCorrupt {
                key: key.to_string(),
                reason: format!("entry claims digest {}", entry.request_digest),
            });
        }
        Ok(Some(entry.response))
    }

    /// Write-once insert; returns the stored response, which is the first
    /// writer's under any interleaving.
    pub fn put(&self, key: &str, response: &str) -> Result<String, ClientError> {
        let path = self.entry_path(key);
        let entry = CacheFile {
            request_digest: key.to_string(),
            response: response.to_string(),
            created_at: unix_now(),
        };
        let bytes = serde_json::to_vec(&entry).expect("cache entry serializes");
        let tmp = self.dir.join(format!(".{key}.tmp{}", std::process::id()));
        let io = |path: PathBuf| move |source| ClientError::CacheIo { path, source };
        match fs::File::options().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&tmp, &bytes).map_err(io(tmp.clone()))?;
                fs::rename(&tmp, &path).map_err(io(path))?;
                Ok(response.to_string())
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => self
                .get(key)?
                .ok_or_else(|| ClientError::CacheCorrupt {
                    key: key.to_string(),
                    reason: "entry vanished during write race".to_string(),
                }),
            Err(source) => Err(ClientError::CacheIo { path, source }),
        }
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Consults the cache before delegating; misses are completed then stored.
pub struct CachedClient<C: VlmClient> {
    inner: C,
    cache: ResponseCache,
}

impl<C: VlmClient> CachedClient<C> {
    pub fn new(inner: C, cache_dir: impl Into<PathBuf>) -> Result<Self, ClientError> {
        Ok(CachedClient {
            inner,
            cache: ResponseCache::open(cache_dir)?,
        })
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: VlmClient> VlmClient for CachedClient<C> {
    fn fingerprint(&self) -> &RequestFingerprint {
        self.inner.fingerprint()
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String, ClientError> {
        let key = request_digest(self.inner.fingerprint(), bundle)?;
        if let Some(hit) = self.cache.get(&key)? {
            return Ok(hit);
        }
        let response = self.inner.complete(bundle)?;
        self.cache.put(&key, &response)
    }

    fn concurrency_limit(&self) -> usize {
        self.inner.concurrency_limit()
    }
}

/// Blocking HTTP client speaking the chat-completion wire protocol. The
/// bearer token comes from [`TOKEN_ENV`] at construction and is withheld
/// from the `Debug` output.
pub struct HttpClient {
    cfg: ClientConfig,
    fp: RequestFingerprint,
    token: Option<String>,
    agent: ureq::Agent,
}

impl fmt::Debug for HttpClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpClient")
            .field("endpoint", &self.cfg.endpoint)
            .field("model_name", &self.cfg.model_name)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

fn mime_for(path: &str) -> &'static str {
    let lower = path.to_ascii_lowercase();
    match lower.rsplit('.').next() {
        Some("png") => "image/png",
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

impl HttpClient {
    pub fn new(cfg: ClientConfig) -> Result<Self, ClientError> {
        cfg.validate().map_err(ClientError::Transport)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpClient {
            fp: RequestFingerprint::of(&cfg),
            token: std::env::var(TOKEN_ENV).ok(),
            cfg,
            agent,
        })
    }

    fn wire_request(&self, bundle: &PromptBundle) -> Result<serde_json::Value, ClientError> {
        let mut content = Vec::with_capacity(bundle.segments.len());
        for seg in &bundle.segments {
            content.push(match seg {
                PromptSegment::Text(t) => serde_json::json!({"type": "text", "text": t}),
                PromptSegment::Image(p) => {
                    let bytes = fs::read(p).map_err(|e| ClientError::ImageUnreadable {
                        path: p.clone(),
                        reason: e.to_string(),
                    })?;
                    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
                    serde_json::json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:{};base64,{}", mime_for(p), encoded)}
                    })
                }
            });
        }
        let mut messages = Vec::new();
        if let Some(system) = &bundle.system {
            messages.push(serde_json::json!({
                "role": "system",
                "content": [{"type": "text", "text": system}]
            }));
        }
        messages.push(serde_json::json!({"role": "user", "content": content}));
        Ok(serde_json::json!({
            "model": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
            "messages": messages,
        }))
    }

    fn send_once(&self, body: &str) -> Result<String, ClientError> {
        let mut request = self.agent.post(&self.cfg.endpoint);
        if let Some(token) = &self.token {
            request = request.header("authorization", &format!("Bearer {token}"));
        }
        let mut response = request
            .content_type("application/json")
            .send(body)
            .map_err(|e| match e {
                ureq::Error::Timeout(_) => ClientError::Timeout { attempts: 1 },
                other => ClientError::Transport(other.to_string()),
            })?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(ClientError::HttpStatus { status });
        }
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ClientError::HttpStatus { status });
        }
        let parsed: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| ClientError::MalformedResponse(e.to_string()))?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| {
                ClientError::MalformedResponse(
                    "missing choices[0].message.content string".to_string(),
                )
            })
    }
}

fn transient(err: &ClientError) -> bool {
    matches!(
        err,
        ClientError::Timeout { .. }
            | ClientError::Transport(_)
            | ClientError::HttpStatus { status: 429 }
            | ClientError::HttpStatus { status: 500..=599 }
    )
}

impl VlmClient for HttpClient {
    fn fingerprint(&self) -> &RequestFingerprint {
        &self.fp
    }

    fn complete(&self, bundle: &PromptBundle) -> Result<String, ClientError> {
        bundle.validate().map_err(|_| ClientError::EmptyBundle)?;
        let body = serde_json::to_string(&self.wire_request(bundle)?)
            .expect("wire request serializes");
        let mut last = None;
        for attempt in 0..=self.cfg.max_retries {
            match self.send_once(&body) {
                Ok(text) => return Ok(text),
                Err(err) if transient(&err) && attempt < self.cfg.max_retries => {
                    last = Some(err);
                    std::thread::sleep(self.cfg.backoff_base * 2u32.pow(attempt));
                }
                Err(err) => {
                    last = Some(err);
                    break;
                }
            }
        }
        let attempts = self.cfg.max_retries + 1;
        Err(match last.expect("at least one attempt ran") {
            ClientError::HttpStatus { status: 429 } => ClientError::RateLimited { attempts },
            ClientError::Timeout { .. } => ClientError::Timeout { attempts },
            other => other,
        })
    }

    fn concurrency_limit(&self) -> usize {
        self.cfg.concurrency_limit
    }
}

/// Runs `f` over `items` on up to `limit` worker threads, returning results
/// in input order. Callers pass the client's concurrency limit.
pub fn for_each_concurrent<T, R, F>(items: Vec<T>, limit: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let total = items.len();
    let workers = limit.max(1).min(total.max(1));
    let slots: Vec<Mutex<(Option<T>, Option<R>)>> = items
        .into_iter()
        .map(|t| Mutex::new((Some(t), None)))
        .collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= total {
                    break;
                }
                let mut slot = slots[i].lock().unwrap();
                let item = slot.0.take().expect("each slot visited once");
                slot.1 = Some(f(item));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().1.expect("worker filled slot"))
        .collect()
}
