//! Uniform chat-completion gateway over remote endpoints and deterministic
//! test backends, with response caching, bounded retries, a parallelism
//! bound and an exchange log.

mod backends;
mod http;
mod toolbox;
mod world;

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::MediaRef;

pub use backends::{FnBackend, ScriptStep, ScriptedBackend};
pub use http::{HttpChatBackend, HttpConfig};
pub use toolbox::{ToolBox, ToolBoxError, ToolEntry};
pub use world::{observer_answer, FactDetail, ObserverBackend, SyntheticWorld, WorldError, WorldFact, NO_RELEVANT_DETAIL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<MediaRef>,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into(), media: None }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into(), media: None }
    }

    pub fn with_media(mut self, media: MediaRef) -> Self {
        self.media = Some(media);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { temperature: 0.0, max_tokens: 4096, seed: None }
    }
}

impl DecodeParams {
    /// Responses may be replayed from cache only when decoding is
    /// reproducible: greedy, or sampled under a fixed seed.
    pub fn is_deterministic(&self) -> bool {
        self.temperature <= 0.0 || self.seed.is_some()
    }
}

/// A backend-agnostic chat request. `metadata` is free-form bookkeeping
/// (run ids, item ids) and does not participate in the cache key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub backend_id: String,
    #[serde(default)]
    pub system: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub decode: DecodeParams,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl ChatRequest {
    pub fn new(backend_id: impl Into<String>, system: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            backend_id: backend_id.into(),
            system: system.into(),
            messages,
            decode: DecodeParams::default(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_decode(mut self, decode: DecodeParams) -> Self {
        self.decode = decode;
        self
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages must be non-empty".into()));
        }
        let system_positions: Vec<usize> =
            self.messages.iter().enumerate().filter(|(_, m)| m.role == Role::System).map(|(i, _)| i).collect();
        let inline = system_positions.len();
        if inline > 1 || system_positions.iter().any(|&i| i != 0) {
            return Err(GatewayError::InvalidRequest("at most one system message, placed first".into()));
        }
        if inline == 1 && !self.system.is_empty() {
            return Err(GatewayError::InvalidRequest("system prompt given both inline and as a field".into()));
        }
        Ok(())
    }

    /// The system prompt followed by the conversation, as sent on the wire.
    pub fn wire_messages(&self) -> Vec<ChatMessage> {
        let mut out = Vec::with_capacity(self.messages.len() + 1);
        if !self.system.is_empty() {
            out.push(ChatMessage { role: Role::System, content: self.system.clone(), media: None });
        }
        out.extend(self.messages.iter().cloned());
        out
    }

    /// Content of the most recent user message.
    pub fn last_user(&self) -> Option<&ChatMessage> {
        self.messages.iter().rev().find(|m| m.role == Role::User)
    }

    /// First media reference attached anywhere in the conversation.
    pub fn media(&self) -> Option<&MediaRef> {
        self.messages.iter().find_map(|m| m.media.as_ref())
    }
}

fn canonicalize(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, canonicalize(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

/// Stable hex digest over backend, system prompt, messages and decode
/// parameters. Keys are canonicalized, so serialization order is irrelevant.
pub fn cache_key(req: &ChatRequest) -> String {
    let keyed = serde_json::json!({
        "backend_id": req.backend_id,
        "system": req.system,
        "messages": req.messages,
        "decode": req.decode,
    });
    let canonical = serde_json::to_string(&canonicalize(keyed)).expect("request serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request: ChatRequest,
    pub response_text: String,
    pub cache_key: String,
    pub cache_hit: bool,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

/// Failure reported by a single backend call.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Transport faults, 5xx and rate limiting; worth retrying.
    #[error("transient: {0}")]
    Transient(String),
    #[error("authentication: {0}")]
    Auth(String),
    /// Anything a retry cannot fix (bad request, exhausted script, ...).
    #[error("{0}")]
    Fatal(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend `{backend}` unavailable after {attempts} attempt(s): {last}")]
    BackendUnavailable { backend: String, attempts: u32, last: String },
    #[error("backend `{backend}` rejected credentials: {message}")]
    AuthFailure { backend: String, message: String },
    #[error("backend `{backend}` failed: {message}")]
    BackendFailure { backend: String, message: String },
    #[error("backend `{0}` returned an empty response")]
    ResponseEmpty(String),
}

/// One behaviour behind a backend id.
pub trait ChatBackend: Send + Sync {
    fn send(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay_ms: 500 }
    }
}

impl RetryPolicy {
    /// Delay before attempt `n + 1`, given `n` failed attempts so far.
    pub fn delay_after(&self, failed: u32) -> Duration {
        let factor = 1u64 << failed.saturating_sub(1).min(16);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor))
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    response: String,
}

/// In-memory response cache, optionally mirrored to `responses.jsonl` in a
/// cache directory so later runs replay earlier exchanges.
pub struct ResponseCache {
    map: Mutex<HashMap<String, String>>,
    sink: Option<Mutex<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self { map: Mutex::new(HashMap::new()), sink: None }
    }

    pub fn persistent(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("responses.jsonl");
        let mut map = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    map.entry(entry.key).or_insert(entry.response);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { map: Mutex::new(map), sink: Some(Mutex::new(file)) })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.map.lock().expect("cache poisoned").get(key).cloned()
    }

    /// Inserts unless present and returns the value now stored; the first
    /// writer wins so concurrent misses converge on one response.
    pub fn get_or_insert(&self, key: &str, response: String) -> String {
        let mut map = self.map.lock().expect("cache poisoned");
        if let Some(existing) = map.get(key) {
            return existing.clone();
        }
        if let Some(sink) = &self.sink {
            let line = serde_json::to_string(&CacheLine { key: key.to_string(), response: response.clone() })
                .expect("cache line serializes");
            let mut f = sink.lock().expect("cache sink poisoned");
            // a failed write only loses persistence, never correctness
            let _ = writeln!(f, "{line}");
        }
        map.insert(key.to_string(), response.clone());
        response
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Routes requests to registered backends.
pub struct Gateway {
    backends: HashMap<String, Arc<dyn ChatBackend>>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    permits: Semaphore,
    parallelism: usize,
    log: Mutex<Vec<ChatExchange>>,
    log_sink: Option<Mutex<File>>,
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self {
            backends: HashMap::new(),
            cache: None,
            retry: RetryPolicy::default(),
            permits: Semaphore::new(4),
            parallelism: 4,
            log: Mutex::new(Vec::new()),
            log_sink: None,
        }
    }

    pub fn with_backend(mut self, id: impl Into<String>, backend: impl ChatBackend + 'static) -> Self {
        self.register(id, Arc::new(backend));
        self
    }

    pub fn register(&mut self, id: impl Into<String>, backend: Arc<dyn ChatBackend>) {
        self.backends.insert(id.into(), backend);
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self.permits = Semaphore::new(self.parallelism);
        self
    }

    /// Mirrors every exchange to a JSONL file as it completes.
    pub fn with_exchange_log(mut self, path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.log_sink = Some(Mutex::new(file));
        Ok(self)
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn has_backend(&self, id: &str) -> bool {
        self.backends.contains_key(id)
    }

    pub fn backend_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.backends.keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn complete(&self, req: ChatRequest) -> Result<ChatExchange, GatewayError> {
        req.validate()?;
        let backend = self
            .backends
            .get(&req.backend_id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownBackend(req.backend_id.clone()))?;
        let key = cache_key(&req);
        let cacheable = req.decode.is_deterministic();
        let started = Instant::now();

        if let (Some(cache), true) = (&self.cache, cacheable) {
            if let Some(text) = cache.get(&key) {
                let ex = ChatExchange {
                    request: req,
                    response_text: text,
                    cache_key: key,
                    cache_hit: true,
                    latency_ms: started.elapsed().as_millis() as u64,
                    attempt_count: 1,
                };
                self.record(&ex);
                return Ok(ex);
            }
        }

        let _permit = self.permits.acquire();
        let mut attempts = 0u32;
        let text = loop {
            attempts += 1;
            match backend.send(&req) {
                Ok(text) => break text,
                Err(BackendError::Transient(msg)) => {
                    if attempts >= self.retry.max_attempts.max(1) {
                        return Err(GatewayError::BackendUnavailable {
                            backend: req.backend_id.clone(),
                            attempts,
                            last: msg,
                        });
                    }
                    std::thread::sleep(self.retry.delay_after(attempts));
                }
                Err(BackendError::Auth(message)) => {
                    return Err(GatewayError::AuthFailure { backend: req.backend_id.clone(), message })
                }
                Err(BackendError::Fatal(message)) => {
                    return Err(GatewayError::BackendFailure { backend: req.backend_id.clone(), message })
                }
            }
        };
        if text.trim().is_empty() {
            return Err(GatewayError::ResponseEmpty(req.backend_id.clone()));
        }
        let text = match (&self.cache, cacheable) {
            (Some(cache), true) => cache.get_or_insert(&key, text),
            _ => text,
        };
        let ex = ChatExchange {
            request: req,
            response_text: text,
            cache_key: key,
            cache_hit: false,
            latency_ms: started.elapsed().as_millis() as u64,
            attempt_count: attempts,
        };
        self.record(&ex);
        Ok(ex)
    }

    fn record(&self, ex: &ChatExchange) {
        if let Some(sink) = &self.log_sink {
            if let Ok(line) = serde_json::to_string(ex) {
                let mut f = sink.lock().expect("exchange sink poisoned");
                let _ = writeln!(f, "{line}");
            }
        }
        self.log.lock().expect("exchange log poisoned").push(ex.clone());
    }

    pub fn exchanges(&self) -> Vec<ChatExchange> {
        self.log.lock().expect("exchange log poisoned").clone()
    }

    pub fn exchange_count(&self, backend_id: &str) -> usize {
        self.log.lock().expect("exchange log poisoned").iter().filter(|e| e.request.backend_id == backend_id).count()
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("exchange log poisoned").clear();
    }
}

/// Applies `f` to every item on up to `parallelism` scoped threads and
/// returns results in input order.
pub fn parallel_map<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = parallelism.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot poisoned") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot poisoned").expect("every slot filled")).collect()
}

/// Path of the exchange log inside a run directory.
pub fn exchange_log_path(run_dir: &Path) -> PathBuf {
    run_dir.join("exchanges.jsonl")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn req(backend: &str) -> ChatRequest {
        ChatRequest::new(backend, "sys", vec![ChatMessage::user("hi")])
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy { max_attempts: 3, base_delay_ms: 1 }
    }

    #[test]
    fn scripted_echo() {
        let gw = Gateway::new().with_backend("s", ScriptedBackend::new(["hello"]));
        let ex = gw.complete(req("s")).unwrap();
        assert_eq!(ex.response_text, "hello");
        assert_eq!(ex.attempt_count, 1);
        assert!(!ex.cache_hit);
    }

    #[test]
    fn cache_hit_is_identical() {
        let gw = Gateway::new().with_backend("s", ScriptedBackend::new(["first", "second"])).with_cache(ResponseCache::in_memory());
        let a = gw.complete(req("s")).unwrap();
        let b = gw.complete(req("s")).unwrap();
        assert!(!a.cache_hit);
        assert!(b.cache_hit);
        assert_eq!(b.attempt_count, 1);
        assert_eq!(a.response_text, b.response_text);
        assert_eq!(gw.exchanges().len(), 2);
    }

    #[test]
    fn sampled_requests_without_seed_bypass_cache() {
        let gw = Gateway::new().with_backend("s", ScriptedBackend::new(["first", "second"])).with_cache(ResponseCache::in_memory());
        let hot = DecodeParams { temperature: 0.7, max_tokens: 10, seed: None };
        let a = gw.complete(req("s").with_decode(hot.clone())).unwrap();
        let b = gw.complete(req("s").with_decode(hot)).unwrap();
        assert_eq!((a.response_text.as_str(), b.response_text.as_str()), ("first", "second"));
        assert!(!b.cache_hit);
        let seeded = DecodeParams { temperature: 0.7, max_tokens: 10, seed: Some(3) };
        assert!(seeded.is_deterministic());
    }

    #[test]
    fn retries_transient_failures() {
        let steps = vec![
            ScriptStep::Fail(BackendError::Transient("503".into())),
            ScriptStep::Fail(BackendError::Transient("connection reset".into())),
            ScriptStep::Reply("ok".into()),
        ];
        let gw = Gateway::new().with_backend("r", ScriptedBackend::from_steps(steps)).with_retry(fast_retry());
        let ex = gw.complete(req("r")).unwrap();
        assert_eq!(ex.attempt_count, 3);
        assert_eq!(ex.response_text, "ok");
    }

    #[test]
    fn gives_up_after_cap_and_classifies_errors() {
        let steps = (0..5).map(|_| ScriptStep::Fail(BackendError::Transient("429".into()))).collect();
        let gw = Gateway::new().with_backend("r", ScriptedBackend::from_steps(steps)).with_retry(fast_retry());
        match gw.complete(req("r")) {
            Err(GatewayError::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
        let gw = Gateway::new()
            .with_backend("a", ScriptedBackend::from_steps(vec![ScriptStep::Fail(BackendError::Auth("401".into()))]))
            .with_backend("e", ScriptedBackend::new(["   "]))
            .with_retry(fast_retry());
        assert!(matches!(gw.complete(req("a")), Err(GatewayError::AuthFailure { .. })));
        assert!(matches!(gw.complete(req("e")), Err(GatewayError::ResponseEmpty(_))));
        assert!(matches!(gw.complete(req("nope")), Err(GatewayError::UnknownBackend(_))));
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_after(1), Duration::from_millis(500));
        assert_eq!(p.delay_after(2), Duration::from_millis(1000));
        assert_eq!(p.delay_after(3), Duration::from_millis(2000));
    }

    #[test]
    fn request_validation() {
        let mut r = req("s");
        r.messages.clear();
        assert!(r.validate().is_err());
        let mut r = ChatRequest::new("s", "", vec![
            ChatMessage { role: Role::System, content: "x".into(), media: None },
            ChatMessage::user("u"),
        ]);
        assert!(r.validate().is_ok());
        r.messages.push(ChatMessage { role: Role::System, content: "y".into(), media: None });
        assert!(r.validate().is_err());
        let r = ChatRequest::new("s", "also", vec![ChatMessage { role: Role::System, content: "x".into(), media: None }]);
        assert!(r.validate().is_err());
    }

    #[test]
    fn cache_key_properties() {
        let a = req("s");
        assert_eq!(cache_key(&a), cache_key(&a.clone()));
        let hot = a.clone().with_decode(DecodeParams { temperature: 0.7, ..DecodeParams::default() });
        assert_ne!(cache_key(&a), cache_key(&hot));
        assert_ne!(cache_key(&a), cache_key(&req("t")));

        // Reordered fields and metadata on the wire canonicalize to the same key.
        let tagged = a.clone().with_meta("run", "1").with_meta("item", "x");
        let reordered = r#"{"metadata":{"item":"x","run":"1"},"decode":{"max_tokens":4096,"temperature":0.0},
            "messages":[{"content":"hi","role":"user"}],"system":"sys","backend_id":"s"}"#;
        let parsed: ChatRequest = serde_json::from_str(reordered).unwrap();
        assert_eq!(cache_key(&parsed), cache_key(&tagged));
        assert_eq!(cache_key(&tagged), cache_key(&a));
    }

    #[test]
    fn persistent_cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let gw = Gateway::new()
                .with_backend("s", ScriptedBackend::new(["persisted"]))
                .with_cache(ResponseCache::persistent(dir.path()).unwrap());
            gw.complete(req("s")).unwrap();
        }
        let gw = Gateway::new()
            .with_backend("s", ScriptedBackend::new(Vec::<String>::new()))
            .with_cache(ResponseCache::persistent(dir.path()).unwrap());
        let ex = gw.complete(req("s")).unwrap();
        assert!(ex.cache_hit);
        assert_eq!(ex.response_text, "persisted");
    }

    #[test]
    fn parallelism_bound_is_respected() {
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (l, p) = (live.clone(), peak.clone());
        let backend = FnBackend::new(move |_| {
            let now = l.fetch_add(1, Ordering::SeqCst) + 1;
            p.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            l.fetch_sub(1, Ordering::SeqCst);
            Ok("x".to_string())
        });
        let gw = Gateway::new().with_backend("f", backend).with_parallelism(2);
        let items: Vec<usize> = (0..16).collect();
        let out = parallel_map(&items, 8, |i| gw.complete(req("f").with_meta("i", i.to_string())).unwrap().response_text);
        assert_eq!(out.len(), 16);
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<u32> = (0..100).collect();
        assert_eq!(parallel_map(&items, 7, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(parallel_map(&Vec::<u32>::new(), 4, |x| *x).is_empty());
    }
}
