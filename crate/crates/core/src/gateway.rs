//! Uniform client for chat-completion backends.
//!
//! Two backend kinds share one call surface: `remote-chat` speaks the common
//! HTTP chat-completions protocol (role-tagged messages, optional inline
//! media, a `usage` block in the response), and `scripted` is a deterministic
//! test double that maps request matchers to fixed responses.
//!
//! Every call goes through a per-backend concurrency limiter and is recorded
//! in the gateway's instrumentation counters, which tests use to assert cache
//! soundness and fan-out bounds.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::registry::Modality;

/// Reference to a media asset. The content digest is computed from the asset
/// bytes (never the URI) and is resolved lazily on first use.
#[derive(Debug, Clone)]
pub struct MediaRef {
    pub modality: Modality,
    pub uri: String,
    digest: OnceLock<String>,
}

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("failed to read asset {uri}: {source}")]
    Io {
        uri: String,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot resolve bytes for remote asset {uri} (download it first)")]
    RemoteUri { uri: String },

    #[error("duplicate asset content digest {digest}")]
    DuplicateDigest { digest: String },
}

impl MediaRef {
    /// A reference whose digest will be computed from the file at `uri` on
    /// first use.
    pub fn new(modality: Modality, uri: impl Into<String>) -> Self {
        MediaRef {
            modality,
            uri: uri.into(),
            digest: OnceLock::new(),
        }
    }

    /// A reference with the digest precomputed from `bytes`. Useful for
    /// scripted tests where the URI is never read.
    pub fn from_bytes(modality: Modality, uri: impl Into<String>, bytes: &[u8]) -> Self {
        let digest = OnceLock::new();
        let _ = digest.set(hex::encode(Sha256::digest(bytes)));
        MediaRef {
            modality,
            uri: uri.into(),
            digest,
        }
    }

    fn is_remote_uri(&self) -> bool {
        self.uri.starts_with("http://") || self.uri.starts_with("https://")
    }

    /// The sha-256 hex digest of the asset bytes, reading the file if it has
    /// not been resolved yet.
    pub fn content_digest(&self) -> Result<&str, AssetError> {
        if self.digest.get().is_none() {
            let bytes = self.read_file_bytes()?;
            let _ = self.digest.set(hex::encode(Sha256::digest(&bytes)));
        }
        Ok(self.digest.get().expect("digest just set"))
    }

    /// Reads the asset bytes from disk (local paths only).
    pub fn read_bytes(&self) -> Result<Vec<u8>, AssetError> {
        let bytes = self.read_file_bytes()?;
        if self.digest.get().is_none() {
            let _ = self.digest.set(hex::encode(Sha256::digest(&bytes)));
        }
        Ok(bytes)
    }

    fn read_file_bytes(&self) -> Result<Vec<u8>, AssetError> {
        if self.is_remote_uri() {
            return Err(AssetError::RemoteUri {
                uri: self.uri.clone(),
            });
        }
        std::fs::read(Path::new(&self.uri)).map_err(|source| AssetError::Io {
            uri: self.uri.clone(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "system")]
    System,
    #[serde(rename = "user")]
    User,
}

#[derive(Debug, Clone)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    pub attachments: Vec<MediaRef>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
            attachments: Vec::new(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
            attachments: Vec::new(),
        }
    }

    pub fn user_with_attachments(content: impl Into<String>, attachments: Vec<MediaRef>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
            attachments,
        }
    }
}

/// A chat-completion request. `temperature` and `max_tokens` fall back to the
/// backend's configured values when unset.
#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Result<Self, GatewayError> {
        if !messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest(
                "request needs at least one user message".to_string(),
            ));
        }
        if messages
            .iter()
            .any(|m| m.role != Role::User && !m.attachments.is_empty())
        {
            return Err(GatewayError::InvalidRequest(
                "attachments are only allowed on user messages".to_string(),
            ));
        }
        Ok(ChatRequest {
            messages,
            temperature: None,
            max_tokens: None,
        })
    }

    /// A single user message with no attachments.
    pub fn user(content: impl Into<String>) -> Self {
        ChatRequest {
            messages: vec![ChatMessage::user(content)],
            temperature: None,
            max_tokens: None,
        }
    }

    /// All message contents joined with newlines; scripted substring matchers
    /// run against this.
    pub fn flattened_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn attachments(&self) -> impl Iterator<Item = &MediaRef> {
        self.messages.iter().flat_map(|m| m.attachments.iter())
    }

    /// Sha-256 hex digest over roles, contents, and attachment digests.
    /// Resolving attachment digests may read asset bytes.
    pub fn digest(&self) -> Result<String, AssetError> {
        let mut hasher = Sha256::new();
        for m in &self.messages {
            hasher.update(match m.role {
                Role::System => b"system\n".as_slice(),
                Role::User => b"user\n".as_slice(),
            });
            hasher.update((m.content.len() as u64).to_be_bytes());
            hasher.update(m.content.as_bytes());
            for a in &m.attachments {
                hasher.update(a.content_digest()?.as_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub backend_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "remote-chat")]
    RemoteChat,
    #[serde(rename = "scripted")]
    Scripted,
}

/// Matcher for one scripted entry. The first matching entry wins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptMatcher {
    /// Matches when the flattened prompt text contains the string. The empty
    /// string matches every request.
    Substring(String),
    /// Matches when the full request digest, or any attachment's content
    /// digest, equals the given hex digest.
    Digest(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    pub matcher: ScriptMatcher,
    pub response: String,
    pub latency_ms: Option<u64>,
}

impl ScriptEntry {
    pub fn substring(needle: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptEntry {
            matcher: ScriptMatcher::Substring(needle.into()),
            response: response.into(),
            latency_ms: None,
        }
    }

    pub fn digest(digest: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptEntry {
            matcher: ScriptMatcher::Digest(digest.into().to_ascii_lowercase()),
            response: response.into(),
            latency_ms: None,
        }
    }

    pub fn with_latency_ms(mut self, latency_ms: u64) -> Self {
        self.latency_ms = Some(latency_ms);
        self
    }
}

/// Declaration of one backend, loaded from the config document or built
/// programmatically (see [`scripted_backend`]).
#[derive(Debug, Clone)]
pub struct BackendSpec {
    pub id: String,
    pub kind: BackendKind,
    pub base_uri: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the credential. `None` or
    /// empty means no auth header is sent.
    pub auth_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_concurrency: usize,
    /// Modalities the backend accepts as attachments; `None` = unrestricted.
    pub modalities: Option<BTreeSet<Modality>>,
    /// Approximate context budget in prompt bytes; prompts above it are
    /// truncated by the aggregator.
    pub context_budget_chars: Option<usize>,
    pub script: Vec<ScriptEntry>,
}

impl BackendSpec {
    pub fn accepts_modality(&self, m: Modality) -> bool {
        match &self.modalities {
            None => true,
            Some(set) => set.contains(&m),
        }
    }
}

/// Builds a scripted backend spec from an ordered script. Matching is
/// deterministic: the first matching entry wins.
pub fn scripted_backend(
    id: impl Into<String>,
    script: Vec<ScriptEntry>,
) -> Result<BackendSpec, GatewayError> {
    let id = id.into();
    if script.is_empty() {
        return Err(GatewayError::EmptyScript { backend: id });
    }
    Ok(BackendSpec {
        id,
        kind: BackendKind::Scripted,
        base_uri: None,
        model: None,
        auth_env: None,
        timeout_secs: 60,
        max_retries: 0,
        temperature: 0.0,
        max_tokens: 1024,
        max_concurrency: 4,
        modalities: None,
        context_budget_chars: None,
        script,
    })
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend {backend}: credential variable {var} is not set")]
    MissingCredential { backend: String, var: String },

    #[error("backend {backend}: authentication failed (status {status})")]
    AuthFailed { backend: String, status: u16 },

    #[error("backend {backend}: timed out after {attempts} attempt(s)")]
    Timeout { backend: String, attempts: u32 },

    #[error("backend {backend}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        backend: String,
        attempts: u32,
        message: String,
    },

    #[error("backend {backend}: malformed response: {detail}")]
    Malformed { backend: String, detail: String },

    #[error("backend {backend}: request failed with status {status}: {body}")]
    HttpStatus {
        backend: String,
        status: u16,
        body: String,
    },

    #[error("backend {backend}: no script entry matches request {request_digest}")]
    NoScriptEntry {
        backend: String,
        request_digest: String,
    },

    #[error("backend {backend}: empty script")]
    EmptyScript { backend: String },

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error(transparent)]
    Asset(#[from] AssetError),
}

impl GatewayError {
    /// True for auth and credential failures, which consume zero retries.
    pub fn is_auth(&self) -> bool {
        matches!(
            self,
            GatewayError::AuthFailed { .. } | GatewayError::MissingCredential { .. }
        )
    }
}

/// Exponential backoff with full jitter: the k-th retry sleeps a uniformly
/// random duration in `[0, base * factor^k]`.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base: Duration::from_secs(1),
            factor: 2.0,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let cap = self.base.as_secs_f64() * self.factor.powi(attempt as i32);
        if self.jitter {
            Duration::from_secs_f64(rand::rng().random_range(0.0..=cap))
        } else {
            Duration::from_secs_f64(cap)
        }
    }
}

#[derive(Debug, Default)]
struct BackendCounters {
    completions: AtomicU64,
    attempts: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

/// Counter snapshot for one backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BackendStats {
    /// Completed `complete` calls (retries excluded).
    pub completions: u64,
    /// Individual dispatch attempts (retries included).
    pub attempts: u64,
    /// High-water mark of concurrent in-flight calls.
    pub max_in_flight: usize,
}

#[derive(Default)]
struct GatewayState {
    limiters: Mutex<HashMap<String, Arc<Semaphore>>>,
    counters: Mutex<HashMap<String, Arc<BackendCounters>>>,
    global_in_flight: AtomicUsize,
    global_max_in_flight: AtomicUsize,
}

/// Shared client for all backends. Cheap to clone; clones share limiters and
/// instrumentation.
#[derive(Clone)]
pub struct Gateway {
    http: reqwest::Client,
    retry: RetryPolicy,
    state: Arc<GatewayState>,
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self::with_retry(RetryPolicy::default())
    }

    pub fn with_retry(retry: RetryPolicy) -> Self {
        Gateway {
            http: reqwest::Client::new(),
            retry,
            state: Arc::new(GatewayState::default()),
        }
    }

    /// Counter snapshot for one backend id (zeros if it never ran).
    pub fn stats_for(&self, backend_id: &str) -> BackendStats {
        let counters = self.state.counters.lock().expect("counters lock");
        match counters.get(backend_id) {
            Some(c) => BackendStats {
                completions: c.completions.load(Ordering::SeqCst),
                attempts: c.attempts.load(Ordering::SeqCst),
                max_in_flight: c.max_in_flight.load(Ordering::SeqCst),
            },
            None => BackendStats::default(),
        }
    }

    /// Snapshot of every backend seen so far.
    pub fn stats(&self) -> BTreeMap<String, BackendStats> {
        let counters = self.state.counters.lock().expect("counters lock");
        counters
            .iter()
            .map(|(id, c)| {
                (
                    id.clone(),
                    BackendStats {
                        completions: c.completions.load(Ordering::SeqCst),
                        attempts: c.attempts.load(Ordering::SeqCst),
                        max_in_flight: c.max_in_flight.load(Ordering::SeqCst),
                    },
                )
            })
            .collect()
    }

    /// High-water mark of in-flight calls across all backends.
    pub fn global_max_in_flight(&self) -> usize {
        self.state.global_max_in_flight.load(Ordering::SeqCst)
    }

    fn limiter(&self, spec: &BackendSpec) -> Arc<Semaphore> {
        let mut limiters = self.state.limiters.lock().expect("limiters lock");
        limiters
            .entry(spec.id.clone())
            .or_insert_with(|| Arc::new(Semaphore::new(spec.max_concurrency.max(1))))
            .clone()
    }

    fn counters(&self, backend_id: &str) -> Arc<BackendCounters> {
        let mut counters = self.state.counters.lock().expect("counters lock");
        counters
            .entry(backend_id.to_string())
            .or_default()
            .clone()
    }

    /// Sends a chat request to a backend and returns its completion.
    ///
    /// Transient failures (timeouts, connection errors, 408/429/5xx) are
    /// retried up to `spec.max_retries` times with exponential backoff and
    /// full jitter. Authentication failures are never retried. Latency and
    /// token usage are recorded on the response.
    pub async fn complete(
        &self,
        spec: &BackendSpec,
        request: &ChatRequest,
    ) -> Result<ChatResponse, GatewayError> {
        let limiter = self.limiter(spec);
        let _permit = limiter.acquire().await.expect("limiter closed");

        let counters = self.counters(&spec.id);
        let in_flight = counters.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        counters.max_in_flight.fetch_max(in_flight, Ordering::SeqCst);
        let global = self.state.global_in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.state
            .global_max_in_flight
            .fetch_max(global, Ordering::SeqCst);

        let started = Instant::now();
        let result = match spec.kind {
            // Scripted calls report the injected latency so replayed runs are
            // byte-identical; remote calls report measured wall time.
            BackendKind::Scripted => self
                .complete_scripted(spec, request, &counters)
                .await
                .map(|(text, prompt_tokens, completion_tokens, latency_ms)| ChatResponse {
                    text,
                    prompt_tokens,
                    completion_tokens,
                    latency_ms,
                    backend_id: spec.id.clone(),
                }),
            BackendKind::RemoteChat => self
                .complete_remote(spec, request, &counters)
                .await
                .map(|(text, prompt_tokens, completion_tokens)| ChatResponse {
                    text,
                    prompt_tokens,
                    completion_tokens,
                    latency_ms: started.elapsed().as_millis() as u64,
                    backend_id: spec.id.clone(),
                }),
        };

        counters.in_flight.fetch_sub(1, Ordering::SeqCst);
        self.state.global_in_flight.fetch_sub(1, Ordering::SeqCst);

        result.map(|response| {
            counters.completions.fetch_add(1, Ordering::SeqCst);
            response
        })
    }

    async fn complete_scripted(
        &self,
        spec: &BackendSpec,
        request: &ChatRequest,
        counters: &BackendCounters,
    ) -> Result<(String, u64, u64, u64), GatewayError> {
        counters.attempts.fetch_add(1, Ordering::SeqCst);
        if spec.script.is_empty() {
            return Err(GatewayError::EmptyScript {
                backend: spec.id.clone(),
            });
        }
        let flattened = request.flattened_text();
        let needs_digests = spec
            .script
            .iter()
            .any(|e| matches!(e.matcher, ScriptMatcher::Digest(_)));
        let request_digest = if needs_digests {
            Some(request.digest()?)
        } else {
            None
        };
        let mut attachment_digests = Vec::new();
        if needs_digests {
            for a in request.attachments() {
                attachment_digests.push(a.content_digest()?.to_string());
            }
        }
        for entry in &spec.script {
            let matched = match &entry.matcher {
                ScriptMatcher::Substring(needle) => flattened.contains(needle.as_str()),
                ScriptMatcher::Digest(d) => {
                    request_digest.as_deref() == Some(d.as_str())
                        || attachment_digests.iter().any(|a| a == d)
                }
            };
            if matched {
                if let Some(ms) = entry.latency_ms {
                    tokio::time::sleep(Duration::from_millis(ms)).await;
                }
                let prompt_tokens = flattened.split_whitespace().count() as u64;
                let completion_tokens = entry.response.split_whitespace().count() as u64;
                return Ok((
                    entry.response.clone(),
                    prompt_tokens,
                    completion_tokens,
                    entry.latency_ms.unwrap_or(0),
                ));
            }
        }
        Err(GatewayError::NoScriptEntry {
            backend: spec.id.clone(),
            request_digest: request.digest()?,
        })
    }

    async fn complete_remote(
        &self,
        spec: &BackendSpec,
        request: &ChatRequest,
        counters: &BackendCounters,
    ) -> Result<(String, u64, u64), GatewayError> {
        let auth = match spec.auth_env.as_deref() {
            None | Some("") => None,
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::MissingCredential {
                backend: spec.id.clone(),
                var: var.to_string(),
            })?),
        };
        let body = self.remote_body(spec, request)?;
        let url = format!(
            "{}/chat/completions",
            spec.base_uri.as_deref().unwrap_or_default().trim_end_matches('/')
        );

        let mut attempt: u32 = 0;
        loop {
            counters.attempts.fetch_add(1, Ordering::SeqCst);
            let mut builder = self
                .http
                .post(&url)
                .timeout(Duration::from_secs(spec.timeout_secs))
                .header("content-type", "application/json");
            if let Some(key) = &auth {
                builder = builder.header("authorization", format!("Bearer {key}"));
            }
            let outcome = builder.json(&body).send().await;

            let failure = match outcome {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return self.parse_remote_response(spec, response).await;
                    }
                    let code = status.as_u16();
                    if code == 401 || code == 403 {
                        return Err(GatewayError::AuthFailed {
                            backend: spec.id.clone(),
                            status: code,
                        });
                    }
                    let body = response.text().await.unwrap_or_default();
                    if code == 408 || code == 429 || status.is_server_error() {
                        Failure::Transient(format!("status {code}: {body}"))
                    } else {
                        return Err(GatewayError::HttpStatus {
                            backend: spec.id.clone(),
                            status: code,
                            body,
                        });
                    }
                }
                Err(e) if e.is_timeout() => Failure::Timeout,
                Err(e) => Failure::Transient(e.to_string()),
            };

            if attempt >= spec.max_retries {
                return Err(match failure {
                    Failure::Timeout => GatewayError::Timeout {
                        backend: spec.id.clone(),
                        attempts: attempt + 1,
                    },
                    Failure::Transient(message) => GatewayError::Transport {
                        backend: spec.id.clone(),
                        attempts: attempt + 1,
                        message,
                    },
                });
            }
            tokio::time::sleep(self.retry.delay(attempt)).await;
            attempt += 1;
        }
    }

    fn remote_body(
        &self,
        spec: &BackendSpec,
        request: &ChatRequest,
    ) -> Result<serde_json::Value, GatewayError> {
        let mut messages = Vec::new();
        for m in &request.messages {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
            };
            if m.attachments.is_empty() {
                messages.push(json!({ "role": role, "content": m.content }));
            } else {
                let mut parts = vec![json!({ "type": "text", "text": m.content })];
                for a in &m.attachments {
                    parts.push(media_part(a)?);
                }
                messages.push(json!({ "role": role, "content": parts }));
            }
        }
        Ok(json!({
            "model": spec.model.as_deref().unwrap_or_default(),
            "messages": messages,
            "temperature": request.temperature.unwrap_or(spec.temperature),
            "max_tokens": request.max_tokens.unwrap_or(spec.max_tokens),
        }))
    }

    async fn parse_remote_response(
        &self,
        spec: &BackendSpec,
        response: reqwest::Response,
    ) -> Result<(String, u64, u64), GatewayError> {
        let value: serde_json::Value =
            response
                .json()
                .await
                .map_err(|e| GatewayError::Malformed {
                    backend: spec.id.clone(),
                    detail: format!("invalid JSON body: {e}"),
                })?;
        let content = value
            .get("choices")
            .and_then(|c| c.get(0))
            .and_then(|c| c.get("message"))
            .and_then(|m| m.get("content"))
            .ok_or_else(|| GatewayError::Malformed {
                backend: spec.id.clone(),
                detail: "missing choices[0].message.content".to_string(),
            })?;
        let text = match content {
            serde_json::Value::Null => String::new(),
            serde_json::Value::String(s) => s.clone(),
            other => {
                return Err(GatewayError::Malformed {
                    backend: spec.id.clone(),
                    detail: format!("unexpected content shape: {other}"),
                })
            }
        };
        let usage = value.get("usage");
        let prompt_tokens = usage
            .and_then(|u| u.get("prompt_tokens"))
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        let completion_tokens = usage
            .and_then(|u| u.get("completion_tokens"))
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        Ok((text, prompt_tokens, completion_tokens))
    }
}

enum Failure {
    Timeout,
    Transient(String),
}

/// Media attachments are inlined as base64 data URIs unless the asset URI is
/// already remote, in which case it is passed through.
fn media_part(asset: &MediaRef) -> Result<serde_json::Value, GatewayError> {
    let url = if asset.is_remote_uri() {
        asset.uri.clone()
    } else {
        let bytes = asset.read_bytes()?;
        format!(
            "data:application/octet-stream;base64,{}",
            base64::engine::general_purpose::STANDARD.encode(&bytes)
        )
    };
    Ok(match asset.modality {
        Modality::Image => json!({ "type": "image_url", "image_url": { "url": url } }),
        Modality::Audio => json!({ "type": "input_audio", "input_audio": { "url": url } }),
        _ => json!({
            "type": "file",
            "file": { "modality": asset.modality.as_str(), "url": url },
        }),
    })
}
