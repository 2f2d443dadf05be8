//! HTTP implementations of the backend ports.
//!
//! Every call goes through a [`Gateway`], which retries transport failures,
//! appends to a [`Transcript`], and delegates the wire exchange to a
//! [`Transport`]. Besides plain HTTP there are recording and replaying
//! transports so integration runs can be captured once and replayed offline.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::image::{ImageKind, ImageRef, ImageStore};
use crate::ports::{ActorPort, BackendError, ChatPort, ChatRequest, EmbedPort, ScorerPort};

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const EDIT_PATH: &str = "/edit";
pub const EMBED_PATH: &str = "/embed";
pub const DISTANCE_PATH: &str = "/distance";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Environment variable holding a bearer token.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_timeout() -> f64 {
    120.0
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> u64 {
    250
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            token_env: None,
            model: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err("timeout_secs must be positive".into());
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(format!("base_url {:?} is not an http(s) url", self.base_url));
        }
        Ok(())
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), path)
    }

    fn token(&self) -> Option<String> {
        self.token_env.as_ref().and_then(|v| std::env::var(v).ok())
    }
}

/// Hex SHA-256 of a JSON value's compact encoding.
pub fn json_digest(v: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json value serializes")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub port: String,
    pub request_digest: String,
    /// Absent when the attempt failed.
    pub response_digest: Option<String>,
    pub latency_ms: u64,
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Append-only log of backend exchanges.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    records: Arc<Mutex<Vec<TranscriptRecord>>>,
}

impl Transcript {
    pub fn push(&self, r: TranscriptRecord) {
        self.records.lock().unwrap().push(r);
    }

    pub fn records(&self) -> Vec<TranscriptRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Digest over everything but latencies.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in self.records.lock().unwrap().iter() {
            h.update(r.port.as_bytes());
            h.update(b"\0");
            h.update(r.request_digest.as_bytes());
            h.update(b"\0");
            h.update(r.response_digest.as_deref().unwrap_or("-").as_bytes());
            h.update(r.attempt.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// One request/response exchange.
pub trait Transport: Send + Sync {
    fn post(&self, endpoint: &EndpointConfig, path: &str, body: &Value) -> Result<Value, BackendError>;
}

/// Blocking HTTP with JSON bodies.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new() -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn post(&self, endpoint: &EndpointConfig, path: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self
            .client
            .post(endpoint.url(path))
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .json(body);
        if let Some(token) = endpoint.token() {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(BackendError::HttpStatus(status.as_u16()));
        }
        let bytes = resp.bytes().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        serde_json::from_slice(&bytes).map_err(|e| BackendError::Rejected(format!("response is not json: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub path: String,
    pub request_digest: String,
    pub occurrence: u32,
    pub response: Result<Value, String>,
}

/// Recorded exchanges keyed by path, request digest and occurrence count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cassette {
    pub entries: Vec<CassetteEntry>,
}

impl Cassette {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self).expect("cassette serializes"))
    }
}

type OccurrenceKey = (String, String);

/// Passes requests to `inner` and records each response.
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    cassette: Mutex<(Cassette, HashMap<OccurrenceKey, u32>)>,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn Transport>) -> Self {
        RecordingTransport {
            inner,
            cassette: Mutex::new((Cassette::default(), HashMap::new())),
        }
    }

    pub fn cassette(&self) -> Cassette {
        self.cassette.lock().unwrap().0.clone()
    }
}

impl Transport for RecordingTransport {
    fn post(&self, endpoint: &EndpointConfig, path: &str, body: &Value) -> Result<Value, BackendError> {
        let result = self.inner.post(endpoint, path, body);
        let digest = json_digest(body);
        let mut g = self.cassette.lock().unwrap();
        let n = g.1.entry((path.to_string(), digest.clone())).or_insert(0);
        let occurrence = *n;
        *n += 1;
        g.0.entries.push(CassetteEntry {
            path: path.to_string(),
            request_digest: digest,
            occurrence,
            response: result.clone().map_err(|e| e.to_string()),
        });
        result
    }
}

/// Serves responses from a cassette; unknown requests are rejected.
pub struct ReplayTransport {
    entries: HashMap<(String, String, u32), Result<Value, String>>,
    seen: Mutex<HashMap<OccurrenceKey, u32>>,
}

impl ReplayTransport {
    pub fn new(cassette: Cassette) -> Self {
        ReplayTransport {
            entries: cassette
                .entries
                .into_iter()
                .map(|e| ((e.path, e.request_digest, e.occurrence), e.response))
                .collect(),
            seen: Mutex::new(HashMap::new()),
        }
    }
}

impl Transport for ReplayTransport {
    fn post(&self, _endpoint: &EndpointConfig, path: &str, body: &Value) -> Result<Value, BackendError> {
        let digest = json_digest(body);
        let occurrence = {
            let mut seen = self.seen.lock().unwrap();
            let n = seen.entry((path.to_string(), digest.clone())).or_insert(0);
            let o = *n;
            *n += 1;
            o
        };
        match self.entries.get(&(path.to_string(), digest, occurrence)) {
            Some(Ok(v)) => Ok(v.clone()),
            Some(Err(e)) => Err(BackendError::Transport(e.clone())),
            None => Err(BackendError::Rejected(format!("no recorded response for {path} #{occurrence}"))),
        }
    }
}

/// Retry and transcript layer shared by the HTTP ports.
#[derive(Clone)]
pub struct Gateway {
    transport: Arc<dyn Transport>,
    transcript: Transcript,
}

impl Gateway {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Gateway {
            transport,
            transcript: Transcript::default(),
        }
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    /// Posts `body`, retrying retryable failures up to `max_retries` times
    /// with exponential backoff. Each attempt is transcribed.
    pub fn call(&self, endpoint: &EndpointConfig, path: &str, body: &Value) -> Result<Value, BackendError> {
        let request_digest = json_digest(body);
        let mut attempt = 1;
        loop {
            let started = Instant::now();
            let result = self.transport.post(endpoint, path, body);
            let latency_ms = started.elapsed().as_millis() as u64;
            self.transcript.push(TranscriptRecord {
                port: path.to_string(),
                request_digest: request_digest.clone(),
                response_digest: result.as_ref().ok().map(json_digest),
                latency_ms,
                attempt,
                error: result.as_ref().err().map(|e| e.to_string()),
            });
            match result {
                Err(e) if e.is_retryable() && attempt <= endpoint.max_retries => {
                    tracing::warn!(path, attempt, error = %e, "retrying backend call");
                    let wait = endpoint.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn encode_image(image: &ImageRef, store: Option<&ImageStore>) -> Result<String, BackendError> {
    let bytes = image
        .bytes(store)
        .map_err(|e| BackendError::Rejected(e.to_string()))?;
    Ok(B64.encode(bytes))
}

fn field<'v>(v: &'v Value, key: &str) -> Result<&'v Value, BackendError> {
    v.get(key)
        .ok_or_else(|| BackendError::Rejected(format!("response lacks {key:?}")))
}

pub struct HttpChat {
    gateway: Gateway,
    endpoint: EndpointConfig,
    store: Option<ImageStore>,
}

impl HttpChat {
    pub fn new(gateway: Gateway, endpoint: EndpointConfig, store: Option<ImageStore>) -> Self {
        HttpChat { gateway, endpoint, store }
    }

    /// OpenAI-style body; the guided-decoding pattern rides in the
    /// `guided_regex` extension field.
    pub fn request_body(&self, request: &ChatRequest<'_>) -> Result<Value, BackendError> {
        let mut content = vec![json!({"type": "text", "text": request.user})];
        for image in request.images {
            let mime = if image.kind == ImageKind::Sim { "application/json" } else { "image/png" };
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:{mime};base64,{}", encode_image(image, self.store.as_ref())?)}
            }));
        }
        let mut body = json!({
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": content},
            ],
        });
        if let Some(model) = &self.endpoint.model {
            body["model"] = json!(model);
        }
        if let Some(regex) = request.guided_regex {
            body["guided_regex"] = json!(regex);
        }
        Ok(body)
    }
}

impl ChatPort for HttpChat {
    fn chat(&self, request: &ChatRequest<'_>) -> Result<String, BackendError> {
        let body = self.request_body(request)?;
        let resp = self.gateway.call(&self.endpoint, CHAT_PATH, &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Rejected("response lacks choices[0].message.content".into()))
    }
}

/// Editor behind `POST /edit`. Outputs keep the kind of the input image:
/// file images are stored in the workspace, sim payloads stay inline.
pub struct HttpActor {
    gateway: Gateway,
    endpoint: EndpointConfig,
    store: Option<ImageStore>,
}

impl HttpActor {
    pub fn new(gateway: Gateway, endpoint: EndpointConfig, store: Option<ImageStore>) -> Self {
        HttpActor { gateway, endpoint, store }
    }
}

impl ActorPort for HttpActor {
    fn edit(&self, image: &ImageRef, instruction: &str) -> Result<ImageRef, BackendError> {
        let body = json!({
            "image_b64": encode_image(image, self.store.as_ref())?,
            "prompt": instruction,
        });
        let resp = self.gateway.call(&self.endpoint, EDIT_PATH, &body)?;
        let encoded = field(&resp, "image_b64")?
            .as_str()
            .ok_or_else(|| BackendError::InvalidImagePayload("image_b64 is not a string".into()))?;
        let bytes = B64
            .decode(encoded)
            .map_err(|e| BackendError::InvalidImagePayload(e.to_string()))?;
        if bytes.is_empty() {
            return Err(BackendError::InvalidImagePayload("empty image".into()));
        }
        match image.kind {
            ImageKind::Sim => String::from_utf8(bytes)
                .map(ImageRef::sim)
                .map_err(|e| BackendError::InvalidImagePayload(e.to_string())),
            ImageKind::File => {
                let store = self
                    .store
                    .as_ref()
                    .ok_or_else(|| BackendError::Rejected("no image workspace configured".into()))?;
                store
                    .put(&bytes, "png")
                    .map_err(|e| BackendError::Rejected(e.to_string()))
            }
        }
    }
}

pub struct HttpEmbed {
    gateway: Gateway,
    endpoint: EndpointConfig,
    store: Option<ImageStore>,
}

impl HttpEmbed {
    pub fn new(gateway: Gateway, endpoint: EndpointConfig, store: Option<ImageStore>) -> Self {
        HttpEmbed { gateway, endpoint, store }
    }
}

impl EmbedPort for HttpEmbed {
    fn embed(&self, image: &ImageRef) -> Result<Vec<f64>, BackendError> {
        let body = json!({"image_b64": encode_image(image, self.store.as_ref())?});
        let resp = self.gateway.call(&self.endpoint, EMBED_PATH, &body)?;
        serde_json::from_value(field(&resp, "embedding")?.clone())
            .map_err(|e| BackendError::Rejected(format!("bad embedding: {e}")))
    }
}

pub struct HttpScorer {
    gateway: Gateway,
    endpoint: EndpointConfig,
    store: Option<ImageStore>,
}

impl HttpScorer {
    pub fn new(gateway: Gateway, endpoint: EndpointConfig, store: Option<ImageStore>) -> Self {
        HttpScorer { gateway, endpoint, store }
    }
}

impl ScorerPort for HttpScorer {
    fn distances(&self, a: &ImageRef, b: &ImageRef) -> Result<BTreeMap<String, f64>, BackendError> {
        let body = json!({
            "image_a_b64": encode_image(a, self.store.as_ref())?,
            "image_b_b64": encode_image(b, self.store.as_ref())?,
        });
        let resp = self.gateway.call(&self.endpoint, DISTANCE_PATH, &body)?;
        serde_json::from_value(field(&resp, "distances")?.clone())
            .map_err(|e| BackendError::Rejected(format!("bad distances: {e}")))
    }
}
