//! Text-generation and embedding backends behind one trait: a remote
//! chat-completions-compatible endpoint and a fully deterministic scripted
//! backend for offline runs and tests.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::ChatMessage;

pub const DEFAULT_API_KEY_ENV: &str = "CONFDRIVE_API_KEY";

/// FNV-1a 64-bit hash. Used for scripted-reply keys and scripted embeddings;
/// stable across platforms and compiler versions, unlike the std hasher.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_k: Option<u32>,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl GenerationParams {
    /// Greedy decoding contract: temperature zero.
    pub fn deterministic() -> GenerationParams {
        GenerationParams { temperature: 0.0, top_k: None, max_tokens: 1024, seed: None }
    }

    pub fn sampling(temperature: f64, seed: u64) -> GenerationParams {
        GenerationParams { temperature, top_k: None, max_tokens: 1024, seed: Some(seed) }
    }
}

/// Fixed-length embedding vector. Stored as f32 to match the on-disk format;
/// similarity math upcasts to f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f32>,
}

impl Embedding {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values.iter().zip(&other.values).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    /// Exact cosine similarity; zero if either vector has zero norm.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        let denom = self.norm() * other.norm();
        if denom <= 0.0 {
            0.0
        } else {
            self.dot(other) / denom
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    Remote,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> RetryPolicy {
        RetryPolicy { max_attempts: 5, backoff_base_ms: 200, backoff_cap_ms: 5_000 }
    }
}

impl RetryPolicy {
    /// Exponential backoff for a 1-based attempt number, bounded by the cap.
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1).min(20);
        let ms = self.backoff_base_ms.saturating_mul(1u64 << exp).min(self.backoff_cap_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model_name: String,
    pub api_key_env: String,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
    pub embed_dimension: usize,
}

impl Default for BackendConfig {
    fn default() -> BackendConfig {
        BackendConfig {
            kind: BackendKind::Scripted,
            endpoint: String::new(),
            model_name: "scripted".to_string(),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            max_concurrency: 4,
            retry: RetryPolicy::default(),
            embed_dimension: 64,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited by backend")]
    RateLimited,
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input must be nonempty")]
    EmptyInput,
}

/// A text backend: chat completion plus text embedding.
pub trait TextBackend: Send + Sync {
    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, GatewayError>;

    fn embed(&self, text: &str) -> Result<Embedding, GatewayError>;

    fn embed_dimension(&self) -> usize;
}

/// Stable key for scripted replies: hash of every (role, content) pair.
pub fn message_digest(messages: &[ChatMessage]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for m in messages {
        for bytes in [m.role.as_str().as_bytes(), m.content.as_bytes()] {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= 0x1f;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

type ScriptRule =
    Box<dyn Fn(&[ChatMessage], &GenerationParams) -> Option<String> + Send + Sync>;

/// Deterministic offline backend. Replies come from, in priority order:
/// registered rules, digest-keyed canned replies, then a fixed default.
/// Embeddings are a seeded random projection of token-hash counts, so equal
/// texts embed equally and similar texts embed nearby.
pub struct ScriptedBackend {
    dimension: usize,
    embed_seed: u64,
    canned: Mutex<HashMap<u64, String>>,
    rules: Vec<ScriptRule>,
    default_reply: String,
}

impl ScriptedBackend {
    pub fn new(dimension: usize) -> ScriptedBackend {
        ScriptedBackend {
            dimension,
            embed_seed: 0x5eed,
            canned: Mutex::new(HashMap::new()),
            rules: Vec::new(),
            default_reply: "Decision: CK-LK. I keep my lane at the current speed.".to_string(),
        }
    }

    pub fn with_default_reply(mut self, reply: impl Into<String>) -> ScriptedBackend {
        self.default_reply = reply.into();
        self
    }

    /// Register a canned reply for an exact message sequence.
    pub fn script_reply(&self, messages: &[ChatMessage], reply: impl Into<String>) {
        self.canned.lock().unwrap().insert(message_digest(messages), reply.into());
    }

    /// Register a rule; rules run in registration order and the first Some wins.
    pub fn add_rule(
        &mut self,
        rule: impl Fn(&[ChatMessage], &GenerationParams) -> Option<String> + Send + Sync + 'static,
    ) {
        self.rules.push(Box::new(rule));
    }
}

impl TextBackend for ScriptedBackend {
    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        for rule in &self.rules {
            if let Some(reply) = rule(messages, params) {
                return Ok(reply);
            }
        }
        if let Some(reply) = self.canned.lock().unwrap().get(&message_digest(messages)) {
            return Ok(reply.clone());
        }
        Ok(self.default_reply.clone())
    }

    fn embed(&self, text: &str) -> Result<Embedding, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let mut values = vec![0.0f64; self.dimension];
        for token in text.split_whitespace() {
            let h = fnv1a64(token.as_bytes()) ^ self.embed_seed;
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            for v in values.iter_mut() {
                *v += rng.gen_range(-1.0..1.0);
            }
        }
        Ok(Embedding { values: values.into_iter().map(|v| v as f32).collect() })
    }

    fn embed_dimension(&self) -> usize {
        self.dimension
    }
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_k: Option<u32>,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a str,
}

/// Chat-completions-compatible HTTP backend with bounded exponential-backoff
/// retries on transport errors, 5xx, and 429.
pub struct RemoteBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: BackendConfig) -> Result<RemoteBackend, GatewayError> {
        if config.endpoint.is_empty() || config.model_name.is_empty() {
            return Err(GatewayError::Transport(
                "remote backend requires endpoint and model_name".to_string(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(RemoteBackend { config, client })
    }

    fn post_json(&self, path: &str, body: String) -> Result<serde_json::Value, GatewayError> {
        let url = format!("{}{}", self.config.endpoint.trim_end_matches('/'), path);
        let api_key = std::env::var(&self.config.api_key_env).ok();
        let mut last_err = GatewayError::Transport("no attempts made".to_string());
        for attempt in 1..=self.config.retry.max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.config.retry.delay(attempt - 1));
            }
            let mut req = self
                .client
                .post(&url)
                .header("Content-Type", "application/json")
                .body(body.clone());
            if let Some(key) = &api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<serde_json::Value>()
                            .map_err(|e| GatewayError::MalformedResponse(e.to_string()));
                    }
                    if status.as_u16() == 429 {
                        last_err = GatewayError::RateLimited;
                    } else if status.is_server_error() {
                        last_err =
                            GatewayError::Transport(format!("server returned status {status}"));
                    } else {
                        return Err(GatewayError::Transport(format!(
                            "server returned status {status}"
                        )));
                    }
                }
                Err(e) => last_err = GatewayError::Transport(e.to_string()),
            }
        }
        Err(last_err)
    }
}

impl TextBackend for RemoteBackend {
    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenerationParams,
    ) -> Result<String, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let body = ChatRequest {
            model: &self.config.model_name,
            messages: messages
                .iter()
                .map(|m| WireMessage { role: m.role.as_str(), content: &m.content })
                .collect(),
            temperature: params.temperature,
            top_k: params.top_k,
            max_tokens: params.max_tokens,
            seed: params.seed,
        };
        let value = self.post_json(
            "/chat/completions",
            serde_json::to_string(&body).expect("serializable request"),
        )?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.to_string())
            .ok_or_else(|| {
                GatewayError::MalformedResponse(
                    "missing choices[0].message.content".to_string(),
                )
            })
    }

    fn embed(&self, text: &str) -> Result<Embedding, GatewayError> {
        if text.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        let body = EmbedRequest { model: &self.config.model_name, input: text };
        let value = self
            .post_json("/embeddings", serde_json::to_string(&body).expect("serializable request"))?;
        let raw = value["data"][0]["embedding"].as_array().ok_or_else(|| {
            GatewayError::MalformedResponse("missing data[0].embedding".to_string())
        })?;
        let mut values = Vec::with_capacity(raw.len());
        for v in raw {
            match v.as_f64() {
                Some(f) => values.push(f as f32),
                None => {
                    return Err(GatewayError::MalformedResponse(
                        "non-numeric embedding entry".to_string(),
                    ))
                }
            }
        }
        if values.len() != self.config.embed_dimension {
            return Err(GatewayError::DimensionMismatch {
                expected: self.config.embed_dimension,
                got: values.len(),
            });
        }
        Ok(Embedding { values })
    }

    fn embed_dimension(&self) -> usize {
        self.config.embed_dimension
    }
}

/// Run many generation requests with at most `max_concurrency` in flight.
/// Results are returned in request order; one failed item never aborts the
/// batch.
pub fn generate_batch(
    backend: &dyn TextBackend,
    requests: &[(Vec<ChatMessage>, GenerationParams)],
    max_concurrency: usize,
) -> Vec<Result<String, GatewayError>> {
    let workers = max_concurrency.max(1).min(requests.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<Result<String, GatewayError>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= requests.len() {
                    break;
                }
                let (messages, params) = &requests[i];
                let out = backend.generate(messages, params);
                *results[i].lock().unwrap() = Some(out);
            });
        }
    });

    results
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::ChatMessage;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    fn msgs(text: &str) -> Vec<ChatMessage> {
        vec![ChatMessage::user(text)]
    }

    #[test]
    fn scripted_canned_reply() {
        let backend = ScriptedBackend::new(8);
        backend.script_reply(&msgs("hello"), "hi there");
        let params = GenerationParams::deterministic();
        assert_eq!(backend.generate(&msgs("hello"), &params).unwrap(), "hi there");
        assert_eq!(
            backend.generate(&msgs("other"), &params).unwrap(),
            backend.generate(&msgs("other"), &params).unwrap()
        );
    }

    #[test]
    fn scripted_rules_take_priority() {
        let mut backend = ScriptedBackend::new(8);
        backend.add_rule(|messages, params| {
            messages
                .iter()
                .any(|m| m.content.contains("seeded"))
                .then(|| format!("seed={}", params.seed.unwrap_or(0)))
        });
        let params = GenerationParams::sampling(0.7, 41);
        assert_eq!(backend.generate(&msgs("seeded request"), &params).unwrap(), "seed=41");
        assert!(matches!(
            backend.generate(&[], &params),
            Err(GatewayError::EmptyInput)
        ));
    }

    #[test]
    fn scripted_embeddings_deterministic_and_distinct() {
        let backend = ScriptedBackend::new(16);
        let a = backend.embed("the quick brown fox").unwrap();
        let b = backend.embed("the quick brown fox").unwrap();
        assert_eq!(a, b);
        let c = backend.embed("an entirely different sentence").unwrap();
        assert!(a.cosine(&c) < 1.0 - 1e-6);
        assert!(matches!(backend.embed(""), Err(GatewayError::EmptyInput)));
    }

    #[test]
    fn scripted_embedding_collision_scan() {
        // Distinct texts must not collide into identical directions.
        let backend = ScriptedBackend::new(32);
        let texts: Vec<String> = (0..1000).map(|i| format!("scenario number {i} detail")).collect();
        let embs: Vec<Embedding> = texts.iter().map(|t| backend.embed(t).unwrap()).collect();
        for i in 0..embs.len() {
            for j in (i + 1)..embs.len() {
                assert!(embs[i].cosine(&embs[j]) < 1.0 - 1e-9, "collision between {i} and {j}");
            }
        }
    }

    #[test]
    fn batch_preserves_order_and_bound() {
        let mut backend = ScriptedBackend::new(8);
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (c2, p2) = (current.clone(), peak.clone());
        backend.add_rule(move |messages, _| {
            let now = c2.fetch_add(1, Ordering::SeqCst) + 1;
            p2.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            c2.fetch_sub(1, Ordering::SeqCst);
            Some(format!("echo {}", messages[0].content))
        });
        let requests: Vec<(Vec<ChatMessage>, GenerationParams)> = (0..10)
            .map(|i| (msgs(&format!("{i}")), GenerationParams::deterministic()))
            .collect();
        let results = generate_batch(&backend, &requests, 4);
        assert_eq!(results.len(), 10);
        for (i, r) in results.iter().enumerate() {
            assert_eq!(r.as_ref().unwrap(), &format!("echo {i}"));
        }
        assert!(peak.load(Ordering::SeqCst) <= 4);
        assert!(peak.load(Ordering::SeqCst) >= 2);
    }

    #[test]
    fn batch_reports_failures_positionally() {
        let backend = ScriptedBackend::new(8).with_default_reply("ok");
        let mut requests: Vec<(Vec<ChatMessage>, GenerationParams)> = (0..10)
            .map(|i| (msgs(&format!("{i}")), GenerationParams::deterministic()))
            .collect();
        requests[3].0.clear();
        let results = generate_batch(&backend, &requests, 3);
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 9);
        assert!(matches!(results[3], Err(GatewayError::EmptyInput)));
    }

    /// Minimal HTTP stub: answers every request with the given status and body.
    fn spawn_stub(
        status_line: &'static str,
        body: &'static str,
        hits: Arc<AtomicUsize>,
    ) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                hits.fetch_add(1, Ordering::SeqCst);
                let mut buf = Vec::new();
                let mut chunk = [0u8; 1024];
                // Read headers, then the content-length body.
                let mut content_length = 0usize;
                let mut header_end = 0usize;
                loop {
                    let Ok(n) = stream.read(&mut chunk) else { break };
                    if n == 0 {
                        break;
                    }
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(pos) = find_blank_line(&buf) {
                        header_end = pos;
                        let head = String::from_utf8_lossy(&buf[..pos]);
                        for line in head.lines() {
                            if let Some(v) = line.to_lowercase().strip_prefix("content-length:") {
                                content_length = v.trim().parse().unwrap_or(0);
                            }
                        }
                        break;
                    }
                }
                while buf.len() < header_end + 4 + content_length {
                    let Ok(n) = stream.read(&mut chunk) else { break };
                    if n == 0 {
                        break;
                    }
                    buf.extend_from_slice(&chunk[..n]);
                }
                let response = format!(
                    "{status_line}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        format!("http://{addr}")
    }

    fn find_blank_line(buf: &[u8]) -> Option<usize> {
        buf.windows(4).position(|w| w == b"\r\n\r\n")
    }

    fn remote_config(endpoint: String, attempts: u32) -> BackendConfig {
        BackendConfig {
            kind: BackendKind::Remote,
            endpoint,
            model_name: "test-model".to_string(),
            retry: RetryPolicy { max_attempts: attempts, backoff_base_ms: 1, backoff_cap_ms: 4 },
            embed_dimension: 3,
            ..BackendConfig::default()
        }
    }

    #[test]
    fn remote_parses_chat_response() {
        let hits = Arc::new(AtomicUsize::new(0));
        let endpoint = spawn_stub(
            "HTTP/1.1 200 OK",
            r#"{"choices":[{"message":{"role":"assistant","content":"Decision: CK-LK."}}]}"#,
            hits.clone(),
        );
        let backend = RemoteBackend::new(remote_config(endpoint, 3)).unwrap();
        let out = backend.generate(&msgs("ctx"), &GenerationParams::deterministic()).unwrap();
        assert_eq!(out, "Decision: CK-LK.");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn remote_parses_embedding_response() {
        let hits = Arc::new(AtomicUsize::new(0));
        let endpoint = spawn_stub(
            "HTTP/1.1 200 OK",
            r#"{"data":[{"embedding":[0.5,-1.0,2.0]}]}"#,
            hits.clone(),
        );
        let backend = RemoteBackend::new(remote_config(endpoint, 3)).unwrap();
        let emb = backend.embed("ctx").unwrap();
        assert_eq!(emb.values, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn remote_retries_then_transport_error() {
        let hits = Arc::new(AtomicUsize::new(0));
        let endpoint = spawn_stub("HTTP/1.1 500 Internal Server Error", "{}", hits.clone());
        let backend = RemoteBackend::new(remote_config(endpoint, 5)).unwrap();
        let err = backend.generate(&msgs("ctx"), &GenerationParams::deterministic()).unwrap_err();
        assert!(matches!(err, GatewayError::Transport(_)), "got {err:?}");
        assert_eq!(hits.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn remote_embedding_dimension_checked() {
        let hits = Arc::new(AtomicUsize::new(0));
        let endpoint =
            spawn_stub("HTTP/1.1 200 OK", r#"{"data":[{"embedding":[1.0,2.0]}]}"#, hits.clone());
        let backend = RemoteBackend::new(remote_config(endpoint, 2)).unwrap();
        let err = backend.embed("ctx").unwrap_err();
        assert!(matches!(err, GatewayError::DimensionMismatch { expected: 3, got: 2 }));
    }

    #[test]
    fn backoff_delays_bounded() {
        let retry = RetryPolicy { max_attempts: 8, backoff_base_ms: 100, backoff_cap_ms: 1000 };
        assert_eq!(retry.delay(1), Duration::from_millis(100));
        assert_eq!(retry.delay(2), Duration::from_millis(200));
        assert_eq!(retry.delay(3), Duration::from_millis(400));
        assert_eq!(retry.delay(5), Duration::from_millis(1000));
        assert_eq!(retry.delay(20), Duration::from_millis(1000));
    }
}
