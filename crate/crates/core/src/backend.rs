//! Model backends.
//!
//! A [`Backend`] executes one batch of queries and returns raw outputs:
//! generated text for completions and per-candidate log-scores for ranked
//! queries. Normalization into [`Response`]s happens in one place,
//! [`to_response`], so every backend shares the same softmax and tie-break.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::query::{CompletionResponse, Payload, Query, QueryError, RankedResponse, Response};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Complete,
    RankText,
    RankImage,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::Complete => "complete",
            Capability::RankText => "rank_text",
            Capability::RankImage => "rank_image",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Capabilities {
    complete: bool,
    rank_text: bool,
    rank_image: bool,
}

impl Capabilities {
    pub const ALL: Capabilities = Capabilities { complete: true, rank_text: true, rank_image: true };
    pub const TEXT: Capabilities = Capabilities { complete: true, rank_text: true, rank_image: false };

    pub fn of(caps: &[Capability]) -> Self {
        let mut out = Capabilities::default();
        for c in caps {
            match c {
                Capability::Complete => out.complete = true,
                Capability::RankText => out.rank_text = true,
                Capability::RankImage => out.rank_image = true,
            }
        }
        out
    }

    pub fn supports(&self, cap: Capability) -> bool {
        match cap {
            Capability::Complete => self.complete,
            Capability::RankText => self.rank_text,
            Capability::RankImage => self.rank_image,
        }
    }

    pub fn list(&self) -> Vec<Capability> {
        [Capability::Complete, Capability::RankText, Capability::RankImage]
            .into_iter()
            .filter(|c| self.supports(*c))
            .collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// The batch did not fit; retry with a smaller batch.
    #[error("backend ran out of memory for a batch of {batch_size}")]
    MemoryPressure { batch_size: usize },
    #[error("transport failure: {message}")]
    Transport { message: String, retryable: bool },
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("could not decode backend reply: {0}")]
    Decode(String),
    #[error("backend does not support {0}")]
    Unsupported(Capability),
    #[error("cannot read image {path:?}: {message}")]
    Image { path: String, message: String },
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("{0}")]
    Other(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport { retryable, .. } => *retryable,
            BackendError::Status { status, .. } => is_retryable_status(*status),
            BackendError::MemoryPressure { .. } => true,
            _ => false,
        }
    }
}

fn is_retryable_status(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawOutput {
    Completion(String),
    /// One log-score per candidate, in candidate order.
    Logits(Vec<f64>),
}

pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    /// Runs one batch. Output `i` belongs to query `i`.
    fn infer_batch(&self, queries: &[Query]) -> Result<Vec<RawOutput>, BackendError>;

    /// Token length from the backend's own tokenizer, when it has one.
    fn token_length(&self, _query: &Query) -> Option<usize> {
        None
    }
}

/// Turns a raw backend output into the typed response for `query`.
pub fn to_response(query: &Query, raw: RawOutput) -> Result<Response, BackendError> {
    match (query, raw) {
        (Query::Completion(_), RawOutput::Completion(text)) => {
            Ok(Response::Completion(CompletionResponse { prediction: text }))
        }
        (Query::Ranked(q), RawOutput::Logits(logits)) => {
            Ok(Response::Ranked(RankedResponse::from_logits(&q.candidates, &logits)?))
        }
        (_, raw) => Err(BackendError::Decode(format!("output {raw:?} does not match query kind"))),
    }
}

/// Deterministic score in [0, 1) for a payload/candidate pair: the first
/// eight bytes of `SHA-256(canonical(payload) || 0x1F || candidate)` read as
/// a big-endian integer and divided by 2^64.
pub fn mock_score(payload: &Payload, candidate: &str) -> Result<f64, BackendError> {
    let content = payload.content_form().map_err(|e| image_error(payload, e))?;
    let digest = canonical::sha256_joined(&[&canonical::to_canonical_bytes(&content), candidate.as_bytes()]);
    let head = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
    Ok(head as f64 / 2f64.powi(64))
}

fn image_error(payload: &Payload, e: std::io::Error) -> BackendError {
    let path = match payload {
        Payload::Image(p) | Payload::Text(p) => p.clone(),
    };
    BackendError::Image { path, message: e.to_string() }
}

pub const MOCK_LOGIT_SCALE: f64 = 10.0;

/// Hash-driven backend for tests and dry runs. Ranked logits are
/// `10 * mock_score`; completions pick one of a fixed set of answers by
/// prompt hash.
#[derive(Debug)]
pub struct MockBackend {
    model_id: String,
    capabilities: Capabilities,
    completions: Vec<String>,
    batches: AtomicUsize,
    queries: AtomicUsize,
}

impl MockBackend {
    pub fn new(model_id: impl Into<String>) -> Self {
        MockBackend {
            model_id: model_id.into(),
            capabilities: Capabilities::ALL,
            completions: vec!["Yes".into(), "No".into()],
            batches: AtomicUsize::new(0),
            queries: AtomicUsize::new(0),
        }
    }

    pub fn with_capabilities(mut self, capabilities: Capabilities) -> Self {
        self.capabilities = capabilities;
        self
    }

    /// Answers that completion queries choose from. Must be nonempty.
    pub fn with_completions(mut self, completions: Vec<String>) -> Self {
        assert!(!completions.is_empty(), "mock completions must not be empty");
        self.completions = completions;
        self
    }

    pub fn batch_calls(&self) -> usize {
        self.batches.load(Ordering::SeqCst)
    }

    pub fn query_calls(&self) -> usize {
        self.queries.load(Ordering::SeqCst)
    }

    pub fn complete(&self, prompt: &str) -> String {
        let digest = canonical::sha256(prompt.as_bytes());
        let head = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
        self.completions[(head % self.completions.len() as u64) as usize].clone()
    }
}

impl Backend for MockBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn infer_batch(&self, queries: &[Query]) -> Result<Vec<RawOutput>, BackendError> {
        self.batches.fetch_add(1, Ordering::SeqCst);
        self.queries.fetch_add(queries.len(), Ordering::SeqCst);
        queries
            .iter()
            .map(|q| {
                let cap = q.required_capability();
                if !self.capabilities.supports(cap) {
                    return Err(BackendError::Unsupported(cap));
                }
                Ok(match q {
                    Query::Completion(c) => RawOutput::Completion(self.complete(&c.prompt)),
                    Query::Ranked(r) => RawOutput::Logits(
                        r.candidates
                            .iter()
                            .map(|c| mock_score(&r.payload, c).map(|s| s * MOCK_LOGIT_SCALE))
                            .collect::<Result<_, _>>()?,
                    ),
                })
            })
            .collect()
    }
}

/// Settings for an OpenAI-style completion endpoint.
#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub auth_token: Option<String>,
    pub timeout: Duration,
    pub retries: u32,
    /// Delay before the first retry; doubles for each later one.
    pub backoff: Duration,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            auth_token: None,
            timeout: Duration::from_secs(60),
            retries: 3,
            backoff: Duration::from_secs(1),
        }
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop: Option<&'a str>,
}

#[derive(Deserialize)]
struct CompletionReply {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
}

/// Completion-only backend that POSTs JSON to a remote endpoint.
pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { config, agent }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    pub fn http_complete(&self, query: &crate::query::CompletionQuery) -> Result<CompletionResponse, BackendError> {
        let body = canonical::to_canonical_string(&CompletionRequest {
            model: &self.config.model,
            prompt: &query.prompt,
            max_tokens: query.gen_params.max_tokens,
            temperature: query.gen_params.temperature,
            stop: query.gen_params.stop.as_deref(),
        });
        let mut attempt = 0;
        loop {
            match self.post_once(&body) {
                Err(e) if e.is_retryable() && attempt < self.config.retries => {
                    let delay = self.config.backoff * 2u32.pow(attempt);
                    log::warn!("completion request failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once(&self, body: &str) -> Result<CompletionResponse, BackendError> {
        let mut request = self.agent.post(&self.config.endpoint).header("Content-Type", "application/json");
        if let Some(token) = &self.config.auth_token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let response = request.send(body).map_err(transport_error)?;
        let status = response.status().as_u16();
        let text = response.into_body().read_to_string().map_err(transport_error)?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: excerpt(&text) });
        }
        let reply: CompletionReply = serde_json::from_str(&text).map_err(|e| BackendError::Decode(e.to_string()))?;
        let first =
            reply.choices.into_iter().next().ok_or_else(|| BackendError::Decode("reply has no choices".into()))?;
        Ok(CompletionResponse { prediction: first.text.trim().to_string() })
    }
}

fn transport_error(e: ureq::Error) -> BackendError {
    let retryable = matches!(e, ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed);
    BackendError::Transport { message: e.to_string(), retryable }
}

fn excerpt(body: &str) -> String {
    const LIMIT: usize = 200;
    match body.char_indices().nth(LIMIT) {
        Some((cut, _)) => format!("{}...", &body[..cut]),
        None => body.to_string(),
    }
}

impl Backend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::of(&[Capability::Complete])
    }

    fn infer_batch(&self, queries: &[Query]) -> Result<Vec<RawOutput>, BackendError> {
        queries
            .iter()
            .map(|q| match q {
                Query::Completion(c) => self.http_complete(c).map(|r| RawOutput::Completion(r.prediction)),
                other => Err(BackendError::Unsupported(other.required_capability())),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::RankedQuery;
    use std::collections::HashMap;

    fn cands(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn run_mock(q: Query) -> Response {
        let raw = MockBackend::new("m").infer_batch(std::slice::from_ref(&q)).unwrap().remove(0);
        to_response(&q, raw).unwrap()
    }

    #[test]
    fn mock_score_is_stable_and_in_range() {
        let p = Payload::Text("hello".into());
        let a = mock_score(&p, "x").unwrap();
        assert_eq!(a, mock_score(&p, "x").unwrap());
        assert!((0.0..1.0).contains(&a));
        assert_ne!(a, mock_score(&p, "y").unwrap());
    }

    #[test]
    fn mock_score_matches_definition() {
        // canonical({"text":"hello"}) || 0x1F || "x"
        let digest = canonical::sha256(b"{\"text\":\"hello\"}\x1fx");
        let head = u64::from_be_bytes(digest[..8].try_into().unwrap());
        let expected = head as f64 / 18446744073709551616.0;
        assert_eq!(mock_score(&Payload::Text("hello".into()), "x").unwrap(), expected);
    }

    #[test]
    fn candidate_permutation_keeps_scores() {
        let a = run_mock(RankedQuery::text("p", cands(&["A", "B", "C"])).unwrap().into());
        let b = run_mock(RankedQuery::text("p", cands(&["C", "A", "B"])).unwrap().into());
        let (Response::Ranked(a), Response::Ranked(b)) = (a, b) else { panic!() };
        for (k, v) in &a.scores {
            assert!((v - b.scores[k]).abs() < 1e-15);
        }
        assert_eq!(a.prediction, b.prediction);
    }

    #[test]
    fn single_candidate_scores_one() {
        let Response::Ranked(r) = run_mock(RankedQuery::text("p", cands(&["A"])).unwrap().into()) else { panic!() };
        assert_eq!(r.scores, HashMap::from([("A".to_string(), 1.0)]).into_iter().collect());
    }

    #[test]
    fn capability_rejection() {
        let b = MockBackend::new("m").with_capabilities(Capabilities::of(&[Capability::RankText]));
        let q: Query = crate::query::CompletionQuery::new("x").unwrap().into();
        assert_eq!(b.infer_batch(&[q]), Err(BackendError::Unsupported(Capability::Complete)));
    }

    #[test]
    fn missing_image_is_an_error() {
        let q: Query = RankedQuery::image("/nonexistent/img.png", cands(&["a"])).unwrap().into();
        assert!(matches!(MockBackend::new("m").infer_batch(&[q]), Err(BackendError::Image { .. })));
    }

    #[test]
    fn excerpt_truncates() {
        assert_eq!(excerpt("short"), "short");
        assert_eq!(excerpt(&"x".repeat(300)).len(), 203);
    }
}
