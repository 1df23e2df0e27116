//! Typed queries and responses.
//!
//! Completion queries ask for free generation; ranked queries ask a model to
//! score a fixed, ordered list of candidates for a text prompt or an image.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Capability;
use crate::canonical::{self, Digest32};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum QueryError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("ranked query has no candidates")]
    NoCandidates,
    #[error("duplicate candidate {0:?}")]
    DuplicateCandidate(String),
    #[error("temperature {0} is negative or not finite")]
    InvalidTemperature(f64),
    #[error("{expected} scores for {found} candidates")]
    ScoreCount { expected: usize, found: usize },
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Option<String>,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams { max_tokens: 16, temperature: 0.0, stop: None }
    }
}

impl GenParams {
    pub fn is_deterministic(&self) -> bool {
        self.temperature == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionQuery {
    pub prompt: String,
    #[serde(flatten)]
    pub gen_params: GenParams,
}

impl CompletionQuery {
    pub fn new(prompt: impl Into<String>) -> Result<Self, QueryError> {
        Self::with_params(prompt, GenParams::default())
    }

    pub fn with_params(prompt: impl Into<String>, gen_params: GenParams) -> Result<Self, QueryError> {
        let prompt = prompt.into();
        if prompt.is_empty() {
            return Err(QueryError::EmptyPrompt);
        }
        if !(gen_params.temperature >= 0.0 && gen_params.temperature.is_finite()) {
            return Err(QueryError::InvalidTemperature(gen_params.temperature));
        }
        Ok(CompletionQuery { prompt, gen_params })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Text(String),
    /// Path to an image file.
    Image(String),
}

impl Payload {
    /// Form used for cache keys and mock scoring: image paths are replaced
    /// by the SHA-256 of the file contents.
    pub fn content_form(&self) -> std::io::Result<serde_json::Value> {
        Ok(match self {
            Payload::Text(t) => serde_json::json!({ "text": t }),
            Payload::Image(p) => {
                let bytes = std::fs::read(Path::new(p))?;
                serde_json::json!({ "image_sha256": canonical::hex(&canonical::sha256(&bytes)) })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedQuery {
    pub payload: Payload,
    pub candidates: Vec<String>,
}

impl RankedQuery {
    pub fn new(payload: Payload, candidates: Vec<String>) -> Result<Self, QueryError> {
        if let Payload::Text(t) = &payload {
            if t.is_empty() {
                return Err(QueryError::EmptyPrompt);
            }
        }
        check_candidates(&candidates)?;
        Ok(RankedQuery { payload, candidates })
    }

    pub fn text(prompt: impl Into<String>, candidates: Vec<String>) -> Result<Self, QueryError> {
        Self::new(Payload::Text(prompt.into()), candidates)
    }

    pub fn image(path: impl Into<String>, candidates: Vec<String>) -> Result<Self, QueryError> {
        Self::new(Payload::Image(path.into()), candidates)
    }
}

fn check_candidates(candidates: &[String]) -> Result<(), QueryError> {
    if candidates.is_empty() {
        return Err(QueryError::NoCandidates);
    }
    let mut seen = HashSet::new();
    for c in candidates {
        if !seen.insert(c.as_str()) {
            return Err(QueryError::DuplicateCandidate(c.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Query {
    Completion(CompletionQuery),
    Ranked(RankedQuery),
}

impl From<CompletionQuery> for Query {
    fn from(q: CompletionQuery) -> Self {
        Query::Completion(q)
    }
}

impl From<RankedQuery> for Query {
    fn from(q: RankedQuery) -> Self {
        Query::Ranked(q)
    }
}

impl Query {
    pub fn required_capability(&self) -> Capability {
        match self {
            Query::Completion(_) => Capability::Complete,
            Query::Ranked(RankedQuery { payload: Payload::Text(_), .. }) => Capability::RankText,
            Query::Ranked(RankedQuery { payload: Payload::Image(_), .. }) => Capability::RankImage,
        }
    }

    /// Whether repeated execution yields the same response.
    pub fn is_deterministic(&self) -> bool {
        match self {
            Query::Completion(q) => q.gen_params.is_deterministic(),
            Query::Ranked(_) => true,
        }
    }

    pub fn to_canonical_json(&self) -> String {
        canonical::to_canonical_string(self)
    }

    /// `SHA-256(model_id || 0x1F || canonical(query))` where image payloads
    /// are replaced by the digest of their file bytes.
    pub fn cache_key(&self, model_id: &str) -> std::io::Result<Digest32> {
        let mut value = canonical::to_canonical_value(self);
        if let Query::Ranked(q) = self {
            if matches!(q.payload, Payload::Image(_)) {
                value["payload"] = q.payload.content_form()?;
            }
        }
        let body = serde_json::to_vec(&value).expect("json values always serialize");
        Ok(canonical::sha256_joined(&[model_id.as_bytes(), &body]))
    }

    /// Fallback token-length estimate: `ceil(1.5 * whitespace tokens)` of the
    /// prompt plus the longest candidate. Never less than 1.
    pub fn estimated_tokens(&self) -> usize {
        let estimate = |s: &str| (s.split_whitespace().count() * 3).div_ceil(2);
        let n = match self {
            Query::Completion(q) => estimate(&q.prompt),
            Query::Ranked(q) => {
                let longest = q.candidates.iter().map(|c| estimate(c)).max().unwrap_or(0);
                match &q.payload {
                    Payload::Text(t) => estimate(t) + longest,
                    Payload::Image(_) => longest,
                }
            }
        };
        n.max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResponse {
    pub prediction: String,
    pub scores: BTreeMap<String, f64>,
}

impl RankedResponse {
    /// Builds a response from normalized scores aligned with `candidates`.
    /// The prediction is the highest-scoring candidate, ties going to the
    /// earliest one.
    pub fn from_scores(candidates: &[String], scores: &[f64]) -> Result<Self, QueryError> {
        if candidates.len() != scores.len() {
            return Err(QueryError::ScoreCount { expected: candidates.len(), found: scores.len() });
        }
        check_candidates(candidates)?;
        let best = argmax(scores);
        Ok(RankedResponse {
            prediction: candidates[best].clone(),
            scores: candidates.iter().cloned().zip(scores.iter().copied()).collect(),
        })
    }

    /// Softmax (temperature 1) over per-candidate log-scores.
    pub fn from_logits(candidates: &[String], logits: &[f64]) -> Result<Self, QueryError> {
        if let Some(&bad) = logits.iter().find(|x| !x.is_finite()) {
            return Err(QueryError::NonFiniteScore(bad));
        }
        Self::from_scores(candidates, &softmax(logits))
    }

    /// Scores in the order of `candidates`; missing candidates score 0.
    pub fn scores_in_order(&self, candidates: &[String]) -> Vec<f64> {
        candidates.iter().map(|c| self.scores.get(c).copied().unwrap_or(0.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Response {
    Completion(CompletionResponse),
    Ranked(RankedResponse),
}

impl Response {
    pub fn prediction(&self) -> &str {
        match self {
            Response::Completion(r) => &r.prediction,
            Response::Ranked(r) => &r.prediction,
        }
    }

    pub fn to_canonical_json(&self) -> String {
        canonical::to_canonical_string(self)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
