//! Mapping model responses to label votes.
//!
//! A [`Voter`] pairs a [`LabelMap`] (answer text to class or class-set) with
//! a [`Matcher`]. Voters for ranked templates can be calibrated: the
//! template is run on content-free inputs and candidate scores are divided
//! by the averaged content-free scores before taking the argmax.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{Client, ClientError};
use crate::query::{argmax, Query, QueryError, RankedResponse, Response};
use crate::template::{StringTemplate, TemplateError};

pub const DEFAULT_CONTENT_FREE: [&str; 3] = ["N/A", "", "[MASK]"];

#[derive(Debug, Error)]
pub enum VoterError {
    #[error("class {class} is outside 1..={k}")]
    InvalidClass { class: u32, k: u32 },
    #[error("class sets must not be empty")]
    EmptySet,
    #[error("label map entry {0:?} maps to abstain")]
    AbstainTarget(String),
    #[error("label space needs at least one class")]
    EmptyLabelSpace,
    #[error("{voters} voters but {lists} response lists")]
    VoterCount { voters: usize, lists: usize },
    #[error("voter {voter} has {found} responses, expected {expected}")]
    LengthMismatch { voter: usize, expected: usize, found: usize },
    #[error("calibration needs a template with answer_choices")]
    NotRanked,
    #[error("content-free inputs produced different candidate lists")]
    CandidateMismatch,
    #[error("content-free score for candidate {0:?} is zero; calibration is degenerate")]
    Degenerate(String),
    #[error("calibration needs at least one content-free input")]
    NoContentFree,
    #[error("calibration weight for {0:?} must be positive and finite")]
    BadWeight(String),
    #[error("expected a ranked response for calibration")]
    UnexpectedResponse,
    #[error("invalid vote {0:?}")]
    Parse(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// One entry of the vote matrix. Sets are sorted, deduplicated, and hold at
/// least two classes; a one-class set is a plain class vote.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Vote {
    Abstain,
    Class(u32),
    Set(Vec<u32>),
}

impl Vote {
    pub fn set(classes: impl IntoIterator<Item = u32>) -> Result<Vote, VoterError> {
        let mut v: Vec<u32> = classes.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        match v.len() {
            0 => Err(VoterError::EmptySet),
            1 => Ok(Vote::Class(v[0])),
            _ => Ok(Vote::Set(v)),
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, Vote::Abstain)
    }

    /// Classes named by the vote; empty for abstain.
    pub fn classes(&self) -> &[u32] {
        match self {
            Vote::Abstain => &[],
            Vote::Class(c) => std::slice::from_ref(c),
            Vote::Set(s) => s,
        }
    }

    pub fn contains(&self, class: u32) -> bool {
        self.classes().contains(&class)
    }

    pub fn check(&self, k: u32) -> Result<(), VoterError> {
        match self.classes().iter().find(|&&c| c == 0 || c > k) {
            Some(&class) => Err(VoterError::InvalidClass { class, k }),
            None => Ok(()),
        }
    }
}

impl fmt::Display for Vote {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Vote::Abstain => f.write_str("0"),
            Vote::Class(c) => write!(f, "{c}"),
            Vote::Set(s) => {
                let parts: Vec<String> = s.iter().map(u32::to_string).collect();
                f.write_str(&parts.join("|"))
            }
        }
    }
}

impl FromStr for Vote {
    type Err = VoterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || VoterError::Parse(s.to_string());
        let classes =
            s.trim().split('|').map(|p| p.trim().parse::<u32>().map_err(|_| bad())).collect::<Result<Vec<_>, _>>()?;
        if classes == [0] {
            return Ok(Vote::Abstain);
        }
        if classes.contains(&0) {
            return Err(bad());
        }
        Vote::set(classes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    entries: Vec<(String, Vote)>,
    k: u32,
}

impl LabelMap {
    /// Entries keep their order; earlier entries win when several match.
    pub fn new(entries: Vec<(String, Vote)>, k: u32) -> Result<Self, VoterError> {
        if k == 0 {
            return Err(VoterError::EmptyLabelSpace);
        }
        for (answer, vote) in &entries {
            if vote.is_abstain() {
                return Err(VoterError::AbstainTarget(answer.clone()));
            }
            vote.check(k)?;
        }
        Ok(LabelMap { entries, k })
    }

    pub fn entries(&self) -> &[(String, Vote)] {
        &self.entries
    }

    pub fn k(&self) -> u32 {
        self.k
    }
}

pub trait TextEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f32>;
}

#[derive(Clone)]
pub enum Matcher {
    Exact,
    /// Trimmed, case-insensitive equality.
    Uncased,
    /// The trimmed answer starts with the map key.
    Prefix,
    /// Best cosine similarity at or above `threshold`.
    Similarity {
        embedder: Arc<dyn TextEmbedder>,
        threshold: f32,
    },
}

impl fmt::Debug for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Exact => f.write_str("Exact"),
            Matcher::Uncased => f.write_str("Uncased"),
            Matcher::Prefix => f.write_str("Prefix"),
            Matcher::Similarity { threshold, .. } => write!(f, "Similarity({threshold})"),
        }
    }
}

impl Matcher {
    /// Index of the matching label-map entry, if any.
    pub fn find(&self, answer: &str, map: &LabelMap) -> Option<usize> {
        let keys = map.entries.iter().map(|(k, _)| k.as_str());
        match self {
            Matcher::Exact => keys.clone().position(|k| k == answer),
            Matcher::Uncased => {
                let a = answer.trim().to_lowercase();
                keys.clone().position(|k| k.trim().to_lowercase() == a)
            }
            Matcher::Prefix => {
                let a = answer.trim();
                keys.clone().position(|k| !k.is_empty() && a.starts_with(k))
            }
            Matcher::Similarity { embedder, threshold } => {
                let a = embedder.embed(answer);
                let mut best: Option<(usize, f32)> = None;
                for (i, k) in keys.enumerate() {
                    let s = cosine(&a, &embedder.embed(k));
                    if s >= *threshold && best.is_none_or(|(_, b)| s > b) {
                        best = Some((i, s));
                    }
                }
                best.map(|(i, _)| i)
            }
        }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Averaged content-free scores per candidate, in candidate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    candidates: Vec<String>,
    content_free: Vec<f64>,
}

impl Calibration {
    pub fn new(candidates: Vec<String>, content_free: Vec<f64>) -> Result<Self, VoterError> {
        assert_eq!(candidates.len(), content_free.len(), "one content-free score per candidate");
        for (c, p) in candidates.iter().zip(&content_free) {
            if *p == 0.0 {
                return Err(VoterError::Degenerate(c.clone()));
            }
            if !(p.is_finite() && *p > 0.0) {
                return Err(VoterError::BadWeight(c.clone()));
            }
        }
        Ok(Calibration { candidates, content_free })
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    pub fn content_free(&self) -> &[f64] {
        &self.content_free
    }

    /// Per-candidate weights `1 / p_cf`.
    pub fn weights(&self) -> Vec<f64> {
        self.content_free.iter().map(|p| 1.0 / p).collect()
    }

    /// Calibrated, renormalized scores in candidate order, or `None` when the
    /// response ranks a different candidate set.
    pub fn apply(&self, response: &RankedResponse) -> Option<Vec<f64>> {
        if response.scores.len() != self.candidates.len()
            || !self.candidates.iter().all(|c| response.scores.contains_key(c))
        {
            return None;
        }
        Some(calibrate_scores(&response.scores_in_order(&self.candidates), &self.content_free))
    }
}

/// `q_c ∝ p_c / p_cf_c`, renormalized. A zero total yields all zeros.
pub fn calibrate_scores(scores: &[f64], content_free: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = scores.iter().zip(content_free).map(|(p, cf)| p / cf).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.into_iter().map(|x| x / total).collect()
    } else {
        raw
    }
}

#[derive(Debug, Clone)]
pub struct Voter {
    label_map: LabelMap,
    matcher: Matcher,
    calibration: Option<Calibration>,
}

impl Voter {
    pub fn new(label_map: LabelMap, matcher: Matcher) -> Self {
        Voter { label_map, matcher, calibration: None }
    }

    pub fn with_calibration(mut self, calibration: Calibration) -> Self {
        self.calibration = Some(calibration);
        self
    }

    pub fn label_map(&self) -> &LabelMap {
        &self.label_map
    }

    pub fn calibration(&self) -> Option<&Calibration> {
        self.calibration.as_ref()
    }

    /// The answer text a response is matched on. Ranked responses use the
    /// calibrated argmax when calibration applies.
    pub fn answer<'r>(&self, response: &'r Response) -> &'r str {
        match response {
            Response::Completion(c) => &c.prediction,
            Response::Ranked(r) => match self.calibration.as_ref().and_then(|cal| cal.apply(r).map(|q| (cal, q))) {
                Some((cal, q)) => {
                    let best = &cal.candidates[argmax(&q)];
                    r.scores.get_key_value(best).map(|(k, _)| k.as_str()).expect("candidate present")
                }
                None => &r.prediction,
            },
        }
    }

    pub fn vote(&self, response: &Response) -> Vote {
        self.matcher
            .find(self.answer(response), &self.label_map)
            .map_or(Vote::Abstain, |i| self.label_map.entries[i].1.clone())
    }

    /// Runs `template` on each content-free input and stores the averaged
    /// candidate scores as calibration.
    pub fn calibrate(
        self,
        client: &Client,
        template: &StringTemplate,
        content_free: &[&str],
    ) -> Result<Voter, VoterError> {
        let calibration = calibrate(client, template, content_free)?;
        Ok(self.with_calibration(calibration))
    }
}

pub fn calibrate(client: &Client, template: &StringTemplate, content_free: &[&str]) -> Result<Calibration, VoterError> {
    if !template.is_ranked() {
        return Err(VoterError::NotRanked);
    }
    if content_free.is_empty() {
        return Err(VoterError::NoContentFree);
    }
    // An input that renders to an empty prompt (e.g. "" in a bare "[[text]]"
    // template) carries no query and is skipped.
    let mut queries = Vec::new();
    for cf in content_free {
        match template.apply_uniform(cf) {
            Ok(q) => queries.push(q),
            Err(TemplateError::Query(QueryError::EmptyPrompt)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if queries.is_empty() {
        return Err(VoterError::NoContentFree);
    }
    let candidates = match &queries[0] {
        Query::Ranked(q) => q.candidates.clone(),
        Query::Completion(_) => return Err(VoterError::NotRanked),
    };
    if queries.iter().any(|q| !matches!(q, Query::Ranked(r) if r.candidates == candidates)) {
        return Err(VoterError::CandidateMismatch);
    }
    let responses = client.run(&queries)?;
    let mut mean = vec![0.0; candidates.len()];
    for r in &responses {
        let Response::Ranked(r) = r else { return Err(VoterError::UnexpectedResponse) };
        for (m, p) in mean.iter_mut().zip(r.scores_in_order(&candidates)) {
            *m += p;
        }
    }
    let n = responses.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Calibration::new(candidates, mean)
}

/// `n × m` matrix of votes, row-major: one row per example, one column per
/// voter.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteMatrix {
    votes: Vec<Vote>,
    n: usize,
    m: usize,
    k: u32,
}

impl VoteMatrix {
    pub fn new(rows: Vec<Vec<Vote>>, k: u32) -> Result<Self, VoterError> {
        let m = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return Err(VoterError::LengthMismatch { voter: i, expected: m, found: r.len() });
        }
        let n = rows.len();
        let votes: Vec<Vote> = rows.into_iter().flatten().collect();
        for v in &votes {
            v.check(k)?;
        }
        Ok(VoteMatrix { votes, n, m, k })
    }

    /// From plain integer votes; 0 is abstain.
    pub fn from_ints(rows: &[Vec<u32>], k: u32) -> Result<Self, VoterError> {
        Self::new(
            rows.iter()
                .map(|r| r.iter().map(|&v| if v == 0 { Vote::Abstain } else { Vote::Class(v) }).collect())
                .collect(),
            k,
        )
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_lfs(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn get(&self, row: usize, lf: usize) -> &Vote {
        &self.votes[row * self.m + lf]
    }

    pub fn row(&self, row: usize) -> &[Vote] {
        &self.votes[row * self.m..(row + 1) * self.m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Vote]> {
        (0..self.n).map(move |i| self.row(i))
    }

    /// New matrix with the given LF columns, in order.
    pub fn select_lfs(&self, columns: &[usize]) -> VoteMatrix {
        let rows = self.rows().map(|r| columns.iter().map(|&j| r[j].clone()).collect()).collect();
        VoteMatrix::new(rows, self.k).expect("subset of a valid matrix")
    }

    /// Appends the columns of `other`, which must have as many rows.
    pub fn hstack(&self, other: &VoteMatrix) -> VoteMatrix {
        assert_eq!(self.n, other.n, "row counts differ");
        let rows = self.rows().zip(other.rows()).map(|(a, b)| a.iter().chain(b).cloned().collect()).collect();
        VoteMatrix::new(rows, self.k.max(other.k)).expect("valid parts")
    }

    /// Fraction of rows with at least one non-abstain vote.
    pub fn coverage(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.rows().filter(|r| r.iter().any(|v| !v.is_abstain())).count() as f64 / self.n as f64
    }

    /// Per-LF fraction of non-abstain votes.
    pub fn lf_coverage(&self) -> Vec<f64> {
        (0..self.m)
            .map(|j| {
                if self.n == 0 {
                    0.0
                } else {
                    (0..self.n).filter(|&i| !self.get(i, j).is_abstain()).count() as f64 / self.n as f64
                }
            })
            .collect()
    }

    /// CSV with header `id,lf_<name>...`; sets render as `1|2`, abstain as `0`.
    pub fn to_csv(&self, lf_names: &[String]) -> String {
        assert_eq!(lf_names.len(), self.m, "one name per LF");
        let mut out = String::from("id");
        for name in lf_names {
            out.push_str(",lf_");
            out.push_str(name);
        }
        out.push('\n');
        for (i, row) in self.rows().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Parses the [`VoteMatrix::to_csv`] format.
    pub fn from_csv(text: &str, k: u32) -> Result<VoteMatrix, VoterError> {
        let rows = text
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split(',').skip(1).map(str::parse).collect::<Result<Vec<Vote>, _>>())
            .collect::<Result<Vec<_>, _>>()?;
        VoteMatrix::new(rows, k)
    }
}

/// `votes[i][j] = vote(voters[j], responses[j][i])`.
pub fn build_vote_matrix(voters: &[Voter], responses: &[Vec<Response>]) -> Result<VoteMatrix, VoterError> {
    if voters.len() != responses.len() {
        return Err(VoterError::VoterCount { voters: voters.len(), lists: responses.len() });
    }
    let n = responses.first().map_or(0, Vec::len);
    if let Some((voter, r)) = responses.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(VoterError::LengthMismatch { voter, expected: n, found: r.len() });
    }
    let k = voters.iter().map(|v| v.label_map.k).max().unwrap_or(1);
    let rows = (0..n).map(|i| voters.iter().zip(responses).map(|(v, r)| v.vote(&r[i])).collect()).collect();
    VoteMatrix::new(rows, k)
}
