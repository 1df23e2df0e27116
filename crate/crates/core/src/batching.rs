//! Length-aware dynamic batching.
//!
//! Queries are sorted by token length (longest first) and packed greedily so
//! that `batch_size * longest_in_batch` stays within a token budget. Items
//! longer than the budget run alone. Responses are scattered back to input
//! order, so batching never changes what the caller sees.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::backend::{to_response, Backend, BackendError, Capabilities};
use crate::client::{Engine, EngineError};
use crate::query::{Query, Response};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BatchError {
    #[error("token budget must be at least 1")]
    ZeroBudget,
    #[error("max batch size must be at least 1")]
    ZeroMaxBatch,
    #[error("worker count must be at least 1")]
    ZeroWorkers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchConfig {
    pub token_budget: usize,
    pub max_batch: usize,
    pub workers: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig { token_budget: 4096, max_batch: 64, workers: 1 }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<(), BatchError> {
        if self.token_budget == 0 {
            return Err(BatchError::ZeroBudget);
        }
        if self.max_batch == 0 {
            return Err(BatchError::ZeroMaxBatch);
        }
        if self.workers == 0 {
            return Err(BatchError::ZeroWorkers);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub token_budget: usize,
    pub lengths: Vec<usize>,
}

impl BatchPlan {
    /// Greedy plan over length-sorted indices (descending, stable).
    pub fn plan(lengths: &[usize], token_budget: usize, max_batch: usize) -> Result<BatchPlan, BatchError> {
        if token_budget == 0 {
            return Err(BatchError::ZeroBudget);
        }
        if max_batch == 0 {
            return Err(BatchError::ZeroMaxBatch);
        }
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));

        let mut batches = Vec::new();
        let mut current: Vec<usize> = Vec::new();
        let mut longest = 0;
        for i in order {
            let fits = !current.is_empty()
                && current.len() < max_batch
                && (current.len() + 1) * longest.max(lengths[i]) <= token_budget;
            if !fits && !current.is_empty() {
                batches.push(std::mem::take(&mut current));
            }
            if current.is_empty() {
                longest = lengths[i];
            }
            longest = longest.max(lengths[i]);
            current.push(i);
        }
        if !current.is_empty() {
            batches.push(current);
        }
        Ok(BatchPlan { batches, token_budget, lengths: lengths.to_vec() })
    }

    /// Fixed-size batches in input order.
    pub fn fifo(lengths: &[usize], batch_size: usize) -> Result<BatchPlan, BatchError> {
        if batch_size == 0 {
            return Err(BatchError::ZeroMaxBatch);
        }
        let indices: Vec<usize> = (0..lengths.len()).collect();
        Ok(BatchPlan {
            batches: indices.chunks(batch_size).map(<[usize]>::to_vec).collect(),
            token_budget: usize::MAX,
            lengths: lengths.to_vec(),
        })
    }

    fn longest(&self, batch: &[usize]) -> usize {
        batch.iter().map(|&i| self.lengths[i]).max().unwrap_or(0)
    }

    /// Padded tokens: sum over batches of `|b| * max_len(b) - sum(len(b))`.
    pub fn padding_cost(&self) -> usize {
        self.batches.iter().map(|b| b.len() * self.longest(b) - b.iter().map(|&i| self.lengths[i]).sum::<usize>()).sum()
    }

    /// Sum over batches of `|b| * max_len(b)`, the padded token count a
    /// backend actually processes.
    pub fn padded_tokens(&self) -> usize {
        self.batches.iter().map(|b| b.len() * self.longest(b)).sum()
    }

    pub fn total_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Checks the partition and budget invariants.
    pub fn check(&self) -> Result<(), String> {
        let mut seen = vec![false; self.lengths.len()];
        for (n, b) in self.batches.iter().enumerate() {
            if b.is_empty() {
                return Err(format!("batch {n} is empty"));
            }
            for &i in b {
                if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                    return Err(format!("index {i} out of range or repeated"));
                }
            }
            if b.len() > 1 && b.len() * self.longest(b) > self.token_budget {
                return Err(format!("batch {n} exceeds the token budget"));
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(format!("index {i} is not covered")),
            None => Ok(()),
        }
    }
}

/// Token lengths from the backend tokenizer, falling back to the
/// whitespace estimate.
pub fn token_lengths(backend: &dyn Backend, queries: &[Query]) -> Vec<usize> {
    queries.iter().map(|q| backend.token_length(q).unwrap_or_else(|| q.estimated_tokens()).max(1)).collect()
}

/// Runs `plan` against `backend`. Batches are dispatched in plan order
/// (concurrently when `workers > 1`) and responses are returned in query
/// order. A batch that fails with memory pressure is re-planned at half the
/// budget, down to its longest item; a single query that still fails is a
/// hard error.
pub fn execute(
    backend: &dyn Backend,
    queries: &[Query],
    plan: &BatchPlan,
    workers: usize,
) -> Result<Vec<Response>, EngineError> {
    let results: Mutex<Vec<Option<Response>>> = Mutex::new(vec![None; queries.len()]);
    let run = |batch: &[usize]| run_batch(backend, queries, &plan.lengths, batch, plan.token_budget, &results);

    if workers <= 1 || plan.batches.len() <= 1 {
        for batch in &plan.batches {
            run(batch)?;
        }
    } else {
        let next = AtomicUsize::new(0);
        let errors: Mutex<Vec<(usize, EngineError)>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..workers.min(plan.batches.len()) {
                scope.spawn(|| loop {
                    let n = next.fetch_add(1, Ordering::SeqCst);
                    let Some(batch) = plan.batches.get(n) else { break };
                    if let Err(e) = run(batch) {
                        errors.lock().expect("error lock").push((n, e));
                    }
                });
            }
        });
        let mut errors = errors.into_inner().expect("error lock");
        errors.sort_by_key(|(n, _)| *n);
        if let Some((_, e)) = errors.into_iter().next() {
            return Err(e);
        }
    }

    let results = results.into_inner().expect("result lock");
    let missing: Vec<usize> = results.iter().enumerate().filter(|(_, r)| r.is_none()).map(|(i, _)| i).collect();
    if !missing.is_empty() {
        return Err(EngineError::new(missing, BackendError::Other("plan did not cover every query".into())));
    }
    Ok(results.into_iter().map(|r| r.expect("checked above")).collect())
}

fn run_batch(
    backend: &dyn Backend,
    queries: &[Query],
    lengths: &[usize],
    batch: &[usize],
    budget: usize,
    results: &Mutex<Vec<Option<Response>>>,
) -> Result<(), EngineError> {
    let items: Vec<Query> = batch.iter().map(|&i| queries[i].clone()).collect();
    match backend.infer_batch(&items) {
        Ok(raw) => {
            if raw.len() != items.len() {
                return Err(EngineError::new(
                    batch.to_vec(),
                    BackendError::Decode(format!("{} outputs for {} queries", raw.len(), items.len())),
                ));
            }
            let responses = items
                .iter()
                .zip(raw)
                .map(|(q, r)| to_response(q, r))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EngineError::new(batch.to_vec(), e))?;
            let mut out = results.lock().expect("result lock");
            for (&i, r) in batch.iter().zip(responses) {
                out[i] = Some(r);
            }
            Ok(())
        }
        Err(BackendError::MemoryPressure { .. }) if batch.len() > 1 => {
            let longest = batch.iter().map(|&i| lengths[i]).max().unwrap_or(1);
            let mut reduced = (budget / 2).max(longest);
            if reduced >= budget {
                reduced = longest;
            }
            log::warn!("memory pressure on a batch of {}; re-planning at budget {reduced}", batch.len());
            let sub_lengths: Vec<usize> = batch.iter().map(|&i| lengths[i]).collect();
            let sub = BatchPlan::plan(&sub_lengths, reduced, batch.len()).expect("budget and size are positive");
            for sub_batch in &sub.batches {
                let mapped: Vec<usize> = sub_batch.iter().map(|&j| batch[j]).collect();
                run_batch(backend, queries, lengths, &mapped, reduced, results)?;
            }
            Ok(())
        }
        Err(e) => Err(EngineError::new(batch.to_vec(), e)),
    }
}

/// In-process engine: plans by token length and executes on a backend.
pub struct LocalEngine {
    backend: Arc<dyn Backend>,
    config: BatchConfig,
}

impl LocalEngine {
    pub fn new(backend: Arc<dyn Backend>, config: BatchConfig) -> Self {
        LocalEngine { backend, config }
    }

    pub fn try_new(backend: Arc<dyn Backend>, config: BatchConfig) -> Result<Self, BatchError> {
        config.validate()?;
        Ok(Self::new(backend, config))
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn config(&self) -> BatchConfig {
        self.config
    }

    pub fn plan_for(&self, queries: &[Query]) -> BatchPlan {
        BatchPlan::plan(&token_lengths(self.backend.as_ref(), queries), self.config.token_budget, self.config.max_batch)
            .expect("validated config")
    }
}

impl Engine for LocalEngine {
    fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    fn capabilities(&self) -> Capabilities {
        self.backend.capabilities()
    }

    fn execute(&self, queries: &[Query]) -> Result<Vec<Response>, EngineError> {
        let plan = self.plan_for(queries);
        execute(self.backend.as_ref(), queries, &plan, self.config.workers)
    }
}
