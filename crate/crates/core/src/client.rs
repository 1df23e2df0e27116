//! The query client: capability checks, response caching, and dispatch to an
//! [`Engine`] (local batched execution or a remote server).

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::backend::{BackendError, Capabilities, Capability};
use crate::cache::ResponseCache;
use crate::canonical::Digest32;
use crate::query::{Query, Response};

/// Failure of an engine on part of a query list. `indices` are positions in
/// the slice handed to [`Engine::execute`].
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{error} (queries {indices:?})")]
pub struct EngineError {
    pub indices: Vec<usize>,
    #[source]
    pub error: BackendError,
}

impl EngineError {
    pub fn new(indices: Vec<usize>, error: BackendError) -> Self {
        EngineError { indices, error }
    }

    pub fn is_retryable(&self) -> bool {
        self.error.is_retryable()
    }
}

/// Executes whole query lists; responses come back in query order.
pub trait Engine: Send + Sync {
    fn model_id(&self) -> &str;
    fn capabilities(&self) -> Capabilities;
    fn execute(&self, queries: &[Query]) -> Result<Vec<Response>, EngineError>;
}

macro_rules! forward_engine {
    ($ptr:ident) => {
        impl<E: Engine + ?Sized> Engine for $ptr<E> {
            fn model_id(&self) -> &str {
                (**self).model_id()
            }

            fn capabilities(&self) -> Capabilities {
                (**self).capabilities()
            }

            fn execute(&self, queries: &[Query]) -> Result<Vec<Response>, EngineError> {
                (**self).execute(queries)
            }
        }
    };
}

forward_engine!(Arc);
forward_engine!(Box);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("queries outside backend capabilities: {0:?}")]
    Unsupported(Vec<(usize, Capability)>),
    #[error("query {index}: cannot read image: {message}")]
    Image { index: usize, message: String },
    #[error("backend failed on queries {indices:?}: {source}")]
    Backend {
        indices: Vec<usize>,
        #[source]
        source: BackendError,
    },
    #[error("engine returned {found} responses for {expected} queries")]
    ResponseCount { expected: usize, found: usize },
    #[error("cache i/o error: {0}")]
    Cache(#[from] std::io::Error),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Backend { source, .. } if source.is_retryable())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClientStats {
    pub requested: u64,
    pub cache_hits: u64,
    /// Queries actually sent to the engine.
    pub backend_queries: u64,
    pub engine_calls: u64,
}

impl ClientStats {
    pub fn hit_rate(&self) -> f64 {
        if self.requested == 0 {
            0.0
        } else {
            self.cache_hits as f64 / self.requested as f64
        }
    }
}

pub struct Client {
    engine: Box<dyn Engine>,
    cache: Option<ResponseCache>,
    cache_sampled: bool,
    // One in-flight engine call per client.
    dispatch: Mutex<()>,
    requested: AtomicU64,
    hits: AtomicU64,
    backend_queries: AtomicU64,
    engine_calls: AtomicU64,
}

enum Slot {
    Ready(Response),
    Pending(usize),
}

impl Client {
    /// Client with an in-memory cache.
    pub fn new(engine: impl Engine + 'static) -> Self {
        Self::build(Box::new(engine), Some(ResponseCache::in_memory()))
    }

    pub fn with_cache(engine: impl Engine + 'static, cache: ResponseCache) -> Self {
        Self::build(Box::new(engine), Some(cache))
    }

    pub fn uncached(engine: impl Engine + 'static) -> Self {
        Self::build(Box::new(engine), None)
    }

    fn build(engine: Box<dyn Engine>, cache: Option<ResponseCache>) -> Self {
        Client {
            engine,
            cache,
            cache_sampled: false,
            dispatch: Mutex::new(()),
            requested: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            backend_queries: AtomicU64::new(0),
            engine_calls: AtomicU64::new(0),
        }
    }

    /// Also cache completions sampled at nonzero temperature.
    pub fn cache_sampled(mut self, yes: bool) -> Self {
        self.cache_sampled = yes;
        self
    }

    pub fn model_id(&self) -> &str {
        self.engine.model_id()
    }

    pub fn capabilities(&self) -> Capabilities {
        self.engine.capabilities()
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats {
            requested: self.requested.load(Ordering::SeqCst),
            cache_hits: self.hits.load(Ordering::SeqCst),
            backend_queries: self.backend_queries.load(Ordering::SeqCst),
            engine_calls: self.engine_calls.load(Ordering::SeqCst),
        }
    }

    pub fn run_one(&self, query: &Query) -> Result<Response, ClientError> {
        Ok(self.run(std::slice::from_ref(query))?.remove(0))
    }

    /// Runs every query and returns responses in query order. The cache is
    /// consulted first; identical cacheable queries are sent to the engine
    /// once.
    pub fn run(&self, queries: &[Query]) -> Result<Vec<Response>, ClientError> {
        let caps = self.engine.capabilities();
        let unsupported: Vec<(usize, Capability)> = queries
            .iter()
            .enumerate()
            .map(|(i, q)| (i, q.required_capability()))
            .filter(|(_, c)| !caps.supports(*c))
            .collect();
        if !unsupported.is_empty() {
            return Err(ClientError::Unsupported(unsupported));
        }
        self.requested.fetch_add(queries.len() as u64, Ordering::SeqCst);

        let model_id = self.engine.model_id().to_string();
        let mut slots = Vec::with_capacity(queries.len());
        let mut pending: Vec<(usize, Option<Digest32>)> = Vec::new();
        let mut by_key: HashMap<Digest32, usize> = HashMap::new();
        for (index, query) in queries.iter().enumerate() {
            let cacheable = self.cache.is_some() && (self.cache_sampled || query.is_deterministic());
            if !cacheable {
                slots.push(Slot::Pending(pending.len()));
                pending.push((index, None));
                continue;
            }
            let key = query.cache_key(&model_id).map_err(|e| ClientError::Image { index, message: e.to_string() })?;
            if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
                self.hits.fetch_add(1, Ordering::SeqCst);
                slots.push(Slot::Ready(hit));
            } else if let Some(&p) = by_key.get(&key) {
                slots.push(Slot::Pending(p));
            } else {
                by_key.insert(key, pending.len());
                slots.push(Slot::Pending(pending.len()));
                pending.push((index, Some(key)));
            }
        }

        let fresh = if pending.is_empty() {
            Vec::new()
        } else {
            let batch: Vec<Query> = pending.iter().map(|(i, _)| queries[*i].clone()).collect();
            let _guard = self.dispatch.lock().expect("dispatch lock");
            self.engine_calls.fetch_add(1, Ordering::SeqCst);
            self.backend_queries.fetch_add(batch.len() as u64, Ordering::SeqCst);
            let out = self.engine.execute(&batch).map_err(|e| ClientError::Backend {
                indices: e.indices.iter().map(|&p| pending[p].0).collect(),
                source: e.error,
            })?;
            if out.len() != batch.len() {
                return Err(ClientError::ResponseCount { expected: batch.len(), found: out.len() });
            }
            out
        };

        if let Some(cache) = &self.cache {
            for ((_, key), response) in pending.iter().zip(&fresh) {
                if let Some(key) = key {
                    cache.put(*key, response.clone())?;
                }
            }
        }

        Ok(slots
            .into_iter()
            .map(|s| match s {
                Slot::Ready(r) => r,
                Slot::Pending(p) => fresh[p].clone(),
            })
            .collect())
    }
}
