//! Cache of encoded representations, keyed by `SHA-256(modality || 0x1F ||
//! content)`, so each distinct image or caption is encoded once per server.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use crate::backend::{Backend, BackendError, Capabilities, Capability, RawOutput};
use crate::canonical::{self, Digest32};
use crate::query::{Payload, Query};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    fn tag(self) -> &'static [u8] {
        match self {
            Modality::Image => b"image",
            Modality::Text => b"text",
        }
    }
}

#[derive(Debug, Default)]
pub struct ReprCache {
    entries: RwLock<HashMap<Digest32, Arc<Vec<f32>>>>,
}

impl ReprCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(modality: Modality, content: &[u8]) -> Digest32 {
        canonical::sha256_joined(&[modality.tag(), content])
    }

    /// Returns the cached vector or encodes, stores and returns it. Failed
    /// encodings are not stored.
    pub fn get_or_encode<E>(
        &self,
        content: &[u8],
        modality: Modality,
        encode: impl FnOnce(&[u8]) -> Result<Vec<f32>, E>,
    ) -> Result<Arc<Vec<f32>>, E> {
        let key = Self::key(modality, content);
        if let Some(v) = self.entries.read().expect("repr cache lock").get(&key) {
            return Ok(v.clone());
        }
        let vector = Arc::new(encode(content)?);
        // A concurrent encoder may have stored the same key; keep the first.
        Ok(self.entries.write().expect("repr cache lock").entry(key).or_insert(vector).clone())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("repr cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.write().expect("repr cache lock").clear();
    }
}

/// A model with separate image and text encoders whose outputs are compared
/// by cosine similarity (the contrastive vision-language pattern).
pub trait DualEncoder: Send + Sync {
    fn model_id(&self) -> &str;
    fn encode_image(&self, bytes: &[u8]) -> Result<Vec<f32>, String>;
    fn encode_text(&self, text: &str) -> Result<Vec<f32>, String>;

    /// Multiplier applied to cosine similarities before the softmax.
    fn logit_scale(&self) -> f64 {
        100.0
    }
}

/// Backend that ranks candidates against an image or text payload using
/// cached encodings.
pub struct DualEncoderBackend<E> {
    encoder: E,
    cache: ReprCache,
}

impl<E: DualEncoder> DualEncoderBackend<E> {
    pub fn new(encoder: E) -> Self {
        DualEncoderBackend { encoder, cache: ReprCache::new() }
    }

    pub fn encoder(&self) -> &E {
        &self.encoder
    }

    pub fn cache(&self) -> &ReprCache {
        &self.cache
    }

    fn encode(&self, content: &[u8], modality: Modality) -> Result<Arc<Vec<f32>>, BackendError> {
        self.cache
            .get_or_encode(content, modality, |bytes| match modality {
                Modality::Image => self.encoder.encode_image(bytes),
                Modality::Text => self.encoder.encode_text(std::str::from_utf8(bytes).expect("text content is utf-8")),
            })
            .map_err(BackendError::Other)
    }

    fn rank(&self, payload: &Payload, candidates: &[String]) -> Result<Vec<f64>, BackendError> {
        let anchor = match payload {
            Payload::Image(path) => {
                let bytes = std::fs::read(path)
                    .map_err(|e| BackendError::Image { path: path.clone(), message: e.to_string() })?;
                self.encode(&bytes, Modality::Image)?
            }
            Payload::Text(text) => self.encode(text.as_bytes(), Modality::Text)?,
        };
        candidates
            .iter()
            .map(|c| {
                let v = self.encode(c.as_bytes(), Modality::Text)?;
                Ok(self.encoder.logit_scale() * cosine(&anchor, &v))
            })
            .collect()
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl<E: DualEncoder> Backend for DualEncoderBackend<E> {
    fn model_id(&self) -> &str {
        self.encoder.model_id()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::of(&[Capability::RankText, Capability::RankImage])
    }

    fn infer_batch(&self, queries: &[Query]) -> Result<Vec<RawOutput>, BackendError> {
        queries
            .iter()
            .map(|q| match q {
                Query::Ranked(r) => self.rank(&r.payload, &r.candidates).map(RawOutput::Logits),
                Query::Completion(_) => Err(BackendError::Unsupported(Capability::Complete)),
            })
            .collect()
    }
}

/// Deterministic stand-in encoder: each vector is derived from the SHA-256
/// of the modality and content. Counts its invocations.
#[derive(Debug)]
pub struct HashEncoder {
    model_id: String,
    dim: usize,
    image_calls: AtomicUsize,
    text_calls: AtomicUsize,
}

impl HashEncoder {
    pub fn new(model_id: impl Into<String>, dim: usize) -> Self {
        HashEncoder {
            model_id: model_id.into(),
            dim,
            image_calls: AtomicUsize::new(0),
            text_calls: AtomicUsize::new(0),
        }
    }

    pub fn image_calls(&self) -> usize {
        self.image_calls.load(Ordering::SeqCst)
    }

    pub fn text_calls(&self) -> usize {
        self.text_calls.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.image_calls() + self.text_calls()
    }

    fn vector(&self, modality: Modality, content: &[u8]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dim);
        let mut block = 0u32;
        while out.len() < self.dim {
            let digest = canonical::sha256_joined(&[modality.tag(), content, &block.to_be_bytes()]);
            out.extend(digest.iter().map(|b| *b as f32 / 127.5 - 1.0).take(self.dim - out.len()));
            block += 1;
        }
        out
    }
}

impl DualEncoder for HashEncoder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn encode_image(&self, bytes: &[u8]) -> Result<Vec<f32>, String> {
        self.image_calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.vector(Modality::Image, bytes))
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f32>, String> {
        self.text_calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.vector(Modality::Text, text.as_bytes()))
    }
}
