use std::collections::HashMap;
use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, ImageId};
use crate::rng::{derive_seed, rng_from_seed};

/// Source of image and text embeddings in a shared space of dimension `dimension()`.
///
/// Implementations must be deterministic for identical inputs and configuration.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_image(&self, uri: &str) -> Result<Vec<f32>, CorpusError>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, CorpusError>;
}

/// Deterministic offline provider.
///
/// Text is embedded by signed feature hashing of lowercase word tokens; images
/// get a pseudo-random unit vector keyed by uri. Useful for plumbing tests, not
/// for meaningful scores.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    seed: u64,
}

impl HashingEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashingEmbedder { dimension, seed }
    }

    fn normalize(mut v: Vec<f32>) -> Vec<f32> {
        let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x = (f64::from(*x) / norm) as f32);
        }
        v
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn name(&self) -> &str {
        "hashing-mock"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_image(&self, uri: &str) -> Result<Vec<f32>, CorpusError> {
        let mut rng = rng_from_seed(derive_seed(self.seed, uri, 0));
        let v = (0..self.dimension).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Ok(Self::normalize(v))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, CorpusError> {
        let mut v = vec![0f32; self.dimension];
        let mut any = false;
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
        {
            let h = derive_seed(self.seed, &token, 1);
            let slot = (h % self.dimension as u64) as usize;
            v[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
            any = true;
        }
        if !any {
            v[(derive_seed(self.seed, text, 2) % self.dimension as u64) as usize] = 1.0;
        }
        Ok(Self::normalize(v))
    }
}

/// One line of an embedding sidecar file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidecarRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<ImageId>,
    /// Alternative key; the id is derived from it when `image_id` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
    pub embedding: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_embedding: Option<Vec<f32>>,
}

/// Precomputed embeddings keyed by image id, loaded from JSON lines.
#[derive(Debug, Clone, Default)]
pub struct SidecarEmbeddings {
    dimension: Option<usize>,
    entries: HashMap<ImageId, SidecarRecord>,
}

impl SidecarEmbeddings {
    pub fn load<R: BufRead>(source: R) -> Result<Self, CorpusError> {
        let mut out = SidecarEmbeddings::default();
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| CorpusError::Sidecar { line: i + 1, reason };
            let rec: SidecarRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let id = match (&rec.image_id, &rec.uri) {
                (Some(id), _) => id.clone(),
                (None, Some(uri)) => ImageId::from_uri(uri),
                (None, None) => return Err(bad("record has neither image_id nor uri".into())),
            };
            let dim = *out.dimension.get_or_insert(rec.embedding.len());
            if rec.embedding.len() != dim || rec.caption_embedding.as_ref().is_some_and(|c| c.len() != dim) {
                return Err(bad(format!("expected dimension {dim}")));
            }
            if rec.embedding.iter().any(|x| !x.is_finite()) {
                return Err(bad("non-finite embedding component".into()));
            }
            out.entries.insert(id, rec);
        }
        Ok(out)
    }

    pub fn get(&self, id: &ImageId) -> Option<&SidecarRecord> {
        self.entries.get(id)
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
