//! Image-caption corpora: ingestion, embeddings, matching scores, cleaning.

mod embedding;
mod matrix;

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub use embedding::{EmbeddingProvider, HashingEmbedder, SidecarEmbeddings, SidecarRecord};
pub use matrix::EmbeddingMatrix;

use crate::rng::sha256_hex;

/// Default matching-score threshold; pairs scoring lower are dropped.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 30.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus source: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty feature sequence")]
    EmptyFeatures,
    #[error("feature row {row} has dimension {found}, expected {expected}")]
    RaggedFeatures { row: usize, expected: usize, found: usize },
    #[error("degenerate embedding")]
    DegenerateEmbedding,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("image {0} has no matching score")]
    MissingScore(ImageId),
    #[error("image {0} has no embedding")]
    MissingEmbedding(ImageId),
    #[error("malformed sidecar line {line}: {reason}")]
    Sidecar { line: usize, reason: String },
    #[error("malformed embedding store: {0}")]
    Store(String),
}

/// Opaque, corpus-unique image identifier derived from the image uri.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageId(pub String);

impl ImageId {
    /// Stable id for a uri: `img-` followed by the first 16 hex digits of its SHA-256.
    pub fn from_uri(uri: &str) -> Self {
        ImageId(format!("img-{}", &sha256_hex(uri)[..16]))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ImageId {
    fn from(s: &str) -> Self {
        ImageId(s.to_string())
    }
}

/// One image-caption pair, the atomic input of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionedImage {
    pub image_id: ImageId,
    pub uri: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matching_score: Option<f64>,
    /// Externalised to `embeddings.bin` when the corpus is written to a workspace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
}

impl CaptionedImage {
    pub fn new(uri: impl Into<String>, caption: impl Into<String>) -> Self {
        let uri = uri.into();
        CaptionedImage {
            image_id: ImageId::from_uri(&uri),
            uri,
            caption: caption.into(),
            matching_score: None,
            embedding: None,
        }
    }
}

/// Returns true if `text` contains an image-tag opener or closer.
pub fn contains_reserved_tag(text: &str) -> bool {
    text.contains("<img") || text.contains("</img")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    /// `caption<TAB>uri` per line.
    Tsv,
    /// `{"caption": ..., "uri": ...}` per line.
    JsonLines,
}

impl SourceFormat {
    /// Guess from a file name, falling back to TSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => SourceFormat::JsonLines,
            _ => SourceFormat::Tsv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub images: Vec<CaptionedImage>,
    pub skipped: Vec<SkippedRecord>,
    /// Records dropped because their uri was already ingested.
    pub duplicates: usize,
}

#[derive(Deserialize)]
struct JsonPair {
    caption: Option<String>,
    #[serde(alias = "url")]
    uri: Option<String>,
}

fn parse_record(line: &str, format: SourceFormat) -> Result<(String, String), String> {
    let (caption, uri) = match format {
        SourceFormat::Tsv => {
            let mut fields = line.splitn(2, '\t');
            let caption = fields.next().unwrap_or_default();
            let uri = fields.next().ok_or("missing tab separator")?;
            (caption.to_string(), uri.to_string())
        }
        SourceFormat::JsonLines => {
            let rec: JsonPair = serde_json::from_str(line).map_err(|e| e.to_string())?;
            (
                rec.caption.ok_or("missing caption field")?,
                rec.uri.ok_or("missing uri field")?,
            )
        }
    };
    let caption = caption.trim();
    let uri = uri.trim();
    if caption.is_empty() {
        return Err("empty caption".into());
    }
    if uri.is_empty() {
        return Err("empty uri".into());
    }
    if contains_reserved_tag(caption) {
        return Err("caption contains a reserved image-tag substring".into());
    }
    Ok((caption.to_string(), uri.to_string()))
}

/// Read caption pairs from `source`. Malformed records are skipped with a
/// warning; only an unreadable source is an error.
pub fn ingest_pairs<R: BufRead>(source: R, format: SourceFormat) -> Result<IngestReport, CorpusError> {
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line, format) {
            Ok((caption, uri)) => {
                let image = CaptionedImage::new(uri, caption);
                if seen.insert(image.image_id.clone()) {
                    report.images.push(image);
                } else {
                    report.duplicates += 1;
                }
            }
            Err(reason) => {
                warn!(line = lineno, %reason, "skipping malformed record");
                report.skipped.push(SkippedRecord { line: lineno, reason });
            }
        }
    }
    Ok(report)
}

/// Column-wise mean over a `t x d` feature matrix.
pub fn mean_pool<R: AsRef<[f32]>>(token_features: &[R]) -> Result<Vec<f32>, CorpusError> {
    let first = token_features.first().ok_or(CorpusError::EmptyFeatures)?;
    let dim = first.as_ref().len();
    let mut sums = vec![0f64; dim];
    for (row, features) in token_features.iter().enumerate() {
        let features = features.as_ref();
        if features.len() != dim {
            return Err(CorpusError::RaggedFeatures { row, expected: dim, found: features.len() });
        }
        for (s, &x) in sums.iter_mut().zip(features) {
            *s += f64::from(x);
        }
    }
    let t = token_features.len() as f64;
    Ok(sums.into_iter().map(|s| (s / t) as f32).collect())
}

/// Image-caption agreement on a -100..100 scale: 100 times the cosine similarity.
pub fn compute_matching_score(image_embedding: &[f32], caption_embedding: &[f32]) -> Result<f64, CorpusError> {
    if image_embedding.len() != caption_embedding.len() {
        return Err(CorpusError::DimensionMismatch {
            left: image_embedding.len(),
            right: caption_embedding.len(),
        });
    }
    let mut dot = 0f64;
    let mut na = 0f64;
    let mut nb = 0f64;
    for (&a, &b) in image_embedding.iter().zip(caption_embedding) {
        let (a, b) = (f64::from(a), f64::from(b));
        dot += a * b;
        na += a * a;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(CorpusError::DegenerateEmbedding);
    }
    Ok((100.0 * dot / (na.sqrt() * nb.sqrt())).clamp(-100.0, 100.0))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScorePartition {
    pub retained: Vec<CaptionedImage>,
    pub rejected: Vec<CaptionedImage>,
}

/// Split scored images at `threshold`; a score equal to the threshold is retained.
pub fn filter_by_score(images: Vec<CaptionedImage>, threshold: f64) -> Result<ScorePartition, CorpusError> {
    if let Some(unscored) = images.iter().find(|img| img.matching_score.is_none()) {
        return Err(CorpusError::MissingScore(unscored.image_id.clone()));
    }
    let (retained, rejected) = images
        .into_iter()
        .partition(|img| img.matching_score.is_some_and(|s| s >= threshold));
    Ok(ScorePartition { retained, rejected })
}

/// Attach an image embedding and a matching score to every image.
///
/// Embeddings come from `sidecar` when it has an entry for the image and from
/// `provider` otherwise. Runs in parallel; output order equals input order.
pub fn embed_and_score(
    images: Vec<CaptionedImage>,
    sidecar: Option<&SidecarEmbeddings>,
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<Vec<CaptionedImage>, CorpusError> {
    use rayon::prelude::*;
    images
        .into_par_iter()
        .map(|mut img| {
            let entry = sidecar.and_then(|s| s.get(&img.image_id));
            let image_vec = match (entry, provider) {
                (Some(e), _) => e.embedding.clone(),
                (None, Some(p)) => p.embed_image(&img.uri)?,
                (None, None) => return Err(CorpusError::MissingEmbedding(img.image_id.clone())),
            };
            let caption_vec = match (entry.and_then(|e| e.caption_embedding.clone()), provider) {
                (Some(v), _) => v,
                (None, Some(p)) => p.embed_text(&img.caption)?,
                (None, None) => return Err(CorpusError::MissingEmbedding(img.image_id.clone())),
            };
            img.matching_score = Some(compute_matching_score(&image_vec, &caption_vec)?);
            img.embedding = Some(image_vec);
            Ok(img)
        })
        .collect()
}
