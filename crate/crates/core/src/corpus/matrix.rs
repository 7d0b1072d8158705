use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CaptionedImage, CorpusError, ImageId};

/// Row-major `f32` embedding table with an id index.
///
/// On disk: `embeddings.bin` holds little-endian `f32` rows back to back, the
/// index JSON holds the dimension and the id of each row. Row `i` starts at
/// byte offset `i * dimension * 4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub dimension: usize,
    pub ids: Vec<ImageId>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    dimension: usize,
    count: usize,
    dtype: String,
    ids: Vec<ImageId>,
}

impl EmbeddingMatrix {
    /// Collect embeddings from images; every image must carry one of equal dimension.
    pub fn from_images(images: &[CaptionedImage]) -> Result<Self, CorpusError> {
        let mut dimension = None;
        let mut ids = Vec::with_capacity(images.len());
        let mut data = Vec::new();
        for img in images {
            let emb = img.embedding.as_ref().ok_or_else(|| CorpusError::MissingEmbedding(img.image_id.clone()))?;
            let d = *dimension.get_or_insert(emb.len());
            if emb.len() != d {
                return Err(CorpusError::DimensionMismatch { left: d, right: emb.len() });
            }
            ids.push(img.image_id.clone());
            data.extend_from_slice(emb);
        }
        Ok(EmbeddingMatrix { dimension: dimension.unwrap_or(0), ids, data })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ImageId, &[f32])> {
        self.ids.iter().enumerate().map(move |(i, id)| (id, self.row(i)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn index_json(&self) -> String {
        let index = IndexFile {
            dimension: self.dimension,
            count: self.ids.len(),
            dtype: "f32le".into(),
            ids: self.ids.clone(),
        };
        serde_json::to_string_pretty(&index).expect("index serialises")
    }

    pub fn read(bin: &Path, index: &Path) -> Result<Self, CorpusError> {
        let index: IndexFile = serde_json::from_slice(&fs::read(index)?).map_err(|e| CorpusError::Store(e.to_string()))?;
        let bytes = fs::read(bin)?;
        if index.dtype != "f32le" || index.ids.len() != index.count || bytes.len() != index.count * index.dimension * 4 {
            return Err(CorpusError::Store(format!(
                "{} bytes do not match {} rows of dimension {}",
                bytes.len(),
                index.count,
                index.dimension
            )));
        }
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(EmbeddingMatrix { dimension: index.dimension, ids: index.ids, data })
    }
}
