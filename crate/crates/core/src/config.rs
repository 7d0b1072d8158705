//! Pipeline configuration: one TOML file holding every tunable constant.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{KMeansParams, DEFAULT_GROUP_SIZES, DEFAULT_K, DEFAULT_MIN_CLUSTER_SIZE};
use crate::corpus::DEFAULT_SCORE_THRESHOLD;
use crate::gateway::{HttpBackendConfig, SamplingParams, DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_TEMPERATURE, DEFAULT_TOP_P};
use crate::postproc::{FilterConfig, DEFAULT_DRIFT_THRESHOLD, DEFAULT_MAX_TURNS};
use crate::rng::sha256_hex;
use crate::seedset::{DEFAULT_BATCH_SIZE, DEFAULT_FREEZE_AFTER};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key; the key itself never
    /// appears in config, manifest, or logs.
    pub credential_env: String,
    pub timeout_secs: u64,
    /// Requests per minute; 0 disables client-side limiting.
    pub rpm: u32,
    pub max_inflight: usize,
    /// Fraction of mock dialogues carrying one planted defect.
    pub mock_defect_rate: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            credential_env: "OPENAI_API_KEY".into(),
            timeout_secs: 120,
            rpm: 0,
            max_inflight: 8,
            mock_defect_rate: 0.2,
        }
    }
}

impl BackendConfig {
    pub fn http(&self) -> HttpBackendConfig {
        HttpBackendConfig {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            credential_env: self.credential_env.clone(),
            timeout_secs: self.timeout_secs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Base seed; every stochastic stage derives its own stream from it.
    pub seed: u64,
    pub score_threshold: f64,
    /// Dimension of the built-in hashing embedder, used without a sidecar.
    pub embedding_dimension: usize,
    pub k: usize,
    pub min_cluster_size: usize,
    pub n_choices: Vec<usize>,
    pub kmeans_max_iters: usize,
    pub kmeans_tolerance: f64,
    pub normalize_embeddings: bool,
    pub top_p: f64,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub drift_threshold: f64,
    pub max_turns: usize,
    /// Conversations drawn by the `sample`/`generate` stages.
    pub conversations: usize,
    pub batch_size: usize,
    /// An iteration gives up after generating this many times `batch_size`
    /// without enough survivors.
    pub generation_budget_factor: usize,
    pub freeze_after: u32,
    /// Prompt template file; the built-in template when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<String>,
    pub backend: BackendConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            embedding_dimension: 64,
            k: DEFAULT_K,
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
            n_choices: DEFAULT_GROUP_SIZES.to_vec(),
            kmeans_max_iters: 100,
            kmeans_tolerance: 1e-4,
            normalize_embeddings: false,
            top_p: DEFAULT_TOP_P,
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            drift_threshold: DEFAULT_DRIFT_THRESHOLD,
            max_turns: DEFAULT_MAX_TURNS,
            conversations: 100,
            batch_size: DEFAULT_BATCH_SIZE,
            generation_budget_factor: 10,
            freeze_after: DEFAULT_FREEZE_AFTER,
            prompt_template: None,
            backend: BackendConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0");
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        if self.n_choices.is_empty() || self.n_choices.contains(&0) {
            return bad("n_choices must be nonempty positive group sizes");
        }
        if !(0.0..=1.0).contains(&self.drift_threshold) {
            return bad("drift_threshold must lie in [0, 1]");
        }
        if self.embedding_dimension == 0 {
            return bad("embedding_dimension must be positive");
        }
        if self.backend.max_inflight == 0 {
            return bad("backend.max_inflight must be positive");
        }
        if !(0.0..=1.0).contains(&self.backend.mock_defect_rate) {
            return bad("backend.mock_defect_rate must lie in [0, 1]");
        }
        if self.generation_budget_factor == 0 {
            return bad("generation_budget_factor must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises"))
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            k: self.k,
            max_iters: self.kmeans_max_iters,
            tolerance: self.kmeans_tolerance,
            seed: self.seed,
            normalize: self.normalize_embeddings,
            parallel: true,
        }
    }

    pub fn sampling(&self) -> SamplingParams {
        SamplingParams { top_p: self.top_p, temperature: self.temperature, max_output_tokens: self.max_output_tokens }
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig { drift_threshold: self.drift_threshold, max_turns: self.max_turns }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = PipelineConfig { seed: 7, k: 12, ..PipelineConfig::default() };
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = PipelineConfig::from_toml("k = 8\n[backend]\nrpm = 30\n").unwrap();
        assert_eq!(cfg.k, 8);
        assert_eq!(cfg.backend.rpm, 30);
        assert_eq!(cfg.min_cluster_size, PipelineConfig::default().min_cluster_size);
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        assert!(PipelineConfig::from_toml("top_p = 0.0").is_err());
        assert!(PipelineConfig::from_toml("temperature = -1.0").is_err());
        assert!(PipelineConfig::from_toml("n_choices = []").is_err());
        assert!(PipelineConfig::from_toml("treshold = 3").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { drift_threshold: 0.2, ..a.clone() };
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
