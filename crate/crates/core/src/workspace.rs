//! The on-disk workspace: config snapshot, manifest, and stage artifacts.
//!
//! Every artifact is written to a temporary sibling and renamed into place,
//! and the manifest is rewritten last, so an interrupted stage leaves earlier
//! outputs and the manifest untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusterError;
use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::CorpusError;
use crate::gateway::{ChatBackend, GatewayError};
use crate::promptkit::PromptError;
use crate::rng::sha256_hex;
use crate::seedset::SeedError;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Live seed-set store; managed by its own event log, outside the inventory.
pub const SEEDSET_DIR: &str = "seedset";
/// Hidden; holds outputs of the running stage until it completes.
pub const STAGING_DIR: &str = ".staging";
pub const MANIFEST_VERSION: u32 = 1;

/// Write `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Score,
    Cluster,
    Sample,
    Generate,
    Parse,
    Filter,
    Stats,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Score,
        Stage::Cluster,
        Stage::Sample,
        Stage::Generate,
        Stage::Parse,
        Stage::Filter,
        Stage::Stats,
        Stage::Export,
    ];

    pub fn predecessor(self) -> Option<Stage> {
        match self {
            Stage::Ingest => None,
            Stage::Score => Some(Stage::Ingest),
            Stage::Cluster => Some(Stage::Score),
            Stage::Sample => Some(Stage::Cluster),
            Stage::Generate => Some(Stage::Sample),
            Stage::Parse => Some(Stage::Generate),
            Stage::Filter => Some(Stage::Parse),
            Stage::Stats | Stage::Export => Some(Stage::Filter),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Score => "score",
            Stage::Cluster => "cluster",
            Stage::Sample => "sample",
            Stage::Generate => "generate",
            Stage::Parse => "parse",
            Stage::Filter => "filter",
            Stage::Stats => "stats",
            Stage::Export => "export",
        }
    }

    /// Stages whose outputs a rerun of `self` makes stale.
    pub fn downstream(self) -> Vec<Stage> {
        Stage::ALL.into_iter().filter(|s| s.depends_on(self)).collect()
    }

    fn depends_on(self, other: Stage) -> bool {
        let mut cur = self.predecessor();
        while let Some(s) = cur {
            if s == other {
                return true;
            }
            cur = s.predecessor();
        }
        false
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage {s}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
    /// Ran with `--force` while its predecessor was incomplete.
    #[serde(default)]
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceOverride {
    pub stage: Stage,
    pub missing: Stage,
    pub at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub stages: BTreeMap<Stage, StageRecord>,
    #[serde(default)]
    pub overrides: Vec<ForceOverride>,
    /// Workspace-relative path → content hash.
    pub inventory: BTreeMap<String, FileEntry>,
}

impl Manifest {
    pub fn completed(&self, stage: Stage) -> bool {
        self.stages.contains_key(&stage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    User,
    Environment,
    DataQuality,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::User => 1,
            ErrorKind::Environment => 2,
            ErrorKind::DataQuality => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0} is not an initialised workspace (run `init` first)")]
    NotInitialized(String),
    #[error("{0} is already initialised")]
    AlreadyInitialized(String),
    #[error("stage {stage} needs {missing} to complete first (or pass --force)")]
    MissingPredecessor { stage: Stage, missing: Stage },
    #[error("stale workspace: config.toml changed since the manifest was written (run `init --reconfigure`)")]
    StaleWorkspace,
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("simulated interruption after {0} artifact write(s)")]
    Interrupted(usize),
    #[error("inventory mismatch for {path}: {reason}")]
    Inventory { path: String, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Seed(#[from] SeedError),
    #[error("data quality: {0}")]
    DataQuality(String),
    #[error("{0}")]
    Invalid(String),
}

impl PipelineError {
    pub fn io(context: impl Into<String>) -> impl FnOnce(io::Error) -> PipelineError {
        let context = context.into();
        move |source| PipelineError::Io { context, source }
    }

    pub fn kind(&self) -> ErrorKind {
        use PipelineError::*;
        match self {
            NotInitialized(_) | AlreadyInitialized(_) | MissingPredecessor { .. } | StaleWorkspace | Config(_)
            | Prompt(_) | Invalid(_) => ErrorKind::User,
            Io { .. } | Interrupted(_) | Gateway(_) => ErrorKind::Environment,
            Inventory { .. } | DataQuality(_) => ErrorKind::DataQuality,
            Corpus(CorpusError::Io(_)) => ErrorKind::Environment,
            Corpus(_) => ErrorKind::DataQuality,
            Cluster(ClusterError::ZeroK | ClusterError::InvalidGroupSizes(_)) => ErrorKind::User,
            Cluster(_) => ErrorKind::DataQuality,
            Seed(SeedError::Io(_)) => ErrorKind::Environment,
            Seed(SeedError::Corrupt { .. }) => ErrorKind::DataQuality,
            Seed(_) => ErrorKind::User,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind().exit_code()
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Generation timestamp: `SOURCE_DATE_EPOCH` when set, else the current time.
pub fn resolve_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse::<i64>().ok());
    let t = match secs.and_then(|s| chrono::DateTime::from_timestamp(s, 0)) {
        Some(t) => t,
        None => chrono::Utc::now(),
    };
    t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub struct Workspace {
    root: PathBuf,
    config: PipelineConfig,
    manifest: Manifest,
    timestamp: String,
    backend: Option<Arc<dyn ChatBackend>>,
    fault_after: Option<usize>,
    writes: AtomicUsize,
}

impl fmt::Debug for Workspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Workspace").field("root", &self.root).finish_non_exhaustive()
    }
}

impl Workspace {
    /// Create `root` with a config snapshot and an empty manifest.
    pub fn init(root: &Path, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        if root.join(MANIFEST_FILE).exists() {
            return Err(PipelineError::AlreadyInitialized(root.display().to_string()));
        }
        fs::create_dir_all(root).map_err(PipelineError::io(format!("create {}", root.display())))?;
        write_atomic(&root.join(CONFIG_FILE), config.to_toml().as_bytes())
            .map_err(PipelineError::io("write config.toml"))?;
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            config_hash: config.hash(),
            config: config.clone(),
            stages: BTreeMap::new(),
            overrides: Vec::new(),
            inventory: BTreeMap::new(),
        };
        let ws = Workspace::assemble(root, config, manifest);
        ws.save_manifest()?;
        Ok(ws)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let manifest_path = root.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(PipelineError::NotInitialized(root.display().to_string()));
        }
        let config = PipelineConfig::load(&root.join(CONFIG_FILE))?;
        let text = fs::read_to_string(&manifest_path).map_err(PipelineError::io("read manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| PipelineError::DataQuality(format!("corrupt manifest.json: {e}")))?;
        if manifest.config_hash != config.hash() {
            return Err(PipelineError::StaleWorkspace);
        }
        Ok(Workspace::assemble(root, config, manifest))
    }

    /// Adopt the current `config.toml`, discarding all stage completions.
    pub fn reconfigure(root: &Path) -> Result<Self> {
        let config = PipelineConfig::load(&root.join(CONFIG_FILE))?;
        let text = fs::read_to_string(root.join(MANIFEST_FILE)).map_err(PipelineError::io("read manifest.json"))?;
        let mut manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| PipelineError::DataQuality(format!("corrupt manifest.json: {e}")))?;
        manifest.config_hash = config.hash();
        manifest.config = config.clone();
        manifest.stages.clear();
        let ws = Workspace::assemble(root, config, manifest);
        ws.save_manifest()?;
        Ok(ws)
    }

    /// Adopt `config` for later stages without discarding completed ones.
    /// Stages rerun afterwards invalidate their own downstream as usual.
    pub fn amend_config(&mut self, config: PipelineConfig) -> Result<()> {
        config.validate()?;
        if config == self.config {
            return Ok(());
        }
        write_atomic(&self.root.join(CONFIG_FILE), config.to_toml().as_bytes())
            .map_err(PipelineError::io("write config.toml"))?;
        self.manifest.config_hash = config.hash();
        self.manifest.config = config.clone();
        self.config = config;
        self.save_manifest()
    }

    fn assemble(root: &Path, config: PipelineConfig, manifest: Manifest) -> Self {
        let fault_after = std::env::var("MMDIALOG_FAULT_AFTER_WRITES").ok().and_then(|v| v.parse().ok());
        Workspace {
            root: root.to_path_buf(),
            config,
            manifest,
            timestamp: resolve_timestamp(),
            backend: None,
            fault_after,
            writes: AtomicUsize::new(0),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn timestamp(&self) -> &str {
        &self.timestamp
    }

    pub fn set_timestamp(&mut self, ts: impl Into<String>) {
        self.timestamp = ts.into();
    }

    /// Use this backend instead of the one the config describes.
    pub fn set_backend(&mut self, backend: Arc<dyn ChatBackend>) {
        self.backend = Some(backend);
    }

    pub fn backend_override(&self) -> Option<Arc<dyn ChatBackend>> {
        self.backend.clone()
    }

    /// Fail artifact writes after `n` have succeeded (for interruption tests).
    pub fn inject_fault_after(&mut self, n: Option<usize>) {
        self.fault_after = n;
        self.writes.store(0, Ordering::SeqCst);
    }

    pub fn seedset_dir(&self) -> PathBuf {
        self.root.join(SEEDSET_DIR)
    }

    /// Gate a stage on its predecessor. With `force` the gap is recorded.
    pub fn require(&mut self, stage: Stage, force: bool) -> Result<bool> {
        match stage.predecessor() {
            Some(missing) if !self.manifest.completed(missing) => {
                if !force {
                    return Err(PipelineError::MissingPredecessor { stage, missing });
                }
                self.manifest.overrides.push(ForceOverride { stage, missing, at: now_rfc3339() });
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    /// Stage one artifact and return its relative path. Staged files move
    /// into place only when the stage completes, so an interrupted stage
    /// leaves the outputs of earlier runs untouched.
    pub fn write_artifact(&self, rel: &str, bytes: &[u8]) -> Result<String> {
        let path = self.root.join(STAGING_DIR).join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(PipelineError::io(format!("create {}", parent.display())))?;
        }
        if let Some(limit) = self.fault_after {
            let done = self.writes.fetch_add(1, Ordering::SeqCst);
            if done >= limit {
                // leave a torn file behind, as a killed process would
                let _ = fs::write(&path, &bytes[..bytes.len() / 2]);
                return Err(PipelineError::Interrupted(done));
            }
        }
        write_atomic(&path, bytes).map_err(PipelineError::io(format!("write {rel}")))?;
        Ok(rel.to_string())
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, rel: &str, value: &T) -> Result<String> {
        let mut text = serde_json::to_string_pretty(value).expect("artifacts serialise");
        text.push('\n');
        self.write_artifact(rel, text.as_bytes())
    }

    pub fn write_jsonl<T: Serialize>(&self, rel: &str, items: impl IntoIterator<Item = T>) -> Result<String> {
        let mut out = String::new();
        for item in items {
            out.push_str(&serde_json::to_string(&item).expect("artifacts serialise"));
            out.push('\n');
        }
        self.write_artifact(rel, out.as_bytes())
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let text = fs::read_to_string(self.path(rel)).map_err(PipelineError::io(format!("read {rel}")))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::DataQuality(format!("{rel}: {e}")))
    }

    pub fn read_jsonl<T: DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>> {
        read_jsonl_file(&self.path(rel))
    }

    /// Publish the staged `outputs` of `stage`, hash them into the
    /// inventory, invalidate downstream stages, and persist the manifest.
    pub fn complete(&mut self, stage: Stage, seed: Option<u64>, outputs: Vec<String>, forced: bool) -> Result<()> {
        let mut entries = Vec::with_capacity(outputs.len());
        for rel in &outputs {
            let staged = self.root.join(STAGING_DIR).join(rel);
            let bytes = fs::read(&staged).map_err(PipelineError::io(format!("hash {rel}")))?;
            entries.push((rel.clone(), FileEntry { sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 }));
        }
        // the stage is incomplete while its files are swapped in
        self.manifest.stages.remove(&stage);
        for later in stage.downstream() {
            self.manifest.stages.remove(&later);
        }
        self.save_manifest()?;
        for rel in &outputs {
            let dest = self.path(rel);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent).map_err(PipelineError::io(format!("create {}", parent.display())))?;
            }
            fs::rename(self.root.join(STAGING_DIR).join(rel), &dest).map_err(PipelineError::io(format!("publish {rel}")))?;
        }
        self.manifest.inventory.extend(entries);
        self.manifest.stages.insert(stage, StageRecord { completed_at: now_rfc3339(), seed, outputs, forced });
        self.save_manifest()
    }

    /// Record an output written outside a stage (e.g. an export to a custom path).
    pub fn save_manifest(&self) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        text.push('\n');
        write_atomic(&self.path(MANIFEST_FILE), text.as_bytes()).map_err(PipelineError::io("write manifest.json"))
    }

    /// Re-hash every inventory entry and look for unlisted artifacts.
    pub fn verify(&self) -> Result<()> {
        for (rel, entry) in &self.manifest.inventory {
            let bytes = fs::read(self.path(rel))
                .map_err(|e| PipelineError::Inventory { path: rel.clone(), reason: e.to_string() })?;
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(PipelineError::Inventory { path: rel.clone(), reason: "content hash changed".into() });
            }
        }
        for rel in self.artifact_files()? {
            if !self.manifest.inventory.contains_key(&rel) {
                return Err(PipelineError::Inventory { path: rel, reason: "not in the manifest inventory".into() });
            }
        }
        Ok(())
    }

    /// Workspace files other than config, manifest, the seed-set store,
    /// and hidden temporaries.
    pub fn artifact_files(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).map_err(PipelineError::io(format!("list {}", dir.display())))? {
                let entry = entry.map_err(PipelineError::io("list workspace"))?;
                let path = entry.path();
                let rel = path.strip_prefix(&self.root).expect("under root").to_string_lossy().replace('\\', "/");
                let name = entry.file_name().to_string_lossy().to_string();
                if name.starts_with('.') || rel == CONFIG_FILE || rel == MANIFEST_FILE || rel == SEEDSET_DIR {
                    continue;
                }
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.push(rel);
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

pub fn read_jsonl_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(PipelineError::io(format!("read {}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(PipelineError::io(format!("read {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| PipelineError::DataQuality(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
