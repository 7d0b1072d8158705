//! Stage runners over a [`Workspace`], plus the refinement-iteration driver.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{info, warn};

use crate::clustering::{kmeans, prune_outlier_clusters, GroupSampler, ImageGroup, TopicCluster};
use crate::config::BackendKind;
use crate::convparse::{parse_transcript, Conversation, ParseDefect, Provenance, Roster, Segment};
use crate::corpus::{
    embed_and_score, filter_by_score, ingest_pairs, CaptionedImage, EmbeddingMatrix, EmbeddingProvider,
    HashingEmbedder, ImageId, SidecarEmbeddings, SourceFormat,
};
use crate::gateway::{AuditLog, ChatBackend, Gateway, HttpBackend, MockBackend};
use crate::postproc::{run_filter_pipeline, FilterInput, FilterVerdict};
use crate::promptkit::{
    build_bootstrap_prompt, build_prompt, select_in_context_examples, PromptBundle, PromptError, PromptTemplate,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::seedset::{
    load_seed_examples, GeneratedBatch, IterationState, QueueItem, SeedExample, SeedState, SeedStore,
};
use crate::stats::{csv_tables, dataset_stats, DatasetStats};
use crate::workspace::{PipelineError, Result, Stage, Workspace};

pub const CORPUS: &str = "corpus.jsonl";
pub const INGEST_REPORT: &str = "ingest_report.json";
pub const SCORED: &str = "scored.jsonl";
pub const SCORE_REJECTED: &str = "score_rejected.jsonl";
pub const EMBEDDINGS: &str = "embeddings.bin";
pub const EMBEDDINGS_INDEX: &str = "embeddings.index.json";
pub const CLUSTERS: &str = "clusters.json";
pub const CENTROIDS: &str = "centroids.bin";
pub const PRUNED: &str = "pruned.json";
pub const KMEANS_LOG: &str = "kmeans.json";
pub const GROUPS: &str = "groups.jsonl";
pub const TRANSCRIPTS: &str = "transcripts.jsonl";
pub const GENERATION_LOG: &str = "generation_log.jsonl";
pub const CONVERSATIONS: &str = "conversations.jsonl";
pub const PARSE_DEFECTS: &str = "parse_defects.jsonl";
pub const VERDICTS: &str = "verdicts.jsonl";
pub const ACCEPTED: &str = "accepted.jsonl";
pub const REJECTED: &str = "rejected.jsonl";
pub const STATS: &str = "stats.json";
pub const TABLES_DIR: &str = "tables";
pub const EXPORT: &str = "export/dataset.jsonl";

/// What a stage did, for humans and `--json` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub outputs: Vec<String>,
    pub counts: BTreeMap<String, Value>,
}

impl StageSummary {
    fn new(stage: impl Into<String>, outputs: Vec<String>, counts: Value) -> Self {
        let counts = match counts {
            Value::Object(m) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        StageSummary { stage: stage.into(), outputs, counts }
    }
}

/// Per-run knobs shared by the stages.
#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    /// Run even though the predecessor stage has not completed.
    pub force: bool,
    /// Overrides the config seed for this stage.
    pub seed: Option<u64>,
}

fn stage_seed(ws: &Workspace, opts: &StageOptions) -> u64 {
    opts.seed.unwrap_or(ws.config().seed)
}

pub fn run_ingest(ws: &mut Workspace, source: &Path, opts: &StageOptions) -> Result<StageSummary> {
    let forced = ws.require(Stage::Ingest, opts.force)?;
    let file = File::open(source).map_err(PipelineError::io(format!("open {}", source.display())))?;
    let report = ingest_pairs(BufReader::new(file), SourceFormat::from_path(source))?;
    for s in &report.skipped {
        warn!(line = s.line, reason = %s.reason, "skipped record");
    }
    let outputs = vec![
        ws.write_jsonl(CORPUS, &report.images)?,
        ws.write_json(
            INGEST_REPORT,
            &json!({"source": source.display().to_string(), "images": report.images.len(), "duplicates": report.duplicates, "skipped": report.skipped}),
        )?,
    ];
    ws.complete(Stage::Ingest, None, outputs.clone(), forced)?;
    Ok(StageSummary::new(
        "ingest",
        outputs,
        json!({"images": report.images.len(), "skipped": report.skipped.len(), "duplicates": report.duplicates}),
    ))
}

/// Embed and score the ingested corpus. Embeddings come from `sidecar`
/// when given (every image must be covered) and from the built-in hashing
/// embedder otherwise.
pub fn run_score(ws: &mut Workspace, sidecar: Option<&Path>, opts: &StageOptions) -> Result<StageSummary> {
    let forced = ws.require(Stage::Score, opts.force)?;
    let images: Vec<CaptionedImage> = ws.read_jsonl(CORPUS)?;
    let sidecar = match sidecar {
        Some(p) => {
            let f = File::open(p).map_err(PipelineError::io(format!("open {}", p.display())))?;
            Some(SidecarEmbeddings::load(BufReader::new(f))?)
        }
        None => None,
    };
    let hashing = HashingEmbedder::new(ws.config().embedding_dimension, derive_seed(stage_seed(ws, opts), "embed", 0));
    let provider: Option<&dyn EmbeddingProvider> = if sidecar.is_some() { None } else { Some(&hashing) };
    let provider_name = if sidecar.is_some() { "sidecar".to_string() } else { hashing.name().to_string() };
    let scored = embed_and_score(images, sidecar.as_ref(), provider)?;
    let split = filter_by_score(scored, ws.config().score_threshold)?;
    let matrix = EmbeddingMatrix::from_images(&split.retained)?;
    let strip = |v: &[CaptionedImage]| -> Vec<CaptionedImage> {
        v.iter().map(|i| CaptionedImage { embedding: None, ..i.clone() }).collect()
    };
    let outputs = vec![
        ws.write_jsonl(SCORED, strip(&split.retained))?,
        ws.write_jsonl(SCORE_REJECTED, strip(&split.rejected))?,
        ws.write_artifact(EMBEDDINGS, &matrix.to_bytes())?,
        ws.write_artifact(EMBEDDINGS_INDEX, matrix.index_json().as_bytes())?,
    ];
    ws.complete(Stage::Score, opts.seed, outputs.clone(), forced)?;
    Ok(StageSummary::new(
        "score",
        outputs,
        json!({"retained": split.retained.len(), "rejected": split.rejected.len(), "threshold": ws.config().score_threshold, "embeddings": provider_name}),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub cluster_id: u32,
    pub size: usize,
    pub member_ids: Vec<ImageId>,
    /// Byte offset of the centroid in `centroids.bin`.
    pub centroid_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterFile {
    pub dimension: usize,
    pub k: usize,
    pub clusters: Vec<ClusterEntry>,
}

pub fn run_cluster(ws: &mut Workspace, opts: &StageOptions) -> Result<StageSummary> {
    let forced = ws.require(Stage::Cluster, opts.force)?;
    let matrix = EmbeddingMatrix::read(&ws.path(EMBEDDINGS), &ws.path(EMBEDDINGS_INDEX))?;
    let seed = stage_seed(ws, opts);
    let params = crate::clustering::KMeansParams { seed: derive_seed(seed, "kmeans", 0), ..ws.config().kmeans_params() };
    let outcome = kmeans(&matrix, &params)?;
    let dim = matrix.dimension;
    let mut centroids = Vec::with_capacity(outcome.clusters.len() * dim * 4);
    let mut entries = Vec::new();
    for (i, c) in outcome.clusters.iter().enumerate() {
        centroids.extend(c.centroid.iter().flat_map(|x| x.to_le_bytes()));
        entries.push(ClusterEntry {
            cluster_id: c.cluster_id,
            size: c.len(),
            member_ids: c.member_ids.clone(),
            centroid_offset: (i * dim * 4) as u64,
        });
    }
    let pruned = prune_outlier_clusters(outcome.clusters.clone(), ws.config().min_cluster_size);
    let outputs = vec![
        ws.write_json(CLUSTERS, &ClusterFile { dimension: dim, k: params.k, clusters: entries })?,
        ws.write_artifact(CENTROIDS, &centroids)?,
        ws.write_json(
            PRUNED,
            &json!({"min_cluster_size": ws.config().min_cluster_size, "pruned": pruned.pruned, "unsampleable": pruned.unsampleable}),
        )?,
        ws.write_json(
            KMEANS_LOG,
            &json!({"iterations": outcome.iterations, "converged": outcome.converged, "sse_history": outcome.sse_history}),
        )?,
    ];
    ws.complete(Stage::Cluster, opts.seed, outputs.clone(), forced)?;
    Ok(StageSummary::new(
        "cluster",
        outputs,
        json!({"clusters": outcome.clusters.len(), "survivors": pruned.survivors.len(), "pruned": pruned.pruned.len(), "unsampleable_images": pruned.unsampleable.len(), "iterations": outcome.iterations, "final_sse": outcome.final_sse()}),
    ))
}

/// Surviving clusters (centroids included) from the cluster stage.
pub fn load_survivors(ws: &Workspace) -> Result<Vec<TopicCluster>> {
    let file: ClusterFile = ws.read_json(CLUSTERS)?;
    let pruned: Value = ws.read_json(PRUNED)?;
    let pruned_ids: Vec<u64> =
        pruned["pruned"].as_array().into_iter().flatten().filter_map(|p| p["cluster_id"].as_u64()).collect();
    let centroids = std::fs::read(ws.path(CENTROIDS)).map_err(PipelineError::io("read centroids.bin"))?;
    file.clusters
        .into_iter()
        .filter(|c| !pruned_ids.contains(&u64::from(c.cluster_id)))
        .map(|c| {
            let start = c.centroid_offset as usize;
            let bytes = centroids
                .get(start..start + file.dimension * 4)
                .ok_or_else(|| PipelineError::DataQuality(format!("centroid of cluster {} out of range", c.cluster_id)))?;
            let centroid = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            Ok(TopicCluster { cluster_id: c.cluster_id, centroid, member_ids: c.member_ids })
        })
        .collect()
}

pub fn load_catalog(ws: &Workspace) -> Result<HashMap<ImageId, CaptionedImage>> {
    let images: Vec<CaptionedImage> = ws.read_jsonl(SCORED)?;
    Ok(images.into_iter().map(|i| (i.image_id.clone(), i)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub group_id: String,
    pub cluster_id: u32,
    pub images: Vec<CaptionedImage>,
}

impl GroupRecord {
    pub fn group(&self) -> ImageGroup {
        ImageGroup { cluster_id: self.cluster_id, images: self.images.clone() }
    }
}

fn draw_groups(
    sampler: &GroupSampler<'_>,
    catalog: &HashMap<ImageId, CaptionedImage>,
    seed: u64,
    label: &str,
    range: std::ops::Range<usize>,
) -> Result<Vec<(usize, ImageGroup)>> {
    range
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(seed, label, i as u64));
            Ok((i, sampler.sample(catalog, &mut rng)?))
        })
        .collect()
}

pub fn run_sample(ws: &mut Workspace, count: Option<usize>, opts: &StageOptions) -> Result<StageSummary> {
    let forced = ws.require(Stage::Sample, opts.force)?;
    let survivors = load_survivors(ws)?;
    let catalog = load_catalog(ws)?;
    let sampler = GroupSampler::new(&survivors, &ws.config().n_choices)?;
    let count = count.unwrap_or(ws.config().conversations);
    let seed = stage_seed(ws, opts);
    let groups: Vec<GroupRecord> = draw_groups(&sampler, &catalog, seed, "sample", 0..count)?
        .into_iter()
        .map(|(i, g)| GroupRecord { group_id: format!("group-{i:06}"), cluster_id: g.cluster_id, images: g.images })
        .collect();
    let outputs = vec![ws.write_jsonl(GROUPS, &groups)?];
    ws.complete(Stage::Sample, opts.seed, outputs.clone(), forced)?;
    Ok(StageSummary::new(
        "sample",
        outputs,
        json!({"groups": groups.len(), "eligible_clusters": sampler.eligible_clusters()}),
    ))
}

fn template(ws: &Workspace) -> Result<PromptTemplate> {
    Ok(match &ws.config().prompt_template {
        Some(p) => PromptTemplate::load(Path::new(p))?,
        None => PromptTemplate::builtin(),
    })
}

/// The backend the config describes, unless the workspace carries an override.
pub fn backend_for(ws: &Workspace) -> Result<Arc<dyn ChatBackend>> {
    if let Some(b) = ws.backend_override() {
        return Ok(b);
    }
    let cfg = ws.config();
    Ok(match cfg.backend.kind {
        BackendKind::Mock => Arc::new(
            MockBackend::new(derive_seed(cfg.seed, "mock-backend", 0)).with_defect_rate(cfg.backend.mock_defect_rate),
        ),
        BackendKind::Http => Arc::new(
            HttpBackend::new(cfg.backend.http())
                .map_err(|e| PipelineError::Invalid(format!("http backend: {e}")))?,
        ),
    })
}

fn gateway(ws: &Workspace, audit: AuditLog) -> Result<Gateway> {
    let rpm = Some(ws.config().backend.rpm);
    Ok(Gateway::new(backend_for(ws)?, ws.config().sampling()).with_rate_limit(rpm).with_audit(audit))
}

/// A prompt with in-context examples when the seed set allows it, and the
/// bootstrap variant otherwise.
pub fn prompt_for(
    template: &PromptTemplate,
    group: &ImageGroup,
    seed_set: &[SeedExample],
    seed: u64,
) -> Result<PromptBundle> {
    match select_in_context_examples(seed_set, &mut rng_from_seed(seed)) {
        Ok(examples) => Ok(build_prompt(template, group, &examples)?),
        Err(PromptError::Infeasible(_)) => Ok(build_bootstrap_prompt(template, group)?),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub conversation_id: String,
    pub group_id: String,
    pub cluster_id: u32,
    pub prompt_fingerprint: String,
    pub bootstrap: bool,
    /// Conversation ids of the in-context examples.
    pub in_context: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<GenerationError>,
}

struct Job {
    conversation_id: String,
    group_id: String,
    group: ImageGroup,
    prompt_seed: u64,
}

fn generate_jobs(
    ws: &Workspace,
    gw: &Gateway,
    jobs: &[Job],
    seed_set: &[SeedExample],
) -> Result<Vec<TranscriptRecord>> {
    let template = template(ws)?;
    let bundles: Vec<PromptBundle> =
        jobs.iter().map(|j| prompt_for(&template, &j.group, seed_set, j.prompt_seed)).collect::<Result<_>>()?;
    let results = gw.generate_batch(&bundles, ws.config().backend.max_inflight);
    Ok(jobs
        .iter()
        .zip(bundles.iter().zip(results))
        .map(|(job, (bundle, result))| {
            let mut rec = TranscriptRecord {
                conversation_id: job.conversation_id.clone(),
                group_id: job.group_id.clone(),
                cluster_id: job.group.cluster_id,
                prompt_fingerprint: bundle.fingerprint(),
                bootstrap: bundle.in_context_examples.is_empty(),
                in_context: bundle.in_context_examples.iter().map(|e| e.conversation.id.clone()).collect(),
                text: None,
                truncated: false,
                error: None,
            };
            match result {
                Ok(t) => {
                    rec.text = Some(t.text);
                    rec.truncated = t.truncated;
                }
                Err(e) => rec.error = Some(GenerationError { code: e.code().into(), message: e.to_string() }),
            }
            rec
        })
        .collect())
}

/// The seed set for in-context examples: an explicit `seedset.jsonl`, else
/// the workspace store when one exists, else empty.
pub fn load_seed_set(ws: &Workspace, path: Option<&Path>) -> Result<Vec<SeedExample>> {
    if let Some(p) = path {
        return Ok(load_seed_examples(p)?);
    }
    if ws.seedset_dir().join(crate::seedset::EVENT_LOG).exists() {
        return Ok(SeedStore::open(&ws.seedset_dir(), ws.config().freeze_after)?.seed_set().to_vec());
    }
    Ok(Vec::new())
}

pub fn run_generate(ws: &mut Workspace, seedset: Option<&Path>, opts: &StageOptions) -> Result<StageSummary> {
    let forced = ws.require(Stage::Generate, opts.force)?;
    let groups: Vec<GroupRecord> = ws.read_jsonl(GROUPS)?;
    let seed_set = load_seed_set(ws, seedset)?;
    let seed = stage_seed(ws, opts);
    let jobs: Vec<Job> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| Job {
            conversation_id: format!("conv-{i:06}"),
            group_id: g.group_id.clone(),
            group: g.group(),
            prompt_seed: derive_seed(seed, "in-context", i as u64),
        })
        .collect();
    let (audit, log) = AuditLog::in_memory();
    let gw = gateway(ws, audit)?;
    info!(conversations = jobs.len(), backend = gw.backend_name(), "generating");
    let records = generate_jobs(ws, &gw, &jobs, &seed_set)?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    let bootstrap = records.iter().filter(|r| r.bootstrap).count();
    let outputs = vec![ws.write_jsonl(TRANSCRIPTS, &records)?, ws.write_artifact(GENERATION_LOG, &log.contents())?];
    ws.complete(Stage::Generate, opts.seed, outputs.clone(), forced)?;
    Ok(StageSummary::new(
        "generate",
        outputs,
        json!({"transcripts": records.len(), "failed": failed, "bootstrap_prompts": bootstrap, "seed_set": seed_set.len()}),
    ))
}

fn parse_record(rec: &TranscriptRecord, group: &ImageGroup, timestamp: &str) -> Option<Result<Conversation, Vec<ParseDefect>>> {
    let text = rec.text.as_ref()?;
    let provenance = Provenance {
        prompt_fingerprint: rec.prompt_fingerprint.clone(),
        cluster_id: Some(rec.cluster_id),
        generated_at: timestamp.to_string(),
    };
    Some(parse_transcript(&rec.conversation_id, text, Roster::from_group(group), provenance))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectRecord {
    pub conversation_id: String,
    pub defects: Vec<ParseDefect>,
}

pub fn run_parse(ws: &mut Workspace, opts: &StageOptions) -> Result<StageSummary> {
    let forced = ws.require(Stage::Parse, opts.force)?;
    let records: Vec<TranscriptRecord> = ws.read_jsonl(TRANSCRIPTS)?;
    let groups: HashMap<String, GroupRecord> =
        ws.read_jsonl::<GroupRecord>(GROUPS)?.into_iter().map(|g| (g.group_id.clone(), g)).collect();
    let mut conversations = Vec::new();
    let mut defects = Vec::new();
    let mut skipped = 0;
    for rec in &records {
        let group = groups
            .get(&rec.group_id)
            .ok_or_else(|| PipelineError::DataQuality(format!("transcript {} names unknown group", rec.conversation_id)))?;
        match parse_record(rec, &group.group(), ws.timestamp()) {
            Some(Ok(c)) => conversations.push(c),
            Some(Err(d)) => defects.push(DefectRecord { conversation_id: rec.conversation_id.clone(), defects: d }),
            None => skipped += 1,
        }
    }
    let outputs = vec![ws.write_jsonl(CONVERSATIONS, &conversations)?, ws.write_jsonl(PARSE_DEFECTS, &defects)?];
    ws.complete(Stage::Parse, None, outputs.clone(), forced)?;
    Ok(StageSummary::new(
        "parse",
        outputs,
        json!({"conversations": conversations.len(), "with_defects": defects.len(), "generation_failed": skipped}),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub verdict: FilterVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversation: Option<Conversation>,
}

pub fn run_filter(ws: &mut Workspace, opts: &StageOptions) -> Result<StageSummary> {
    let forced = ws.require(Stage::Filter, opts.force)?;
    let records: Vec<TranscriptRecord> = ws.read_jsonl(TRANSCRIPTS)?;
    let mut convs: HashMap<String, Conversation> =
        ws.read_jsonl::<Conversation>(CONVERSATIONS)?.into_iter().map(|c| (c.id.clone(), c)).collect();
    let mut defects: HashMap<String, Vec<ParseDefect>> = ws
        .read_jsonl::<DefectRecord>(PARSE_DEFECTS)?
        .into_iter()
        .map(|d| (d.conversation_id, d.defects))
        .collect();
    let cfg = ws.config().filter();
    let mut verdicts = Vec::new();
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let mut reason_counts: BTreeMap<String, usize> = BTreeMap::new();
    for rec in records.iter().filter(|r| r.text.is_some()) {
        let id = &rec.conversation_id;
        let conv = convs.remove(id);
        let parse_defects = defects.remove(id);
        let verdict = match (&conv, &parse_defects) {
            (Some(c), _) => run_filter_pipeline(&FilterInput { conversation_id: id, parsed: Ok(c), truncated: rec.truncated }, &cfg),
            (None, Some(d)) => run_filter_pipeline(&FilterInput { conversation_id: id, parsed: Err(d), truncated: rec.truncated }, &cfg),
            (None, None) => return Err(PipelineError::DataQuality(format!("no parse result for {id}; rerun parse"))),
        };
        for r in &verdict.reasons {
            *reason_counts.entry(format!("{r:?}")).or_default() += 1;
        }
        verdicts.push(verdict.clone());
        match conv {
            Some(c) if verdict.passed() => accepted.push(c),
            conversation => rejected.push(RejectedRecord { verdict, conversation }),
        }
    }
    let outputs = vec![
        ws.write_jsonl(VERDICTS, &verdicts)?,
        ws.write_jsonl(ACCEPTED, &accepted)?,
        ws.write_jsonl(REJECTED, &rejected)?,
    ];
    ws.complete(Stage::Filter, None, outputs.clone(), forced)?;
    Ok(StageSummary::new(
        "filter",
        outputs,
        json!({"accepted": accepted.len(), "rejected": rejected.len(), "reasons": reason_counts}),
    ))
}

/// Stats over `dataset` (default `accepted.jsonl`) plus the annotation
/// distributions of the workspace seed-set store, when there is one.
pub fn compute_stats(ws: &Workspace, dataset: Option<&Path>) -> Result<DatasetStats> {
    let conversations: Vec<Conversation> = match dataset {
        Some(p) => crate::workspace::read_jsonl_file(p)?,
        None if ws.path(ACCEPTED).exists() => ws.read_jsonl(ACCEPTED)?,
        None => Vec::new(),
    };
    let store = if ws.seedset_dir().join(crate::seedset::EVENT_LOG).exists() {
        Some(SeedStore::open(&ws.seedset_dir(), ws.config().freeze_after)?.snapshot())
    } else {
        None
    };
    Ok(stats_with_annotations(&conversations, store.as_deref()))
}

pub fn stats_with_annotations(conversations: &[Conversation], state: Option<&SeedState>) -> DatasetStats {
    match state {
        Some(s) => dataset_stats(conversations, Some(&s.effective_annotations())),
        None => dataset_stats(conversations, None),
    }
}

pub fn run_stats(ws: &mut Workspace, dataset: Option<&Path>, opts: &StageOptions) -> Result<StageSummary> {
    let forced = if dataset.is_some() { false } else { ws.require(Stage::Stats, opts.force)? };
    let stats = compute_stats(ws, dataset)?;
    let mut outputs = vec![ws.write_json(STATS, &stats)?];
    for (name, bytes) in csv_tables(&stats) {
        outputs.push(ws.write_artifact(&format!("{TABLES_DIR}/{name}"), &bytes)?);
    }
    ws.complete(Stage::Stats, None, outputs.clone(), forced)?;
    let c = &stats.corpus;
    Ok(StageSummary::new(
        "stats",
        outputs,
        json!({"conversations": c.conversation_count, "avg_turns": c.avg_turns, "avg_images": c.avg_images, "diversity_overall": stats.diversity.score_overall}),
    ))
}

/// Self-contained export line: image segments carry the resolved uri.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedConversation {
    pub id: String,
    pub turns: Vec<ExportedTurn>,
    pub roster: Vec<ExportedImage>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedTurn {
    pub instruction: Vec<ExportedSegment>,
    pub response: Vec<ExportedSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ExportedSegment {
    Text { content: String },
    Image { index: u32, description: String, image_id: Option<ImageId>, uri: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedImage {
    pub index: u32,
    pub image_id: ImageId,
    pub uri: String,
    pub caption: String,
}

pub fn export_conversation(c: &Conversation) -> ExportedConversation {
    let seg = |s: &Segment| match s {
        Segment::Text { content } => ExportedSegment::Text { content: content.clone() },
        Segment::ImageRef { index, description } => {
            let entry = c.roster.get(*index);
            ExportedSegment::Image {
                index: *index,
                description: description.clone(),
                image_id: entry.map(|e| e.image_id.clone()),
                uri: entry.map(|e| e.uri.clone()),
            }
        }
    };
    ExportedConversation {
        id: c.id.clone(),
        turns: c
            .turns
            .iter()
            .map(|t| ExportedTurn {
                instruction: t.instruction.iter().map(seg).collect(),
                response: t.response.iter().map(seg).collect(),
            })
            .collect(),
        roster: c
            .roster
            .0
            .iter()
            .map(|(i, e)| ExportedImage { index: *i, image_id: e.image_id.clone(), uri: e.uri.clone(), caption: e.caption.clone() })
            .collect(),
        provenance: c.provenance.clone(),
    }
}

pub fn run_export(ws: &mut Workspace, opts: &StageOptions) -> Result<StageSummary> {
    let forced = ws.require(Stage::Export, opts.force)?;
    let accepted: Vec<Conversation> = ws.read_jsonl(ACCEPTED)?;
    let outputs = vec![ws.write_jsonl(EXPORT, accepted.iter().map(export_conversation))?];
    ws.complete(Stage::Export, None, outputs.clone(), forced)?;
    Ok(StageSummary::new("export", outputs, json!({"conversations": accepted.len()})))
}

/// Outcome of generating one refinement batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub bootstrap: bool,
    pub generated_total: usize,
    pub rejected: usize,
    pub queued: usize,
}

/// Generate, parse and filter until `batch_size` conversations pass, for the
/// iteration after the ones recorded in `state`. Does not touch the store.
pub fn prepare_iteration(ws: &Workspace, state: &SeedState) -> Result<(GeneratedBatch, IterationReport)> {
    state.check_can_start()?;
    if !ws.manifest().completed(Stage::Cluster) {
        return Err(PipelineError::MissingPredecessor { stage: Stage::Sample, missing: Stage::Cluster });
    }
    let cfg = ws.config();
    let iteration = state.iteration;
    let survivors = load_survivors(ws)?;
    let catalog = load_catalog(ws)?;
    let sampler = GroupSampler::new(&survivors, &cfg.n_choices)?;
    std::fs::create_dir_all(ws.seedset_dir()).map_err(PipelineError::io("create seedset dir"))?;
    let audit = AuditLog::append_to(&ws.seedset_dir().join(GENERATION_LOG)).map_err(PipelineError::io("open generation log"))?;
    let gw = gateway(ws, audit)?;
    let label = format!("iteration-{iteration}");
    let budget = cfg.batch_size * cfg.generation_budget_factor;
    let mut items: Vec<QueueItem> = Vec::new();
    let mut generated = 0usize;
    let mut bootstrap = false;
    while items.len() < cfg.batch_size {
        if generated >= budget {
            return Err(PipelineError::DataQuality(format!(
                "iteration {iteration}: only {} of {} conversations passed the filters after {generated} generations",
                items.len(),
                cfg.batch_size
            )));
        }
        let need = (cfg.batch_size - items.len()).min(budget - generated);
        let groups = draw_groups(&sampler, &catalog, cfg.seed, &label, generated..generated + need)?;
        let jobs: Vec<Job> = groups
            .into_iter()
            .map(|(i, group)| Job {
                conversation_id: format!("it{iteration}-{i:04}"),
                group_id: format!("it{iteration}-group-{i:04}"),
                group,
                prompt_seed: derive_seed(cfg.seed, &format!("{label}-in-context"), i as u64),
            })
            .collect();
        let records = generate_jobs(ws, &gw, &jobs, &state.seed_set)?;
        for (job, rec) in jobs.iter().zip(&records) {
            bootstrap |= rec.bootstrap;
            let Some(parsed) = parse_record(rec, &job.group, ws.timestamp()) else { continue };
            let input = match &parsed {
                Ok(c) => FilterInput { conversation_id: &rec.conversation_id, parsed: Ok(c), truncated: rec.truncated },
                Err(d) => FilterInput { conversation_id: &rec.conversation_id, parsed: Err(d), truncated: rec.truncated },
            };
            let verdict = run_filter_pipeline(&input, &cfg.filter());
            if let (true, Ok(conversation)) = (verdict.passed(), parsed) {
                items.push(QueueItem { conversation, verdict });
            }
        }
        generated += need;
    }
    let report = IterationReport {
        iteration,
        bootstrap,
        generated_total: generated,
        rejected: generated - items.len(),
        queued: items.len(),
    };
    let batch = GeneratedBatch { bootstrap, items, generated_total: generated, rejected: report.rejected };
    Ok((batch, report))
}

/// Generate the next batch and queue it in `store`.
pub fn run_iteration(ws: &Workspace, store: &mut SeedStore) -> Result<(IterationState, IterationReport)> {
    let (batch, report) = prepare_iteration(ws, &store.snapshot())?;
    Ok((store.start_iteration(batch)?, report))
}

pub fn open_seed_store(ws: &Workspace) -> Result<SeedStore> {
    Ok(SeedStore::open(&ws.seedset_dir(), ws.config().freeze_after)?)
}

/// Every stage from ingest through stats.
pub fn run_all(ws: &mut Workspace, source: &Path, sidecar: Option<&Path>, opts: &StageOptions) -> Result<Vec<StageSummary>> {
    Ok(vec![
        run_ingest(ws, source, opts)?,
        run_score(ws, sidecar, opts)?,
        run_cluster(ws, opts)?,
        run_sample(ws, None, opts)?,
        run_generate(ws, None, opts)?,
        run_parse(ws, opts)?,
        run_filter(ws, opts)?,
        run_stats(ws, None, opts)?,
    ])
}
