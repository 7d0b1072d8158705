use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tower_http::services::ServeDir;
use tracing::{error, info};

use mmdialog_core::pipeline::{
    export_conversation, prepare_iteration, stats_with_annotations, ExportedConversation, ExportedImage, ExportedTurn,
    ACCEPTED,
};
use mmdialog_core::postproc::FilterVerdict;
use mmdialog_core::seedset::{
    Annotation, AnnotationInput, Batch, Characteristic, ErrorTag, QualityLabel, QueueStatus, SeedState, EVENT_LOG,
};
use mmdialog_core::stats::DatasetStats;
use mmdialog_core::workspace::Stage;
use mmdialog_core::Conversation;

use crate::auth::{Capability, Session};
use crate::error::ApiError;
use crate::{AppState, Generation, StoredReply, Writer, OPENAPI, REPLY_CAPACITY};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const REPLAYED_HEADER: &str = "idempotent-replayed";

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/healthz", get(healthz))
        .route("/api/openapi.json", get(openapi))
        .route("/api/iterations", get(list_iterations).post(start_iteration))
        .route("/api/iterations/{k}/queue", get(queue))
        .route("/api/iterations/{k}/promote", post(promote))
        .route("/api/conversations/{id}", get(conversation))
        .route("/api/conversations/{id}/annotation", post(annotate))
        .route("/api/seedset", get(seed_set))
        .route("/api/stats", get(stats))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state);
    let api = match ui_dir.filter(|d| d.is_dir()) {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api.route("/ui", get(ui_missing)).route("/ui/{*rest}", get(ui_missing)),
    };
    api.layer(middleware::from_fn(log_request))
}

// method, path and status only: headers carry bearer tokens
async fn log_request(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let res = next.run(req).await;
    info!(%method, %path, status = res.status().as_u16(), "request");
    res
}

async fn ui_missing() -> ApiError {
    ApiError::not_found("no UI bundle configured (serve --ui-dir DIR)")
}

async fn openapi() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/json")], OPENAPI)
}

// ---- views ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum BatchState {
    Generating,
    Failed,
    Open,
    Closed,
}

#[derive(Debug, Clone, Default, Serialize)]
struct Progress {
    generated: usize,
    rejected: usize,
    total: usize,
    pending: usize,
    annotated: usize,
}

fn progress(state: &SeedState, batch: &Batch) -> Progress {
    let annotated =
        batch.items.iter().filter(|i| state.queue_status(&i.conversation.id) == QueueStatus::Annotated).count();
    Progress {
        generated: batch.generated_total,
        rejected: batch.rejected,
        total: batch.items.len(),
        pending: batch.items.len() - annotated,
        annotated,
    }
}

fn promoted_count(state: &SeedState, batch: &Batch) -> usize {
    batch
        .items
        .iter()
        .filter(|i| state.effective_annotation(&i.conversation.id).is_some_and(|a| a.quality.is_promotable()))
        .count()
}

#[derive(Serialize)]
struct GenerationView {
    state: &'static str,
    iteration: Option<u32>,
    error: Option<String>,
}

impl From<&Generation> for GenerationView {
    fn from(g: &Generation) -> Self {
        match g {
            Generation::Idle => GenerationView { state: "idle", iteration: None, error: None },
            Generation::Running { iteration } => {
                GenerationView { state: "generating", iteration: Some(*iteration), error: None }
            }
            Generation::Failed { iteration, error } => {
                GenerationView { state: "failed", iteration: Some(*iteration), error: Some(error.clone()) }
            }
        }
    }
}

#[derive(Serialize)]
struct IterationSummary {
    iteration: u32,
    state: BatchState,
    bootstrap: bool,
    progress: Progress,
    /// Excellent + Satisfactory items; for closed batches, what promotion added.
    promotable: usize,
}

#[derive(Serialize)]
struct IterationsView {
    /// Completed promotions.
    completed: u32,
    frozen: bool,
    freeze_after: u32,
    seed_set_size: usize,
    generation: GenerationView,
    can_start: bool,
    can_promote: bool,
    iterations: Vec<IterationSummary>,
}

#[derive(Serialize)]
struct QueueEntry {
    conversation_id: String,
    status: QueueStatus,
    turns: Vec<ExportedTurn>,
    roster: Vec<ExportedImage>,
    verdict: FilterVerdict,
    annotation: Option<Annotation>,
}

#[derive(Serialize)]
struct QueueView {
    iteration: u32,
    state: BatchState,
    bootstrap: bool,
    frozen: bool,
    promotable: bool,
    error: Option<String>,
    progress: Progress,
    items: Vec<QueueEntry>,
}

#[derive(Serialize)]
struct ConversationView {
    iteration: u32,
    status: QueueStatus,
    in_seed_set: bool,
    conversation: ExportedConversation,
    verdict: FilterVerdict,
    /// The winning annotation: the latest by any annotator.
    annotation: Option<Annotation>,
    annotations: Vec<Annotation>,
}

#[derive(Serialize)]
struct SeedView {
    conversation: ExportedConversation,
    quality: QualityLabel,
    characteristics: std::collections::BTreeSet<Characteristic>,
    annotator: String,
    iteration: u32,
}

#[derive(Serialize)]
struct SeedSetView {
    completed: u32,
    frozen: bool,
    freeze_after: u32,
    size: usize,
    examples: Vec<SeedView>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationBody {
    quality: QualityLabel,
    #[serde(default)]
    characteristics: std::collections::BTreeSet<Characteristic>,
    #[serde(default)]
    error_tags: std::collections::BTreeSet<ErrorTag>,
}

// ---- reads ------------------------------------------------------------

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Value> {
    let w = state.writer.lock().await;
    let snap = w.store.snapshot();
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "completed": snap.iteration,
        "frozen": snap.frozen,
        "generation": GenerationView::from(&w.generation).state,
    }))
}

async fn list_iterations(State(state): State<Arc<AppState>>, _s: Session) -> Json<IterationsView> {
    let w = state.writer.lock().await;
    let snap = w.store.snapshot();
    let mut iterations: Vec<IterationSummary> = snap
        .closed_batches
        .iter()
        .map(|b| (b, BatchState::Closed))
        .chain(snap.open_batch.iter().map(|b| (b, BatchState::Open)))
        .map(|(b, st)| IterationSummary {
            iteration: b.iteration,
            state: st,
            bootstrap: b.bootstrap,
            progress: progress(&snap, b),
            promotable: promoted_count(&snap, b),
        })
        .collect();
    match &w.generation {
        Generation::Running { iteration } | Generation::Failed { iteration, .. } => {
            let state = if matches!(w.generation, Generation::Running { .. }) {
                BatchState::Generating
            } else {
                BatchState::Failed
            };
            iterations.push(IterationSummary {
                iteration: *iteration,
                state,
                bootstrap: false,
                progress: Progress::default(),
                promotable: 0,
            });
        }
        Generation::Idle => {}
    }
    let idle = !matches!(w.generation, Generation::Running { .. });
    Json(IterationsView {
        completed: snap.iteration,
        frozen: snap.frozen,
        freeze_after: snap.freeze_after,
        seed_set_size: snap.seed_set.len(),
        generation: GenerationView::from(&w.generation),
        can_start: idle && snap.check_can_start().is_ok(),
        can_promote: !snap.frozen && snap.open_batch.is_some() && snap.pending_ids().is_empty(),
        iterations,
    })
}

async fn queue(
    State(state): State<Arc<AppState>>,
    _s: Session,
    UrlPath(k): UrlPath<u32>,
) -> Result<Json<QueueView>, ApiError> {
    let w = state.writer.lock().await;
    let snap = w.store.snapshot();
    let empty = |state: BatchState, error: Option<String>| QueueView {
        iteration: k,
        state,
        bootstrap: false,
        frozen: snap.frozen,
        promotable: false,
        error,
        progress: Progress::default(),
        items: Vec::new(),
    };
    match &w.generation {
        Generation::Running { iteration } if *iteration == k => return Ok(Json(empty(BatchState::Generating, None))),
        Generation::Failed { iteration, error } if *iteration == k && snap.open_batch.is_none() => {
            return Ok(Json(empty(BatchState::Failed, Some(error.clone()))))
        }
        _ => {}
    }
    let (batch, st) = match &snap.open_batch {
        Some(b) if b.iteration == k => (b, BatchState::Open),
        _ => (
            snap.closed_batches
                .iter()
                .find(|b| b.iteration == k)
                .ok_or_else(|| ApiError::not_found(format!("iteration {k} has no batch")))?,
            BatchState::Closed,
        ),
    };
    let items = batch
        .items
        .iter()
        .map(|item| {
            let exported = export_conversation(&item.conversation);
            QueueEntry {
                conversation_id: item.conversation.id.clone(),
                status: snap.queue_status(&item.conversation.id),
                turns: exported.turns,
                roster: exported.roster,
                verdict: item.verdict.clone(),
                annotation: snap.effective_annotation(&item.conversation.id).cloned(),
            }
        })
        .collect();
    let progress = progress(&snap, batch);
    Ok(Json(QueueView {
        iteration: k,
        state: st,
        bootstrap: batch.bootstrap,
        frozen: snap.frozen,
        promotable: st == BatchState::Open && !snap.frozen && progress.pending == 0,
        error: None,
        progress,
        items,
    }))
}

async fn conversation(
    State(state): State<Arc<AppState>>,
    _s: Session,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ConversationView>, ApiError> {
    let snap = state.snapshot().await;
    let (batch, item) = snap.find_item(&id).ok_or_else(|| ApiError::not_found(format!("unknown conversation {id}")))?;
    let annotations = snap
        .annotations
        .iter()
        .filter(|((c, _), _)| *c == id)
        .map(|(_, a)| a.clone())
        .collect();
    Ok(Json(ConversationView {
        iteration: batch.iteration,
        status: snap.queue_status(&id),
        in_seed_set: snap.seed_set.iter().any(|e| e.conversation.id == id),
        conversation: export_conversation(&item.conversation),
        verdict: item.verdict.clone(),
        annotation: snap.effective_annotation(&id).cloned(),
        annotations,
    }))
}

async fn seed_set(State(state): State<Arc<AppState>>, _s: Session) -> Json<SeedSetView> {
    let snap = state.snapshot().await;
    Json(SeedSetView {
        completed: snap.iteration,
        frozen: snap.frozen,
        freeze_after: snap.freeze_after,
        size: snap.seed_set.len(),
        examples: snap
            .seed_set
            .iter()
            .map(|e| SeedView {
                conversation: export_conversation(&e.conversation),
                quality: e.quality,
                characteristics: e.characteristics.clone(),
                annotator: e.annotator.clone(),
                iteration: e.iteration,
            })
            .collect(),
    })
}

/// Same computation as the `stats` stage, over live annotations.
async fn stats(State(state): State<Arc<AppState>>, _s: Session) -> Result<Json<DatasetStats>, ApiError> {
    let snap = state.snapshot().await;
    let ws = Arc::clone(&state.ws);
    let redactor = state.redactor.clone();
    let result = tokio::task::spawn_blocking(move || {
        let conversations: Vec<Conversation> =
            if ws.path(ACCEPTED).exists() { ws.read_jsonl(ACCEPTED)? } else { Vec::new() };
        let has_log = ws.seedset_dir().join(EVENT_LOG).exists();
        Ok::<_, mmdialog_core::workspace::PipelineError>(stats_with_annotations(
            &conversations,
            has_log.then_some(&*snap),
        ))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;
    result.map(Json).map_err(|e| ApiError::internal(redactor.redact(&e.to_string())))
}

// ---- mutations --------------------------------------------------------

fn idempotency_key(headers: &HeaderMap) -> Result<Option<String>, ApiError> {
    let Some(v) = headers.get(IDEMPOTENCY_HEADER) else { return Ok(None) };
    let key = v.to_str().map_err(|_| ApiError::bad_request("Idempotency-Key must be visible ASCII"))?.trim();
    if key.is_empty() || key.len() > 255 {
        return Err(ApiError::bad_request("Idempotency-Key must hold 1 to 255 characters"));
    }
    Ok(Some(key.to_string()))
}

fn fingerprint(route: &str, body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(route.as_bytes());
    h.update([0]);
    h.update(body);
    hex::encode(h.finalize())
}

fn reply(status: StatusCode, body: Value, replayed: bool) -> Response {
    let mut res = (status, Json(body)).into_response();
    if replayed {
        res.headers_mut().insert(REPLAYED_HEADER, HeaderValue::from_static("true"));
    }
    res
}

impl Writer {
    /// The stored reply for a retried request, if any.
    fn replay(&self, session: &Session, key: Option<&str>, fingerprint: &str) -> Result<Option<Response>, ApiError> {
        let Some(key) = key else { return Ok(None) };
        match self.replies.get(&(session.annotator.clone(), key.to_string())) {
            Some(r) if r.fingerprint == fingerprint => Ok(Some(reply(r.status, r.body.clone(), true))),
            Some(_) => Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "idempotency key reused",
                "this Idempotency-Key was already used for a different request",
            )),
            None => Ok(None),
        }
    }

    fn remember(
        &mut self,
        session: &Session,
        key: Option<String>,
        fingerprint: String,
        status: StatusCode,
        body: Value,
    ) -> Response {
        if let Some(key) = key {
            let slot = (session.annotator.clone(), key);
            if self.replies.len() >= REPLY_CAPACITY {
                if let Some(old) = self.reply_order.pop_front() {
                    self.replies.remove(&old);
                }
            }
            self.reply_order.push_back(slot.clone());
            self.replies.insert(slot, StoredReply { fingerprint, status, body: body.clone() });
        }
        reply(status, body, false)
    }
}

async fn annotate(
    State(state): State<Arc<AppState>>,
    session: Session,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    session.require(Capability::Annotate)?;
    let key = idempotency_key(&headers)?;
    let fp = fingerprint(&format!("annotate {id}"), &body);
    let mut w = state.writer.lock().await;
    if let Some(r) = w.replay(&session, key.as_deref(), &fp)? {
        return Ok(r);
    }
    let parsed: AnnotationBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid annotation", e.to_string()))?;
    let annotation = w.store.submit_annotation(AnnotationInput {
        conversation_id: id,
        quality: parsed.quality,
        characteristics: parsed.characteristics,
        error_tags: parsed.error_tags,
        annotator: session.annotator.clone(),
    })?;
    info!(conversation = %annotation.conversation_id, annotator = %annotation.annotator, seq = annotation.seq, "annotation recorded");
    let body = serde_json::to_value(&annotation).expect("annotations serialise");
    Ok(w.remember(&session, key, fp, StatusCode::OK, body))
}

async fn start_iteration(
    State(state): State<Arc<AppState>>,
    session: Session,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    session.require(Capability::Iterate)?;
    let key = idempotency_key(&headers)?;
    let fp = fingerprint("start", &body);
    let mut w = state.writer.lock().await;
    if let Some(r) = w.replay(&session, key.as_deref(), &fp)? {
        return Ok(r);
    }
    if let Generation::Running { iteration } = w.generation {
        return Err(ApiError::conflict("generation in progress", format!("iteration {iteration} is being generated")));
    }
    let snap = w.store.snapshot();
    snap.check_can_start()?;
    if !state.ws.manifest().completed(Stage::Cluster) {
        return Err(ApiError::conflict("workspace not ready", "run the ingest, score and cluster stages first"));
    }
    let iteration = snap.iteration;
    w.generation = Generation::Running { iteration };
    spawn_generation(Arc::clone(&state), snap, iteration);
    info!(iteration, by = %session.annotator, "generation started");
    let body = json!({"iteration": iteration, "state": "generating"});
    Ok(w.remember(&session, key, fp, StatusCode::ACCEPTED, body))
}

fn spawn_generation(state: Arc<AppState>, snap: Arc<SeedState>, iteration: u32) {
    tokio::spawn(async move {
        let ws = Arc::clone(&state.ws);
        let outcome = tokio::task::spawn_blocking(move || prepare_iteration(&ws, &snap)).await;
        let mut w = state.writer.lock().await;
        let failed = |error: String| {
            error!(iteration, %error, "generation failed");
            Generation::Failed { iteration, error }
        };
        w.generation = match outcome {
            Ok(Ok((batch, report))) => match w.store.start_iteration(batch) {
                Ok(_) => {
                    info!(iteration, queued = report.queued, generated = report.generated_total, "batch ready");
                    Generation::Idle
                }
                Err(e) => failed(state.redactor.redact(&e.to_string())),
            },
            Ok(Err(e)) => failed(state.redactor.redact(&e.to_string())),
            Err(_) => failed("generation worker panicked".into()),
        };
    });
}

async fn promote(
    State(state): State<Arc<AppState>>,
    session: Session,
    UrlPath(k): UrlPath<u32>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    session.require(Capability::Iterate)?;
    let key = idempotency_key(&headers)?;
    let fp = fingerprint(&format!("promote {k}"), &body);
    let mut w = state.writer.lock().await;
    if let Some(r) = w.replay(&session, key.as_deref(), &fp)? {
        return Ok(r);
    }
    let snap = w.store.snapshot();
    if snap.frozen {
        return Err(mmdialog_core::seedset::SeedError::Frozen.into());
    }
    match &snap.open_batch {
        Some(b) if b.iteration == k => {}
        Some(b) => {
            return Err(ApiError::conflict(
                "wrong iteration",
                format!("iteration {} is open, not {k}", b.iteration),
            ))
        }
        None => return Err(mmdialog_core::seedset::SeedError::NoOpenBatch.into()),
    }
    let delta = w.store.promote_and_advance()?;
    info!(iteration = k, promoted = delta.promoted.len(), size = delta.seed_set_size, frozen = delta.frozen, "promoted");
    let body = serde_json::to_value(&delta).expect("deltas serialise");
    Ok(w.remember(&session, key, fp, StatusCode::OK, body))
}
