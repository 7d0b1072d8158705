//! Human-in-the-loop seed set.
//!
//! State lives in an append-only JSON-lines event log (`annotations.log`);
//! the in-memory projection is rebuilt by replaying it, and `seedset.jsonl`
//! is rewritten from the projection after every promotion. Writers go through
//! `&mut SeedStore`; readers take cheap immutable snapshots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::convparse::Conversation;
use crate::postproc::{FilterVerdict, VerdictStatus};
use crate::workspace::write_atomic;

pub const DEFAULT_BATCH_SIZE: usize = 100;
pub const DEFAULT_FREEZE_AFTER: u32 = 3;
pub const EVENT_LOG: &str = "annotations.log";
pub const SEED_SET_FILE: &str = "seedset.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QualityLabel {
    Excellent,
    Satisfactory,
    Poor,
}

impl QualityLabel {
    pub const ALL: [QualityLabel; 3] = [QualityLabel::Excellent, QualityLabel::Satisfactory, QualityLabel::Poor];

    pub fn is_promotable(self) -> bool {
        self != QualityLabel::Poor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Characteristic {
    ImageCreation,
    ImageComparison,
    IntrinsicImageUnderstanding,
    ExtrinsicImageUnderstanding,
}

impl Characteristic {
    pub const ALL: [Characteristic; 4] = [
        Characteristic::ImageCreation,
        Characteristic::ImageComparison,
        Characteristic::IntrinsicImageUnderstanding,
        Characteristic::ExtrinsicImageUnderstanding,
    ];
}

impl fmt::Display for Characteristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for QualityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Why an annotator marked a conversation Poor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorTag {
    ImgCapMismatch,
    Incoherence,
    Hallucination,
}

impl ErrorTag {
    pub const ALL: [ErrorTag; 3] = [ErrorTag::ImgCapMismatch, ErrorTag::Incoherence, ErrorTag::Hallucination];
}

/// A human-approved conversation usable as an in-context demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedExample {
    pub conversation: Conversation,
    pub quality: QualityLabel,
    pub characteristics: BTreeSet<Characteristic>,
    pub annotator: String,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationInput {
    pub conversation_id: String,
    pub quality: QualityLabel,
    #[serde(default)]
    pub characteristics: BTreeSet<Characteristic>,
    #[serde(default)]
    pub error_tags: BTreeSet<ErrorTag>,
    pub annotator: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub conversation_id: String,
    pub annotator: String,
    pub quality: QualityLabel,
    pub characteristics: BTreeSet<Characteristic>,
    #[serde(default)]
    pub error_tags: BTreeSet<ErrorTag>,
    pub iteration: u32,
    /// Log sequence number of the write; the highest wins.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub conversation: Conversation,
    pub verdict: FilterVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueStatus {
    Pending,
    Annotated,
}

/// Output of one generation round, ready to be queued for annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedBatch {
    pub bootstrap: bool,
    pub items: Vec<QueueItem>,
    /// Conversations generated in total, including those the filters rejected.
    pub generated_total: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub iteration: u32,
    pub bootstrap: bool,
    pub items: Vec<QueueItem>,
    pub generated_total: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub iteration: u32,
    pub batch: Vec<String>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub iteration: u32,
    pub promoted: Vec<String>,
    pub seed_set_size: usize,
    pub frozen: bool,
}

// externally tagged: internal tagging buffers content, which cannot
// restore the integer keys of a roster map
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Event {
    IterationStarted { batch: Batch },
    AnnotationSubmitted { annotation: Annotation },
    Promoted { delta: SeedDelta },
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    event: Event,
}

#[derive(Debug, Error)]
pub enum SeedError {
    #[error("seed set frozen")]
    Frozen,
    #[error("unannotated conversations in the current batch: {}", .0.join(", "))]
    PendingAnnotations(Vec<String>),
    #[error("iteration {0} is fully annotated and must be promoted first")]
    AwaitingPromotion(u32),
    #[error("no iteration is in progress")]
    NoOpenBatch,
    #[error("unknown conversation {0}")]
    UnknownConversation(String),
    #[error("conversation {0} is not pending in the current iteration")]
    NotPending(String),
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("conversation {0} did not pass the filters")]
    NotFiltered(String),
    #[error("seed-set I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt event log at line {line}: {reason}. Restore {EVENT_LOG} from a backup or truncate it before line {line}")]
    Corrupt { line: usize, reason: String },
}

/// Projection of the event log.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SeedState {
    /// Completed promotions.
    pub iteration: u32,
    pub frozen: bool,
    pub freeze_after: u32,
    pub open_batch: Option<Batch>,
    pub closed_batches: Vec<Batch>,
    pub seed_set: Vec<SeedExample>,
    /// Latest record per (conversation, annotator).
    pub annotations: BTreeMap<(String, String), Annotation>,
    pub next_seq: u64,
}

impl SeedState {
    /// The winning annotation for a conversation.
    pub fn effective_annotation(&self, conversation_id: &str) -> Option<&Annotation> {
        self.annotations
            .range((conversation_id.to_string(), String::new())..)
            .take_while(|((c, _), _)| c == conversation_id)
            .map(|(_, a)| a)
            .max_by_key(|a| a.seq)
    }

    /// One winning annotation per conversation, in conversation-id order.
    pub fn effective_annotations(&self) -> Vec<&Annotation> {
        let mut best: BTreeMap<&str, &Annotation> = BTreeMap::new();
        for a in self.annotations.values() {
            let slot = best.entry(a.conversation_id.as_str()).or_insert(a);
            if a.seq > slot.seq {
                *slot = a;
            }
        }
        best.into_values().collect()
    }

    pub fn queue_status(&self, conversation_id: &str) -> QueueStatus {
        if self.effective_annotation(conversation_id).is_some() {
            QueueStatus::Annotated
        } else {
            QueueStatus::Pending
        }
    }

    pub fn pending_ids(&self) -> Vec<String> {
        self.open_batch
            .iter()
            .flat_map(|b| b.items.iter())
            .map(|i| i.conversation.id.clone())
            .filter(|id| self.queue_status(id) == QueueStatus::Pending)
            .collect()
    }

    pub fn find_item(&self, conversation_id: &str) -> Option<(&Batch, &QueueItem)> {
        self.open_batch.iter().chain(self.closed_batches.iter()).find_map(|b| {
            b.items.iter().find(|i| i.conversation.id == conversation_id).map(|i| (b, i))
        })
    }

    pub fn iteration_state(&self) -> IterationState {
        IterationState {
            iteration: self.open_batch.as_ref().map_or(self.iteration, |b| b.iteration),
            batch: self.open_batch.iter().flat_map(|b| b.items.iter()).map(|i| i.conversation.id.clone()).collect(),
            frozen: self.frozen,
        }
    }

    /// Checks run before generating a new batch.
    pub fn check_can_start(&self) -> Result<(), SeedError> {
        if self.frozen {
            return Err(SeedError::Frozen);
        }
        if let Some(batch) = &self.open_batch {
            let pending = self.pending_ids();
            return Err(if pending.is_empty() {
                SeedError::AwaitingPromotion(batch.iteration)
            } else {
                SeedError::PendingAnnotations(pending)
            });
        }
        Ok(())
    }

    fn apply(&mut self, seq: u64, event: Event) {
        self.next_seq = seq + 1;
        match event {
            Event::IterationStarted { batch } => self.open_batch = Some(batch),
            Event::AnnotationSubmitted { annotation } => {
                self.annotations.insert((annotation.conversation_id.clone(), annotation.annotator.clone()), annotation);
            }
            Event::Promoted { delta } => {
                if let Some(batch) = self.open_batch.take() {
                    for item in &batch.items {
                        let id = &item.conversation.id;
                        if !delta.promoted.contains(id) {
                            continue;
                        }
                        let Some(a) = self.effective_annotation(id) else { continue };
                        self.seed_set.push(SeedExample {
                            conversation: item.conversation.clone(),
                            quality: a.quality,
                            characteristics: a.characteristics.clone(),
                            annotator: a.annotator.clone(),
                            iteration: batch.iteration,
                        });
                    }
                    self.closed_batches.push(batch);
                }
                self.iteration = delta.iteration;
                self.frozen = delta.frozen;
            }
        }
    }
}

pub struct SeedStore {
    dir: PathBuf,
    state: Arc<SeedState>,
}

impl SeedStore {
    /// Open (or create) the store in `dir`, replaying its event log.
    pub fn open(dir: &Path, freeze_after: u32) -> Result<Self, SeedError> {
        fs::create_dir_all(dir)?;
        let log_path = dir.join(EVENT_LOG);
        let mut state = SeedState { freeze_after, ..SeedState::default() };
        if log_path.exists() {
            let bytes = fs::read(&log_path)?;
            let mut good_len = 0usize;
            let mut reader = BufReader::new(bytes.as_slice());
            let mut line = String::new();
            let mut lineno = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                let torn = !line.ends_with('\n');
                match serde_json::from_str::<LogLine>(line.trim_end()) {
                    Ok(rec) => {
                        state.apply(rec.seq, rec.event);
                        good_len += n;
                    }
                    Err(_) if torn => {
                        warn!(line = lineno, "dropping torn final event-log line");
                        break;
                    }
                    Err(e) => return Err(SeedError::Corrupt { line: lineno, reason: e.to_string() }),
                }
            }
            if good_len < bytes.len() {
                OpenOptions::new().write(true).open(&log_path)?.set_len(good_len as u64)?;
            }
        }
        // a store reopened under a different freeze_after keeps its frozen flag
        if !state.frozen && state.iteration >= freeze_after {
            state.frozen = true;
        }
        Ok(SeedStore { dir: dir.to_path_buf(), state: Arc::new(state) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn snapshot(&self) -> Arc<SeedState> {
        Arc::clone(&self.state)
    }

    pub fn seed_set(&self) -> &[SeedExample] {
        &self.state.seed_set
    }

    fn append(&mut self, event: Event) -> Result<(), SeedError> {
        let seq = self.state.next_seq;
        let line = serde_json::to_string(&LogLine { seq, event: event.clone() }).expect("events serialise");
        let mut file = OpenOptions::new().create(true).append(true).open(self.dir.join(EVENT_LOG))?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
        file.sync_data()?;
        Arc::make_mut(&mut self.state).apply(seq, event);
        Ok(())
    }

    /// Queue a generated batch for annotation as the next iteration.
    pub fn start_iteration(&mut self, generated: GeneratedBatch) -> Result<IterationState, SeedError> {
        self.state.check_can_start()?;
        for item in &generated.items {
            if item.verdict.status != VerdictStatus::Pass {
                return Err(SeedError::NotFiltered(item.conversation.id.clone()));
            }
        }
        let batch = Batch {
            iteration: self.state.iteration,
            bootstrap: generated.bootstrap,
            items: generated.items,
            generated_total: generated.generated_total,
            rejected: generated.rejected,
        };
        self.append(Event::IterationStarted { batch })?;
        Ok(self.state.iteration_state())
    }

    /// Record a label. Re-submitting for the same (conversation, annotator) replaces the earlier record.
    pub fn submit_annotation(&mut self, input: AnnotationInput) -> Result<Annotation, SeedError> {
        if self.state.frozen {
            return Err(SeedError::Frozen);
        }
        let id = &input.conversation_id;
        let Some(batch) = self.state.open_batch.as_ref() else {
            return Err(match self.state.find_item(id) {
                Some(_) => SeedError::NotPending(id.clone()),
                None => SeedError::UnknownConversation(id.clone()),
            });
        };
        if !batch.items.iter().any(|i| &i.conversation.id == id) {
            return Err(match self.state.find_item(id) {
                Some(_) => SeedError::NotPending(id.clone()),
                None => SeedError::UnknownConversation(id.clone()),
            });
        }
        if input.quality.is_promotable() && input.characteristics.is_empty() {
            return Err(SeedError::InvalidAnnotation(format!(
                "{} conversations need at least one characteristic",
                input.quality
            )));
        }
        if input.annotator.trim().is_empty() {
            return Err(SeedError::InvalidAnnotation("annotator id is empty".into()));
        }
        let annotation = Annotation {
            conversation_id: input.conversation_id,
            annotator: input.annotator,
            quality: input.quality,
            characteristics: input.characteristics,
            error_tags: input.error_tags,
            iteration: batch.iteration,
            seq: self.state.next_seq,
        };
        self.append(Event::AnnotationSubmitted { annotation: annotation.clone() })?;
        Ok(annotation)
    }

    /// Move Excellent and Satisfactory items of the finished batch into the
    /// seed set and advance the iteration counter, freezing at `freeze_after`.
    pub fn promote_and_advance(&mut self) -> Result<SeedDelta, SeedError> {
        if self.state.frozen {
            return Err(SeedError::Frozen);
        }
        let batch = self.state.open_batch.as_ref().ok_or(SeedError::NoOpenBatch)?;
        let pending = self.state.pending_ids();
        if !pending.is_empty() {
            return Err(SeedError::PendingAnnotations(pending));
        }
        let promoted: Vec<String> = batch
            .items
            .iter()
            .map(|i| &i.conversation.id)
            .filter(|id| self.state.effective_annotation(id).is_some_and(|a| a.quality.is_promotable()))
            .cloned()
            .collect();
        let iteration = self.state.iteration + 1;
        let delta = SeedDelta {
            iteration,
            seed_set_size: self.state.seed_set.len() + promoted.len(),
            promoted,
            frozen: iteration >= self.state.freeze_after,
        };
        self.append(Event::Promoted { delta: delta.clone() })?;
        self.write_seed_set()?;
        Ok(delta)
    }

    fn write_seed_set(&self) -> Result<(), SeedError> {
        let mut out = String::new();
        for example in &self.state.seed_set {
            out.push_str(&serde_json::to_string(example).expect("seed examples serialise"));
            out.push('\n');
        }
        write_atomic(&self.dir.join(SEED_SET_FILE), out.as_bytes())?;
        Ok(())
    }
}

/// Read a `seedset.jsonl` file.
pub fn load_seed_examples(path: &Path) -> Result<Vec<SeedExample>, SeedError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let example: SeedExample =
            serde_json::from_str(&line).map_err(|e| SeedError::Corrupt { line: i + 1, reason: e.to_string() })?;
        if !example.quality.is_promotable() {
            return Err(SeedError::Corrupt { line: i + 1, reason: "Poor example in seed set".into() });
        }
        out.push(example);
    }
    Ok(out)
}
