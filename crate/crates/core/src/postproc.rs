//! Rule-based quality filters.
//!
//! Every check runs on every conversation and all findings are kept, so a
//! verdict carries complete defect statistics rather than the first failure.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convparse::{Conversation, ParseDefect, ParseDefectKind, Position};

pub const DEFAULT_DRIFT_THRESHOLD: f64 = 0.1;
/// Conversations with more turns than this are rejected.
pub const DEFAULT_MAX_TURNS: usize = 5;

/// Character-level Levenshtein distance.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance divided by the longer length in chars; 0 for two
/// empty strings.
pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    levenshtein(a, b) as f64 / longest as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReasonCode {
    DescriptionDrift,
    UnknownImage,
    DuplicateImageCopy,
    InvalidTag,
    AlternationError,
    TurnLimitExceeded,
    TruncatedOutput,
}

impl ReasonCode {
    pub const ALL: [ReasonCode; 7] = [
        ReasonCode::DescriptionDrift,
        ReasonCode::UnknownImage,
        ReasonCode::DuplicateImageCopy,
        ReasonCode::InvalidTag,
        ReasonCode::AlternationError,
        ReasonCode::TurnLimitExceeded,
        ReasonCode::TruncatedOutput,
    ];
}

/// One finding, with enough context to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason")]
pub enum Evidence {
    DescriptionDrift { position: Position, index: u32, description: String, caption: String, distance: f64 },
    UnknownImage { position: Position, index: u32 },
    DuplicateImageCopy { index: u32, first: Position, repeat: Position },
    InvalidTag { defect: ParseDefect },
    AlternationError { defect: ParseDefect },
    TurnLimitExceeded { turns: usize, max_turns: usize },
    TruncatedOutput,
}

impl Evidence {
    pub fn reason(&self) -> ReasonCode {
        match self {
            Evidence::DescriptionDrift { .. } => ReasonCode::DescriptionDrift,
            Evidence::UnknownImage { .. } => ReasonCode::UnknownImage,
            Evidence::DuplicateImageCopy { .. } => ReasonCode::DuplicateImageCopy,
            Evidence::InvalidTag { .. } => ReasonCode::InvalidTag,
            Evidence::AlternationError { .. } => ReasonCode::AlternationError,
            Evidence::TurnLimitExceeded { .. } => ReasonCode::TurnLimitExceeded,
            Evidence::TruncatedOutput => ReasonCode::TruncatedOutput,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictStatus {
    Pass,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub conversation_id: String,
    pub status: VerdictStatus,
    /// Sorted, without repeats.
    pub reasons: Vec<ReasonCode>,
    pub evidence: Vec<Evidence>,
}

impl FilterVerdict {
    pub fn pass(conversation_id: impl Into<String>) -> Self {
        Self::from_evidence(conversation_id, Vec::new())
    }

    /// Status and reason list follow from the evidence: Reject iff any.
    pub fn from_evidence(conversation_id: impl Into<String>, mut evidence: Vec<Evidence>) -> Self {
        evidence.sort_by_key(Evidence::reason);
        let mut reasons: Vec<ReasonCode> = evidence.iter().map(Evidence::reason).collect();
        reasons.dedup();
        FilterVerdict {
            conversation_id: conversation_id.into(),
            status: if reasons.is_empty() { VerdictStatus::Pass } else { VerdictStatus::Reject },
            reasons,
            evidence,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == VerdictStatus::Pass
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub drift_threshold: f64,
    pub max_turns: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { drift_threshold: DEFAULT_DRIFT_THRESHOLD, max_turns: DEFAULT_MAX_TURNS }
    }
}

/// What the filters see for one generated transcript.
#[derive(Debug, Clone)]
pub struct FilterInput<'a> {
    pub conversation_id: &'a str,
    pub parsed: Result<&'a Conversation, &'a [ParseDefect]>,
    /// The backend stopped on its length limit.
    pub truncated: bool,
}

impl<'a> FilterInput<'a> {
    pub fn parsed(conv: &'a Conversation) -> Self {
        FilterInput { conversation_id: &conv.id, parsed: Ok(conv), truncated: false }
    }
}

/// In-roster image references whose description strays from the caption by
/// more than `threshold`. Out-of-roster references are left to
/// [`check_unknown_images`].
pub fn check_description_drift(conv: &Conversation, threshold: f64) -> Vec<Evidence> {
    conv.image_refs()
        .filter_map(|(position, index, description)| {
            let entry = conv.roster.get(index)?;
            let distance = normalized_edit_distance(description, &entry.caption);
            (distance > threshold).then(|| Evidence::DescriptionDrift {
                position,
                index,
                description: description.to_string(),
                caption: entry.caption.clone(),
                distance,
            })
        })
        .collect()
}

pub fn check_unknown_images(conv: &Conversation) -> Vec<Evidence> {
    conv.image_refs()
        .filter(|(_, index, _)| conv.roster.get(*index).is_none())
        .map(|(position, index, _)| Evidence::UnknownImage { position, index })
        .collect()
}

/// Parser defects, repeated image tags, and the turn limit.
pub fn check_format(parsed: Result<&Conversation, &[ParseDefect]>, max_turns: usize) -> Vec<Evidence> {
    let conv = match parsed {
        Err(defects) => {
            return defects
                .iter()
                .map(|d| match d.kind {
                    ParseDefectKind::Tag { .. } => Evidence::InvalidTag { defect: d.clone() },
                    _ => Evidence::AlternationError { defect: d.clone() },
                })
                .collect();
        }
        Ok(conv) => conv,
    };
    let mut out = Vec::new();
    let mut first_seen: HashMap<u32, Position> = HashMap::new();
    for (position, index, _) in conv.image_refs() {
        match first_seen.get(&index) {
            Some(&first) => out.push(Evidence::DuplicateImageCopy { index, first, repeat: position }),
            None => {
                first_seen.insert(index, position);
            }
        }
    }
    if conv.turns.len() > max_turns {
        out.push(Evidence::TurnLimitExceeded { turns: conv.turns.len(), max_turns });
    }
    out
}

pub fn check_truncation(truncated: bool) -> Vec<Evidence> {
    if truncated {
        vec![Evidence::TruncatedOutput]
    } else {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    DescriptionDrift,
    UnknownImages,
    Format,
    Truncation,
}

impl Check {
    pub const ALL: [Check; 4] = [Check::DescriptionDrift, Check::UnknownImages, Check::Format, Check::Truncation];

    pub fn run(self, input: &FilterInput<'_>, config: &FilterConfig) -> Vec<Evidence> {
        match (self, input.parsed) {
            (Check::DescriptionDrift, Ok(conv)) => check_description_drift(conv, config.drift_threshold),
            (Check::UnknownImages, Ok(conv)) => check_unknown_images(conv),
            (Check::DescriptionDrift | Check::UnknownImages, Err(_)) => Vec::new(),
            (Check::Format, parsed) => check_format(parsed, config.max_turns),
            (Check::Truncation, _) => check_truncation(input.truncated),
        }
    }
}

/// Run `checks` in the given order and aggregate.
pub fn run_checks(input: &FilterInput<'_>, checks: &[Check], config: &FilterConfig) -> FilterVerdict {
    let evidence = checks.iter().flat_map(|c| c.run(input, config)).collect();
    FilterVerdict::from_evidence(input.conversation_id, evidence)
}

pub fn run_filter_pipeline(input: &FilterInput<'_>, config: &FilterConfig) -> FilterVerdict {
    run_checks(input, &Check::ALL, config)
}

/// Verdicts in input order.
pub fn filter_batch(inputs: &[FilterInput<'_>], config: &FilterConfig) -> Vec<FilterVerdict> {
    inputs.par_iter().map(|i| run_filter_pipeline(i, config)).collect()
}
