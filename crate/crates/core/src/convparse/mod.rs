//! Structured conversations parsed from generated transcripts.

mod tags;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use tags::{extract_image_tags, TagDefect, TagDefectKind, TagMatch, TagScan};

use crate::clustering::ImageGroup;
use crate::corpus::ImageId;
use crate::promptkit::render_image_tag;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Segment {
    Text { content: String },
    ImageRef { index: u32, description: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Instruction,
    Response,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub instruction: Vec<Segment>,
    pub response: Vec<Segment>,
}

impl Turn {
    pub fn side(&self, side: Side) -> &[Segment] {
        match side {
            Side::Instruction => &self.instruction,
            Side::Response => &self.response,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub image_id: ImageId,
    pub uri: String,
    pub caption: String,
}

/// The input images of one conversation, by tag index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Roster(pub BTreeMap<u32, RosterEntry>);

impl Roster {
    pub fn from_group(group: &ImageGroup) -> Self {
        Roster(
            group
                .images
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    let entry =
                        RosterEntry { image_id: img.image_id.clone(), uri: img.uri.clone(), caption: img.caption.clone() };
                    (i as u32, entry)
                })
                .collect(),
        )
    }

    pub fn get(&self, index: u32) -> Option<&RosterEntry> {
        self.0.get(&index)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices are exactly `0..n`.
    pub fn is_dense(&self) -> bool {
        self.0.keys().enumerate().all(|(i, &k)| i as u32 == k)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub prompt_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<u32>,
    pub generated_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub turns: Vec<Turn>,
    pub roster: Roster,
    pub provenance: Provenance,
}

/// Where an image reference sits in a conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Position {
    /// 1-based turn number.
    pub turn: usize,
    pub side: Side,
}

impl Conversation {
    /// Every image reference in reading order.
    pub fn image_refs(&self) -> impl Iterator<Item = (Position, u32, &str)> {
        self.turns.iter().enumerate().flat_map(|(t, turn)| {
            [Side::Instruction, Side::Response].into_iter().flat_map(move |side| {
                turn.side(side).iter().filter_map(move |seg| match seg {
                    Segment::ImageRef { index, description } => {
                        Some((Position { turn: t + 1, side }, *index, description.as_str()))
                    }
                    Segment::Text { .. } => None,
                })
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    Human,
    Assistant,
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Speaker::Human => "Human",
            Speaker::Assistant => "Assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseDefectKind {
    NoMessages,
    /// Non-blank text before the first speaker marker.
    LeadingText,
    FirstSpeakerNotHuman,
    ConsecutiveSpeaker { speaker: Speaker },
    EmptyMessage { speaker: Speaker },
    UnansweredFinalInstruction,
    /// Roster indices are not exactly `0..n`.
    InvalidRoster,
    Tag { defect: TagDefectKind },
}

impl ParseDefectKind {
    pub fn is_tag_defect(&self) -> bool {
        matches!(self, ParseDefectKind::Tag { .. })
    }
}

impl fmt::Display for ParseDefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseDefectKind::NoMessages => write!(f, "no speaker-marked messages"),
            ParseDefectKind::LeadingText => write!(f, "text before first speaker"),
            ParseDefectKind::FirstSpeakerNotHuman => write!(f, "first speaker not Human"),
            ParseDefectKind::ConsecutiveSpeaker { speaker } => write!(f, "two consecutive {speaker} messages"),
            ParseDefectKind::EmptyMessage { speaker } => write!(f, "empty {speaker} message"),
            ParseDefectKind::UnansweredFinalInstruction => write!(f, "unanswered final instruction"),
            ParseDefectKind::InvalidRoster => write!(f, "roster indices are not 0..n"),
            ParseDefectKind::Tag { defect } => defect.fmt(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDefect {
    pub kind: ParseDefectKind,
    /// 1-based line in the transcript, when the defect has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    /// Byte span in the transcript.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Range<usize>>,
}

/// Recognise a speaker marker at the start of `line`: `Human:` or
/// `Assistant:`, case-sensitive, with optional surrounding whitespace and
/// optional `**` bold wrapping of the name. Returns the speaker and the byte
/// offset where the message content starts.
pub fn speaker_marker(line: &str) -> Option<(Speaker, usize)> {
    let body = line.trim_start();
    let mut pos = line.len() - body.len();
    let mut rest = body;
    let bold = rest.starts_with("**");
    if bold {
        rest = &rest[2..];
        pos += 2;
    }
    let (speaker, name_len) = if rest.starts_with("Human") {
        (Speaker::Human, 5)
    } else if rest.starts_with("Assistant") {
        (Speaker::Assistant, 9)
    } else {
        return None;
    };
    rest = &rest[name_len..];
    pos += name_len;
    if bold {
        rest = rest.strip_prefix("**")?;
        pos += 2;
    }
    let trimmed = rest.trim_start_matches([' ', '\t']);
    pos += rest.len() - trimmed.len();
    let after = trimmed.strip_prefix(':')?;
    pos += 1;
    Some((speaker, pos + (after.len() - after.trim_start().len())))
}

/// A segment with its byte span inside the message it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpannedSegment {
    pub segment: Segment,
    pub span: Range<usize>,
}

/// Split a message into text and image segments.
///
/// Spans tile `message` exactly. Whitespace-only gaps between tags are not
/// text segments; they are folded into the span of the neighbouring image.
pub fn segment_message(message: &str) -> (Vec<SpannedSegment>, Vec<TagDefect>) {
    let scan = extract_image_tags(message);
    let mut out: Vec<SpannedSegment> = Vec::new();
    let mut pending_ws: Option<usize> = None;
    let mut cursor = 0;
    let push_gap = |out: &mut Vec<SpannedSegment>, pending: &mut Option<usize>, gap: Range<usize>| {
        if gap.is_empty() {
            return;
        }
        let text = &message[gap.clone()];
        if !text.trim().is_empty() {
            out.push(SpannedSegment { segment: Segment::Text { content: text.to_string() }, span: gap });
        } else if let Some(last) = out.last_mut() {
            last.span.end = gap.end;
        } else {
            *pending = Some(gap.start);
        }
    };
    for tag in &scan.tags {
        push_gap(&mut out, &mut pending_ws, cursor..tag.span.start);
        let start = pending_ws.take().unwrap_or(tag.span.start);
        out.push(SpannedSegment {
            segment: Segment::ImageRef { index: tag.index, description: tag.description.clone() },
            span: start..tag.span.end,
        });
        cursor = tag.span.end;
    }
    push_gap(&mut out, &mut pending_ws, cursor..message.len());
    (out, scan.defects)
}

struct RawMessage {
    speaker: Speaker,
    line: usize,
    start: usize,
    end: usize,
}

/// Split a transcript into turns. Fails with every structural and tag
/// defect found; never panics.
pub fn parse_turns(text: &str) -> Result<Vec<Turn>, Vec<ParseDefect>> {
    let mut defects = Vec::new();
    let mut messages: Vec<RawMessage> = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let line_start = offset;
        offset += line.len();
        if let Some((speaker, content)) = speaker_marker(line) {
            messages.push(RawMessage { speaker, line: i + 1, start: line_start + content, end: offset });
        } else if let Some(current) = messages.last_mut() {
            current.end = offset;
        } else if !line.trim().is_empty() {
            defects.push(ParseDefect {
                kind: ParseDefectKind::LeadingText,
                line: Some(i + 1),
                span: Some(line_start..offset),
            });
        }
    }
    if messages.is_empty() {
        defects.push(ParseDefect { kind: ParseDefectKind::NoMessages, line: None, span: None });
        return Err(defects);
    }

    if messages[0].speaker != Speaker::Human {
        defects.push(ParseDefect {
            kind: ParseDefectKind::FirstSpeakerNotHuman,
            line: Some(messages[0].line),
            span: None,
        });
    }
    for pair in messages.windows(2) {
        if pair[0].speaker == pair[1].speaker {
            defects.push(ParseDefect {
                kind: ParseDefectKind::ConsecutiveSpeaker { speaker: pair[1].speaker },
                line: Some(pair[1].line),
                span: None,
            });
        }
    }
    let last = messages.last().expect("nonempty");
    if last.speaker == Speaker::Human && defects.is_empty() {
        defects.push(ParseDefect {
            kind: ParseDefectKind::UnansweredFinalInstruction,
            line: Some(last.line),
            span: None,
        });
    }

    let mut bodies = Vec::with_capacity(messages.len());
    for m in &messages {
        let raw = &text[m.start..m.end];
        let body = raw.trim();
        let body_start = m.start + (raw.len() - raw.trim_start().len());
        if body.is_empty() {
            defects.push(ParseDefect {
                kind: ParseDefectKind::EmptyMessage { speaker: m.speaker },
                line: Some(m.line),
                span: None,
            });
        }
        let (segments, tag_defects) = segment_message(body);
        defects.extend(tag_defects.into_iter().map(|d| ParseDefect {
            kind: ParseDefectKind::Tag { defect: d.kind },
            line: Some(m.line),
            span: Some(body_start + d.span.start..body_start + d.span.end),
        }));
        bodies.push(segments.into_iter().map(|s| s.segment).collect::<Vec<_>>());
    }
    if !defects.is_empty() {
        return Err(defects);
    }
    let mut bodies = bodies.into_iter();
    let mut turns = Vec::with_capacity(messages.len() / 2);
    while let (Some(instruction), Some(response)) = (bodies.next(), bodies.next()) {
        turns.push(Turn { instruction, response });
    }
    Ok(turns)
}

/// Parse a transcript against the roster of images it was generated from.
///
/// Image references outside the roster are kept; rejecting them is the
/// filter stage's job.
pub fn parse_transcript(
    id: impl Into<String>,
    text: &str,
    roster: Roster,
    provenance: Provenance,
) -> Result<Conversation, Vec<ParseDefect>> {
    if !roster.is_dense() {
        return Err(vec![ParseDefect { kind: ParseDefectKind::InvalidRoster, line: None, span: None }]);
    }
    let turns = parse_turns(text)?;
    Ok(Conversation { id: id.into(), turns, roster, provenance })
}

fn render_segments(segments: &[Segment]) -> String {
    let mut out = String::new();
    for seg in segments {
        match seg {
            Segment::Text { content } => out.push_str(content),
            Segment::ImageRef { index, description } => {
                // descriptions come from parsed tags, so they never hold reserved substrings
                out.push_str(&render_image_tag(*index, description).unwrap_or_default())
            }
        }
    }
    out
}

/// Render turns back into `Human:` / `Assistant:` transcript form.
pub fn render_turns(turns: &[Turn]) -> String {
    let mut out = String::new();
    for turn in turns {
        out.push_str("Human: ");
        out.push_str(&render_segments(&turn.instruction));
        out.push_str("\nAssistant: ");
        out.push_str(&render_segments(&turn.response));
        out.push('\n');
    }
    out
}

/// Collapse whitespace runs to single spaces and trim.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
