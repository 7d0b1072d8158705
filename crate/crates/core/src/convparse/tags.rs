use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

/// A well-formed `<imgN> DESCRIPTION </imgN>` occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagMatch {
    pub index: u32,
    /// Text between the tags minus one framing space on each side.
    pub description: String,
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TagDefectKind {
    /// `<img` or `</img` not followed by a canonical index and `>`.
    MalformedToken,
    MismatchedClose { open: u32, close: u32 },
    StrayClose { index: u32 },
    Unclosed { index: u32 },
    Nested,
    EmptyDescription { index: u32 },
}

impl fmt::Display for TagDefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TagDefectKind::MalformedToken => write!(f, "malformed image tag token"),
            TagDefectKind::MismatchedClose { open, close } => {
                write!(f, "mismatched close index (<img{open}> closed by </img{close}>)")
            }
            TagDefectKind::StrayClose { index } => write!(f, "close tag </img{index}> without opener"),
            TagDefectKind::Unclosed { index } => write!(f, "unclosed tag <img{index}>"),
            TagDefectKind::Nested => write!(f, "nested image tags"),
            TagDefectKind::EmptyDescription { index } => write!(f, "empty description in <img{index}>"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagDefect {
    pub kind: TagDefectKind,
    pub span: Range<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagScan {
    pub tags: Vec<TagMatch>,
    pub defects: Vec<TagDefect>,
}

enum Token {
    Open(u32),
    Close(u32),
    Malformed,
}

/// Parse a tag token starting at `pos` (which holds `<`). Returns the token and its end.
fn read_token(text: &str, pos: usize) -> Option<(Token, usize)> {
    let rest = &text[pos..];
    let (closing, prefix_len) = if rest.starts_with("</img") {
        (true, 5)
    } else if rest.starts_with("<img") {
        (false, 4)
    } else {
        return None;
    };
    let after = &rest[prefix_len..];
    let digits = after.bytes().take_while(u8::is_ascii_digit).count();
    let canonical = digits > 0 && digits <= 9 && !(digits > 1 && after.starts_with('0'));
    if canonical && after.as_bytes().get(digits) == Some(&b'>') {
        let index: u32 = after[..digits].parse().expect("at most nine digits");
        let end = pos + prefix_len + digits + 1;
        return Some((if closing { Token::Close(index) } else { Token::Open(index) }, end));
    }
    // malformed: swallow up to a `>` that comes before any whitespace or `<`
    let tail = after.find(|c: char| c == '>' || c == '<' || c.is_whitespace());
    let end = match tail {
        Some(i) if after.as_bytes()[i] == b'>' => pos + prefix_len + i + 1,
        _ => pos + prefix_len + digits,
    };
    Some((Token::Malformed, end))
}

fn strip_framing(inner: &str) -> &str {
    let inner = inner.strip_prefix(' ').unwrap_or(inner);
    inner.strip_suffix(' ').unwrap_or(inner)
}

enum State {
    Idle,
    Open { index: u32, start: usize, content: usize, poisoned: bool },
    Nested { start: usize, depth: usize },
}

/// Find every image tag in `text`, left to right. Malformed fragments are
/// reported as defects, never as errors.
pub fn extract_image_tags(text: &str) -> TagScan {
    let mut scan = TagScan::default();
    let mut state = State::Idle;
    let mut pos = 0;
    while let Some(off) = text[pos..].find('<') {
        let at = pos + off;
        let Some((token, end)) = read_token(text, at) else {
            pos = at + 1;
            continue;
        };
        pos = end;
        state = match (state, token) {
            (state, Token::Malformed) => {
                scan.defects.push(TagDefect { kind: TagDefectKind::MalformedToken, span: at..end });
                match state {
                    State::Open { index, start, content, .. } => State::Open { index, start, content, poisoned: true },
                    other => other,
                }
            }
            (State::Idle, Token::Open(index)) => State::Open { index, start: at, content: end, poisoned: false },
            (State::Open { start, .. }, Token::Open(_)) => State::Nested { start, depth: 2 },
            (State::Nested { start, depth }, Token::Open(_)) => State::Nested { start, depth: depth + 1 },
            (State::Idle, Token::Close(index)) => {
                scan.defects.push(TagDefect { kind: TagDefectKind::StrayClose { index }, span: at..end });
                State::Idle
            }
            (State::Open { index, start, content, poisoned }, Token::Close(close)) => {
                if close != index {
                    scan.defects.push(TagDefect {
                        kind: TagDefectKind::MismatchedClose { open: index, close },
                        span: start..end,
                    });
                } else if !poisoned {
                    let description = strip_framing(&text[content..at]);
                    if description.trim().is_empty() {
                        scan.defects
                            .push(TagDefect { kind: TagDefectKind::EmptyDescription { index }, span: start..end });
                    } else {
                        scan.tags.push(TagMatch { index, description: description.to_string(), span: start..end });
                    }
                }
                State::Idle
            }
            (State::Nested { start, depth }, Token::Close(_)) => {
                if depth == 1 {
                    scan.defects.push(TagDefect { kind: TagDefectKind::Nested, span: start..end });
                    State::Idle
                } else {
                    State::Nested { start, depth: depth - 1 }
                }
            }
        };
    }
    match state {
        State::Idle => {}
        State::Open { index, start, .. } => {
            scan.defects.push(TagDefect { kind: TagDefectKind::Unclosed { index }, span: start..text.len() })
        }
        State::Nested { start, .. } => {
            scan.defects.push(TagDefect { kind: TagDefectKind::Nested, span: start..text.len() })
        }
    }
    scan
}
