//! Line-oriented labelling of the open batch. Reads answers from any
//! `BufRead`, so scripted input works the same as a terminal.

use std::collections::BTreeSet;
use std::io::{self, BufRead, Write};

use mmdialog_core::convparse::{Conversation, Segment};
use mmdialog_core::seedset::{AnnotationInput, Characteristic, ErrorTag, QualityLabel, SeedError, SeedStore};

enum Answer {
    Label(QualityLabel),
    Skip,
    Quit,
}

/// Label pending conversations until the queue is empty, input ends or the
/// annotator quits. Returns how many labels were recorded.
pub fn session(store: &mut SeedStore, annotator: &str, input: &mut impl BufRead, out: &mut impl Write) -> io::Result<usize> {
    let snap = store.snapshot();
    if snap.frozen {
        writeln!(out, "seed set frozen; nothing to label")?;
        return Ok(0);
    }
    let Some(batch) = snap.open_batch.as_ref() else {
        writeln!(out, "no open batch; run `mmdialog iterate` first")?;
        return Ok(0);
    };
    let pending = snap.pending_ids();
    writeln!(out, "iteration {}: {} of {} pending", batch.iteration, pending.len(), batch.items.len())?;
    let mut done = 0;
    for (n, id) in pending.iter().enumerate() {
        let Some((_, item)) = snap.find_item(id) else { continue };
        writeln!(out, "\n[{}/{}] {}", n + 1, pending.len(), id)?;
        render(&item.conversation, out)?;
        let quality = match ask_quality(input, out)? {
            Answer::Label(q) => q,
            Answer::Skip => continue,
            Answer::Quit => break,
        };
        loop {
            let (characteristics, error_tags) = if quality == QualityLabel::Poor {
                (BTreeSet::new(), ask_many(input, out, "error tags", &ErrorTag::ALL)?)
            } else {
                (ask_many(input, out, "characteristics", &Characteristic::ALL)?, BTreeSet::new())
            };
            let label = AnnotationInput {
                conversation_id: id.clone(),
                quality,
                characteristics,
                error_tags,
                annotator: annotator.to_string(),
            };
            match store.submit_annotation(label) {
                Ok(_) => {
                    done += 1;
                    break;
                }
                Err(e @ SeedError::InvalidAnnotation(_)) => writeln!(out, "  {e}; try again")?,
                Err(e) => return Err(io::Error::other(e.to_string())),
            }
        }
    }
    Ok(done)
}

fn render(c: &Conversation, out: &mut impl Write) -> io::Result<()> {
    for (tag, entry) in &c.roster.0 {
        writeln!(out, "  <img{tag}> {}  \"{}\"", entry.uri, entry.caption)?;
    }
    for (i, turn) in c.turns.iter().enumerate() {
        writeln!(out, "  {}. user: {}", i + 1, flatten(&turn.instruction))?;
        writeln!(out, "     assistant: {}", flatten(&turn.response))?;
    }
    Ok(())
}

fn flatten(segments: &[Segment]) -> String {
    segments
        .iter()
        .map(|s| match s {
            Segment::Text { content } => content.clone(),
            Segment::ImageRef { index, description } => format!("<img{index}>({description})"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn read_line(input: &mut impl BufRead) -> io::Result<Option<String>> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    Ok(Some(line.trim().to_ascii_lowercase()))
}

fn ask_quality(input: &mut impl BufRead, out: &mut impl Write) -> io::Result<Answer> {
    loop {
        write!(out, "quality [e]xcellent [s]atisfactory [p]oor, [k] skip, [q] quit: ")?;
        out.flush()?;
        let Some(line) = read_line(input)? else { return Ok(Answer::Quit) };
        return Ok(match line.as_str() {
            "e" | "excellent" => Answer::Label(QualityLabel::Excellent),
            "s" | "satisfactory" => Answer::Label(QualityLabel::Satisfactory),
            "p" | "poor" => Answer::Label(QualityLabel::Poor),
            "k" | "skip" => Answer::Skip,
            "q" | "quit" => Answer::Quit,
            _ => {
                writeln!(out, "  unrecognised answer {line:?}")?;
                continue;
            }
        });
    }
}

/// Comma- or space-separated 1-based choices; blank selects none.
fn ask_many<T: Copy + Ord + std::fmt::Debug>(input: &mut impl BufRead, out: &mut impl Write, what: &str, all: &[T]) -> io::Result<BTreeSet<T>> {
    let menu: Vec<String> = all.iter().enumerate().map(|(i, v)| format!("{}={v:?}", i + 1)).collect();
    loop {
        write!(out, "{what} ({}): ", menu.join(" "))?;
        out.flush()?;
        let Some(line) = read_line(input)? else { return Ok(BTreeSet::new()) };
        let picked: Option<BTreeSet<T>> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().ok().and_then(|n| n.checked_sub(1)).and_then(|i| all.get(i).copied()))
            .collect();
        match picked {
            Some(set) => return Ok(set),
            None => writeln!(out, "  choose numbers between 1 and {}", all.len())?,
        }
    }
}
