//! Generation prompts: image tags, in-context example selection, rendering.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ImageGroup;
use crate::convparse::render_turns;
use crate::corpus::contains_reserved_tag;
use crate::rng::sha256_hex;
use crate::seedset::{Characteristic, QualityLabel, SeedExample};

pub const INPUT_IMAGES_HEADER: &str = "The constructed dialogues must and can only contain the following input images:";
pub const TURN_LIMIT_INSTRUCTION: &str = "The number of turns of the dialogue should be less than 6.";
pub const EXAMPLES_PER_PROMPT: usize = 3;
/// Rejection-sampling attempts before falling back to enumerating every triple.
pub const REJECTION_ATTEMPTS: usize = 10_000;

const BUILTIN_TEMPLATE: &str = include_str!("../assets/prompt_template.txt");
const CASE_SEPARATOR: &str = "---------";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("caption is empty")]
    EmptyCaption,
    #[error("reserved substring: caption contains an image tag marker")]
    ReservedSubstring,
    #[error("template is missing slot {0}")]
    MissingSlot(&'static str),
    #[error("cannot read template: {0}")]
    TemplateIo(String),
    #[error("expected {EXAMPLES_PER_PROMPT} in-context examples, got {0}")]
    WrongExampleCount(usize),
    #[error("in-context examples violate constraints: {0}")]
    ConstraintViolation(String),
    #[error("seed set is infeasible: {}", .0.join("; "))]
    Infeasible(Vec<String>),
}

/// `<img{index}> {caption} </img{index}>`.
pub fn render_image_tag(index: u32, caption: &str) -> Result<String, PromptError> {
    if caption.trim().is_empty() {
        return Err(PromptError::EmptyCaption);
    }
    if contains_reserved_tag(caption) {
        return Err(PromptError::ReservedSubstring);
    }
    Ok(format!("<img{index}> {caption} </img{index}>"))
}

/// A prompt template with `{{images}}` and `{{cases}}` slots and an optional
/// `{{#examples}}...{{/examples}}` block that is removed when there are no cases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub version: String,
    body: String,
}

impl PromptTemplate {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TEMPLATE).expect("builtin template is valid")
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::TemplateIo(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut version = String::from("unversioned");
        let mut body_start = 0;
        for line in text.split_inclusive('\n') {
            let Some(meta) = line.strip_prefix("## ") else { break };
            if let Some(v) = meta.trim().strip_prefix("template-version:") {
                version = v.trim().to_string();
            }
            body_start += line.len();
        }
        let body = text[body_start..].to_string();
        for slot in ["{{images}}", "{{cases}}", "{{#examples}}", "{{/examples}}"] {
            if !body.contains(slot) {
                return Err(PromptError::MissingSlot(slot));
            }
        }
        Ok(PromptTemplate { version, body })
    }

    /// Fill the slots. With `cases = None` the examples block is dropped.
    pub fn render(&self, images: &str, cases: Option<&str>) -> String {
        let open = self.body.find("{{#examples}}").expect("checked in parse");
        let close = self.body.find("{{/examples}}").expect("checked in parse");
        let (head, rest) = self.body.split_at(open);
        let block = &rest["{{#examples}}".len()..close - open];
        let tail = &self.body[close + "{{/examples}}".len()..];
        let mut out = head.replace("{{images}}", images);
        if let Some(cases) = cases {
            out.push_str(&block.replace("{{cases}}", cases).replace("{{images}}", images));
        }
        out.push_str(&tail.replace("{{images}}", images));
        out
    }
}

/// A fully rendered generation prompt and the inputs it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub image_group: ImageGroup,
    pub in_context_examples: Vec<SeedExample>,
    pub template_version: String,
}

impl PromptBundle {
    /// SHA-256 of the rendered prompt text.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.system_text)
    }

    /// The lines listing this prompt's input images.
    pub fn input_image_lines(&self) -> Vec<&str> {
        let Some(start) = self.system_text.find(INPUT_IMAGES_HEADER) else { return Vec::new() };
        self.system_text[start + INPUT_IMAGES_HEADER.len()..]
            .lines()
            .skip(1)
            .take_while(|l| !l.trim().is_empty())
            .collect()
    }
}

fn render_image_list<'a>(captions: impl Iterator<Item = &'a str>) -> Result<String, PromptError> {
    let lines = captions
        .enumerate()
        .map(|(i, c)| render_image_tag(i as u32, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(lines.join("\n"))
}

fn render_case(number: usize, example: &SeedExample) -> Result<String, PromptError> {
    let images = render_image_list(example.conversation.roster.0.values().map(|e| e.caption.as_str()))?;
    Ok(format!(
        "Case {number}:\nInput Images:\n{images}\nOutput Dialogue:\n{}",
        render_turns(&example.conversation.turns).trim_end()
    ))
}

fn covered(examples: &[&SeedExample]) -> BTreeSet<Characteristic> {
    examples.iter().flat_map(|e| e.characteristics.iter().copied()).collect()
}

/// At least one Excellent example and all four characteristics covered.
pub fn satisfies_constraints(examples: &[&SeedExample]) -> bool {
    examples.iter().any(|e| e.quality == QualityLabel::Excellent) && covered(examples).len() == Characteristic::ALL.len()
}

fn constraint_failures(examples: &[&SeedExample]) -> Vec<String> {
    let mut failures = Vec::new();
    if !examples.iter().any(|e| e.quality == QualityLabel::Excellent) {
        failures.push("no example labeled Excellent".to_string());
    }
    let have = covered(examples);
    let missing: Vec<_> = Characteristic::ALL.iter().filter(|c| !have.contains(c)).map(|c| c.to_string()).collect();
    if !missing.is_empty() {
        failures.push(format!("characteristics not covered: {}", missing.join(", ")));
    }
    failures
}

/// Build the prompt for `group` with exactly three constraint-satisfying examples.
pub fn build_prompt(
    template: &PromptTemplate,
    group: &ImageGroup,
    examples: &[SeedExample],
) -> Result<PromptBundle, PromptError> {
    if examples.len() != EXAMPLES_PER_PROMPT {
        return Err(PromptError::WrongExampleCount(examples.len()));
    }
    let refs: Vec<&SeedExample> = examples.iter().collect();
    let failures = constraint_failures(&refs);
    if !failures.is_empty() {
        return Err(PromptError::ConstraintViolation(failures.join("; ")));
    }
    let cases = examples
        .iter()
        .enumerate()
        .map(|(i, e)| render_case(i + 1, e))
        .collect::<Result<Vec<_>, _>>()?
        .join(&format!("\n{CASE_SEPARATOR}\n"));
    let images = render_image_list(group.images.iter().map(|i| i.caption.as_str()))?;
    Ok(PromptBundle {
        system_text: template.render(&images, Some(&cases)),
        image_group: group.clone(),
        in_context_examples: examples.to_vec(),
        template_version: template.version.clone(),
    })
}

/// Prompt without an examples section, for generating from an empty seed set.
pub fn build_bootstrap_prompt(template: &PromptTemplate, group: &ImageGroup) -> Result<PromptBundle, PromptError> {
    let images = render_image_list(group.images.iter().map(|i| i.caption.as_str()))?;
    Ok(PromptBundle {
        system_text: template.render(&images, None),
        image_group: group.clone(),
        in_context_examples: Vec::new(),
        template_version: template.version.clone(),
    })
}

/// Every feasible unordered triple of seed-set indices, ascending.
pub fn feasible_triples(seed_set: &[SeedExample]) -> Vec<[usize; 3]> {
    let n = seed_set.len();
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                if satisfies_constraints(&[&seed_set[a], &seed_set[b], &seed_set[c]]) {
                    out.push([a, b, c]);
                }
            }
        }
    }
    out
}

/// Pick three distinct seed-set indices uniformly among the triples that
/// satisfy the constraints. Rejection-samples first, then enumerates.
pub fn select_in_context_indices(seed_set: &[SeedExample], rng: &mut impl Rng) -> Result<[usize; 3], PromptError> {
    let all: Vec<&SeedExample> = seed_set.iter().collect();
    let mut failures = constraint_failures(&all);
    if seed_set.len() < EXAMPLES_PER_PROMPT {
        failures.insert(0, format!("only {} examples, need {EXAMPLES_PER_PROMPT}", seed_set.len()));
    }
    if !failures.is_empty() {
        return Err(PromptError::Infeasible(failures));
    }
    for _ in 0..REJECTION_ATTEMPTS {
        let mut picks: Vec<usize> = index::sample(rng, seed_set.len(), EXAMPLES_PER_PROMPT).into_vec();
        picks.sort_unstable();
        let triple = [picks[0], picks[1], picks[2]];
        if satisfies_constraints(&triple.map(|i| &seed_set[i])) {
            return Ok(triple);
        }
    }
    let feasible = feasible_triples(seed_set);
    if feasible.is_empty() {
        return Err(PromptError::Infeasible(vec!["no triple satisfies both constraints together".into()]));
    }
    Ok(feasible[rng.random_range(0..feasible.len())])
}

pub fn select_in_context_examples(seed_set: &[SeedExample], rng: &mut impl Rng) -> Result<Vec<SeedExample>, PromptError> {
    let triple = select_in_context_indices(seed_set, rng)?;
    Ok(triple.iter().map(|&i| seed_set[i].clone()).collect())
}
