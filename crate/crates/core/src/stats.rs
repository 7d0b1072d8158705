//! Dataset statistics: corpus averages, distinct-n diversity, per-turn image
//! placement, and annotation distributions.
//!
//! Averages are `None` (serialised as `null`) on an empty dataset.

use std::collections::{BTreeMap, HashSet};
use std::ops::Add;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convparse::{Conversation, Segment, Side};
use crate::seedset::{Annotation, Characteristic, ErrorTag, QualityLabel};

pub const NGRAM_ORDERS: [usize; 3] = [2, 3, 4];
pub const TOKENIZER: &str = "lowercase, whitespace split, strip leading/trailing non-alphanumerics";

/// Lowercased whitespace tokens with surrounding punctuation removed;
/// tokens that are pure punctuation vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Sum over n = 2, 3, 4 of distinct / total word n-grams, pooled across
/// `texts` with no n-gram spanning two texts. An order with no n-grams
/// contributes 0.
pub fn diversity_score<S: AsRef<str>>(texts: &[S]) -> f64 {
    let tokenized: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t.as_ref())).collect();
    NGRAM_ORDERS
        .iter()
        .map(|&n| {
            let mut distinct: HashSet<&[String]> = HashSet::new();
            let mut total = 0usize;
            for tokens in &tokenized {
                for gram in tokens.windows(n) {
                    total += 1;
                    distinct.insert(gram);
                }
            }
            if total == 0 {
                0.0
            } else {
                distinct.len() as f64 / total as f64
            }
        })
        .sum()
}

/// The text of one message with image references dropped.
pub fn message_text(segments: &[Segment]) -> String {
    let parts: Vec<&str> = segments
        .iter()
        .filter_map(|s| match s {
            Segment::Text { content } => Some(content.as_str()),
            Segment::ImageRef { .. } => None,
        })
        .collect();
    parts.join(" ")
}

fn count_images(segments: &[Segment]) -> u64 {
    segments.iter().filter(|s| matches!(s, Segment::ImageRef { .. })).count() as u64
}

fn count_words(segments: &[Segment]) -> u64 {
    segments
        .iter()
        .map(|s| match s {
            Segment::Text { content } => tokenize(content).len() as u64,
            Segment::ImageRef { .. } => 0,
        })
        .sum()
}

/// Integer totals; the commutative monoid the averages are derived from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub conversations: u64,
    pub turns: u64,
    pub instruction_images: u64,
    pub response_images: u64,
    pub instruction_words: u64,
    pub response_words: u64,
}

impl Add for Totals {
    type Output = Totals;
    fn add(self, o: Totals) -> Totals {
        Totals {
            conversations: self.conversations + o.conversations,
            turns: self.turns + o.turns,
            instruction_images: self.instruction_images + o.instruction_images,
            response_images: self.response_images + o.response_images,
            instruction_words: self.instruction_words + o.instruction_words,
            response_words: self.response_words + o.response_words,
        }
    }
}

impl Totals {
    pub fn of(conv: &Conversation) -> Totals {
        let mut t = Totals { conversations: 1, turns: conv.turns.len() as u64, ..Totals::default() };
        for turn in &conv.turns {
            t.instruction_images += count_images(&turn.instruction);
            t.response_images += count_images(&turn.response);
            t.instruction_words += count_words(&turn.instruction);
            t.response_words += count_words(&turn.response);
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub conversation_count: u64,
    pub avg_turns: Option<f64>,
    /// Per conversation; the sum of the two per-side averages.
    pub avg_images: Option<f64>,
    pub avg_images_instructions: Option<f64>,
    pub avg_images_responses: Option<f64>,
    pub avg_words: Option<f64>,
    pub avg_words_instructions: Option<f64>,
    pub avg_words_responses: Option<f64>,
    pub totals: Totals,
}

fn per_conversation(count: u64, n: u64) -> Option<f64> {
    (n > 0).then(|| count as f64 / n as f64)
}

pub fn corpus_stats(dataset: &[Conversation]) -> CorpusStats {
    let totals = dataset.par_iter().map(Totals::of).reduce(Totals::default, Totals::add);
    let n = totals.conversations;
    let img_i = per_conversation(totals.instruction_images, n);
    let img_r = per_conversation(totals.response_images, n);
    let words_i = per_conversation(totals.instruction_words, n);
    let words_r = per_conversation(totals.response_words, n);
    CorpusStats {
        conversation_count: n,
        avg_turns: per_conversation(totals.turns, n),
        avg_images: img_i.zip(img_r).map(|(a, b)| a + b),
        avg_images_instructions: img_i,
        avg_images_responses: img_r,
        avg_words: words_i.zip(words_r).map(|(a, b)| a + b),
        avg_words_instructions: words_i,
        avg_words_responses: words_r,
        totals,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub score_instructions: f64,
    pub score_responses: f64,
    pub score_overall: f64,
}

/// Each message (its text segments joined) is one text.
pub fn dataset_diversity(dataset: &[Conversation]) -> DiversityReport {
    let side = |s: Side| -> Vec<String> {
        dataset.iter().flat_map(|c| c.turns.iter().map(move |t| message_text(t.side(s)))).collect()
    };
    let instructions = side(Side::Instruction);
    let responses = side(Side::Response);
    let overall: Vec<&String> = instructions.iter().chain(responses.iter()).collect();
    DiversityReport {
        score_instructions: diversity_score(&instructions),
        score_responses: diversity_score(&responses),
        score_overall: diversity_score(&overall),
    }
}

/// Image placement at one turn position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnImageBin {
    /// 1-based.
    pub turn: usize,
    /// Conversations with at least `turn` turns.
    pub conversations: u64,
    pub instruction_images: u64,
    pub response_images: u64,
    /// Mean over the conversations reaching this turn.
    pub mean_instruction: f64,
    pub mean_response: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnImageHistogram {
    pub bins: Vec<TurnImageBin>,
    /// Denominator of the mass view: all conversations. Bin image counts
    /// over this denominator sum to the per-conversation image average.
    pub dataset_conversations: u64,
}

impl TurnImageHistogram {
    pub fn total_images(&self) -> u64 {
        self.bins.iter().map(|b| b.instruction_images + b.response_images).sum()
    }

    /// Share of the per-conversation image average carried by each bin.
    pub fn mass(&self) -> Vec<f64> {
        self.bins
            .iter()
            .map(|b| (b.instruction_images + b.response_images) as f64 / self.dataset_conversations as f64)
            .collect()
    }
}

pub fn per_turn_image_histogram(dataset: &[Conversation]) -> TurnImageHistogram {
    let depth = dataset.iter().map(|c| c.turns.len()).max().unwrap_or(0);
    let mut bins: Vec<TurnImageBin> = (1..=depth)
        .map(|turn| TurnImageBin {
            turn,
            conversations: 0,
            instruction_images: 0,
            response_images: 0,
            mean_instruction: 0.0,
            mean_response: 0.0,
        })
        .collect();
    for conv in dataset {
        for (bin, turn) in bins.iter_mut().zip(&conv.turns) {
            bin.conversations += 1;
            bin.instruction_images += count_images(&turn.instruction);
            bin.response_images += count_images(&turn.response);
        }
    }
    for bin in &mut bins {
        bin.mean_instruction = bin.instruction_images as f64 / bin.conversations as f64;
        bin.mean_response = bin.response_images as f64 / bin.conversations as f64;
    }
    TurnImageHistogram { bins, dataset_conversations: dataset.len() as u64 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Share {
    pub count: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDistributions {
    pub total: u64,
    /// Set when there are no annotations; every map is then empty.
    pub zero_denominator: bool,
    pub quality: BTreeMap<QualityLabel, Share>,
    /// Multi-label: fractions need not sum to 1.
    pub characteristics: BTreeMap<Characteristic, Share>,
    /// Over all annotations, not only Poor ones.
    pub error_types: BTreeMap<ErrorTag, Share>,
}

pub fn annotation_distributions(annotations: &[&Annotation]) -> AnnotationDistributions {
    let total = annotations.len() as u64;
    let mut out = AnnotationDistributions {
        total,
        zero_denominator: total == 0,
        quality: BTreeMap::new(),
        characteristics: BTreeMap::new(),
        error_types: BTreeMap::new(),
    };
    if total == 0 {
        return out;
    }
    let share = |count: u64| Share { count, fraction: count as f64 / total as f64 };
    for q in QualityLabel::ALL {
        out.quality.insert(q, share(annotations.iter().filter(|a| a.quality == q).count() as u64));
    }
    for c in Characteristic::ALL {
        out.characteristics.insert(c, share(annotations.iter().filter(|a| a.characteristics.contains(&c)).count() as u64));
    }
    for e in ErrorTag::ALL {
        out.error_types.insert(e, share(annotations.iter().filter(|a| a.error_tags.contains(&e)).count() as u64));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsMetadata {
    pub tokenizer: String,
    pub words_include_image_placeholders: bool,
    pub ngram_orders: Vec<usize>,
}

/// Everything written to `stats.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub metadata: StatsMetadata,
    pub corpus: CorpusStats,
    pub diversity: DiversityReport,
    pub per_turn_images: TurnImageHistogram,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<AnnotationDistributions>,
}

pub fn dataset_stats(dataset: &[Conversation], annotations: Option<&[&Annotation]>) -> DatasetStats {
    DatasetStats {
        metadata: StatsMetadata {
            tokenizer: TOKENIZER.to_string(),
            words_include_image_placeholders: false,
            ngram_orders: NGRAM_ORDERS.to_vec(),
        },
        corpus: corpus_stats(dataset),
        diversity: dataset_diversity(dataset),
        per_turn_images: per_turn_image_histogram(dataset),
        annotations: annotations.map(annotation_distributions),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

fn csv_bytes(rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn row<const N: usize>(cells: [&str; N]) -> Vec<String> {
    cells.iter().map(|c| c.to_string()).collect()
}

/// CSV views of the report: `corpus_stats.csv`, `diversity.csv`,
/// `per_turn_images.csv`, and `annotations.csv` when annotations are present.
pub fn csv_tables(stats: &DatasetStats) -> Vec<(&'static str, Vec<u8>)> {
    let c = &stats.corpus;
    let mut corpus = vec![row(["metric", "value"]), row(["conversations", &c.conversation_count.to_string()])];
    for (k, v) in [
        ("avg_turns", c.avg_turns),
        ("avg_images", c.avg_images),
        ("avg_images_instructions", c.avg_images_instructions),
        ("avg_images_responses", c.avg_images_responses),
        ("avg_words", c.avg_words),
        ("avg_words_instructions", c.avg_words_instructions),
        ("avg_words_responses", c.avg_words_responses),
    ] {
        corpus.push(row([k, &fmt_opt(v)]));
    }
    let d = &stats.diversity;
    let diversity = vec![
        row(["split", "score"]),
        row(["instructions", &d.score_instructions.to_string()]),
        row(["responses", &d.score_responses.to_string()]),
        row(["overall", &d.score_overall.to_string()]),
    ];
    let mut per_turn =
        vec![row(["turn", "conversations", "instruction_images", "response_images", "mean_instruction", "mean_response"])];
    for b in &stats.per_turn_images.bins {
        per_turn.push(vec![
            b.turn.to_string(),
            b.conversations.to_string(),
            b.instruction_images.to_string(),
            b.response_images.to_string(),
            b.mean_instruction.to_string(),
            b.mean_response.to_string(),
        ]);
    }
    let mut tables = vec![
        ("corpus_stats.csv", csv_bytes(corpus)),
        ("diversity.csv", csv_bytes(diversity)),
        ("per_turn_images.csv", csv_bytes(per_turn)),
    ];
    if let Some(a) = &stats.annotations {
        let mut rows = vec![row(["group", "label", "count", "fraction"])];
        let entries = a
            .quality
            .iter()
            .map(|(k, s)| ("quality", k.to_string(), s))
            .chain(a.characteristics.iter().map(|(k, s)| ("characteristic", k.to_string(), s)))
            .chain(a.error_types.iter().map(|(k, s)| ("error_type", format!("{k:?}"), s)));
        for (group, label, s) in entries {
            rows.push(vec![group.to_string(), label, s.count.to_string(), s.fraction.to_string()]);
        }
        tables.push(("annotations.csv", csv_bytes(rows)));
    }
    tables
}
