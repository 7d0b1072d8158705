//! Checks shared by the integration tests and the acceptance runner. Every
//! check panics on failure and returns a one-line detail on success.
#![allow(dead_code)]

pub mod oracles;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmdialog_core::clustering::{kmeans, prune_outlier_clusters, KMeansParams, TopicCluster};
use mmdialog_core::config::PipelineConfig;
use mmdialog_core::convparse::{
    parse_transcript, parse_turns, ParseDefectKind, Position, Provenance, Roster, RosterEntry, Side, TagDefectKind,
};
use mmdialog_core::corpus::{CaptionedImage, ImageId};
use mmdialog_core::corpus::EmbeddingMatrix;
use mmdialog_core::pipeline::{self, StageOptions};
use mmdialog_core::postproc::{
    normalized_edit_distance, run_checks, run_filter_pipeline, Check, FilterConfig, FilterInput, FilterVerdict,
    ReasonCode,
};
use mmdialog_core::promptkit::select_in_context_indices;
use mmdialog_core::seedset::{
    load_seed_examples, AnnotationInput, Characteristic, ErrorTag, QualityLabel, SeedError,
};
use mmdialog_core::stats::{corpus_stats, dataset_stats, diversity_score, per_turn_image_histogram};
use mmdialog_core::workspace::{PipelineError, Workspace};
use mmdialog_core::{Conversation, Segment, Turn};

pub const FIXED_TIMESTAMP: &str = "2023-10-15T00:00:00Z";

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Config for the 200-image fixture: five topics, so five clusters.
pub fn fixture_config() -> PipelineConfig {
    PipelineConfig { seed: 7, k: 5, embedding_dimension: 8, conversations: 60, ..PipelineConfig::default() }
}

pub fn fresh_workspace(root: &Path, config: PipelineConfig) -> Workspace {
    let mut ws = Workspace::init(root, config).expect("init workspace");
    ws.set_timestamp(FIXED_TIMESTAMP);
    ws
}

/// Ingest, score and cluster the 200-image fixture.
pub fn clustered_workspace(root: &Path, config: PipelineConfig) -> Workspace {
    let mut ws = fresh_workspace(root, config);
    let opts = StageOptions::default();
    pipeline::run_ingest(&mut ws, &fixture("corpus200.tsv"), &opts).unwrap();
    pipeline::run_score(&mut ws, Some(&fixture("corpus200.embeddings.jsonl")), &opts).unwrap();
    pipeline::run_cluster(&mut ws, &opts).unwrap();
    ws
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

pub fn roster(captions: &[&str]) -> Roster {
    Roster(
        captions
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let e = RosterEntry {
                    image_id: ImageId(format!("img-{i}")),
                    uri: format!("https://images.example/{i}.jpg"),
                    caption: c.to_string(),
                };
                (i as u32, e)
            })
            .collect(),
    )
}

// ---------------------------------------------------------------- config

pub fn check_config_defaults() -> String {
    let c = PipelineConfig::default();
    assert_eq!(c.score_threshold, 30.0);
    assert_eq!(c.k, 4096);
    assert_eq!(c.min_cluster_size, 32);
    assert_eq!(c.n_choices, vec![2, 3, 4]);
    assert_eq!(c.top_p, 1.0);
    assert_eq!(c.temperature, 1.0);
    assert_eq!(c.drift_threshold, 0.1);
    assert_eq!(c.batch_size, 100);
    assert_eq!(c.freeze_after, 3);
    // the shipped file says the same thing
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config/default.toml");
    if std::env::var_os("MMDIALOG_BLESS").is_some() && !shipped.exists() {
        std::fs::create_dir_all(shipped.parent().unwrap()).unwrap();
        std::fs::write(&shipped, c.to_toml()).unwrap();
    }
    let text = std::fs::read_to_string(&shipped).expect("config/default.toml is shipped");
    assert_eq!(PipelineConfig::from_toml(&text).expect("shipped config parses"), c);
    "threshold 30, K 4096, min size 32, n {2,3,4}, top_p 1.0, temperature 1.0, drift 0.1, batch 100, freeze 3".into()
}

// ---------------------------------------------------------------- edit distance

fn random_string(rng: &mut ChaCha8Rng, alphabet: &[char]) -> String {
    let len = rng.random_range(0..=64);
    (0..len).map(|_| *alphabet.choose(rng).unwrap()).collect()
}

pub fn check_edit_distance_oracle(pairs: usize) -> String {
    assert_eq!(normalized_edit_distance("kitten", "sitting"), 3.0 / 7.0);
    assert_eq!(oracles::normalized_levenshtein("kitten", "sitting"), 3.0 / 7.0);
    let small: Vec<char> = "ab".chars().collect();
    let wide: Vec<char> = "abcdefghij é漢🙂".chars().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xED17);
    for i in 0..pairs {
        let alphabet = if i % 2 == 0 { &small } else { &wide };
        let a = random_string(&mut rng, alphabet);
        let b = if rng.random_bool(0.3) { mutate(&mut rng, &a, alphabet) } else { random_string(&mut rng, alphabet) };
        let got = normalized_edit_distance(&a, &b);
        let want = oracles::normalized_levenshtein(&a, &b);
        assert_eq!(got, want, "pair {i}: {a:?} vs {b:?}");
    }
    format!("{pairs} random pairs (lengths 0-64) equal the DP oracle; kitten/sitting = 3/7")
}

fn mutate(rng: &mut ChaCha8Rng, s: &str, alphabet: &[char]) -> String {
    let mut chars: Vec<char> = s.chars().collect();
    for _ in 0..rng.random_range(0..4) {
        match rng.random_range(0..3) {
            0 if chars.len() < 64 => {
                let at = rng.random_range(0..=chars.len());
                chars.insert(at, *alphabet.choose(rng).unwrap());
            }
            1 if !chars.is_empty() => {
                let at = rng.random_range(0..chars.len());
                chars.remove(at);
            }
            _ if !chars.is_empty() => {
                let at = rng.random_range(0..chars.len());
                chars[at] = *alphabet.choose(rng).unwrap();
            }
            _ => {}
        }
    }
    chars.into_iter().collect()
}

// ---------------------------------------------------------------- diversity

const WORDS: [&str; 8] = ["the", "cat", "sat", "Mat", "on", "a", "dog,", "(red)"];

pub fn random_corpus(rng: &mut ChaCha8Rng) -> Vec<String> {
    let texts = rng.random_range(0..6);
    (0..texts)
        .map(|_| {
            let words = rng.random_range(0..10);
            let parts: Vec<&str> = (0..words).map(|_| *WORDS.choose(rng).unwrap()).collect();
            let sep = if rng.random_bool(0.2) { "  \n" } else { " " };
            parts.join(sep)
        })
        .collect()
}

pub fn check_diversity_oracle(corpora: usize) -> String {
    assert_eq!(diversity_score(&["the cat sat the cat"]), 2.75);
    assert_eq!(oracles::distinct_n_sum(&["the cat sat the cat".to_string()]), 2.75);
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1);
    for i in 0..corpora {
        let corpus = random_corpus(&mut rng);
        let got = diversity_score(&corpus);
        assert_eq!(got, oracles::distinct_n_sum(&corpus), "corpus {i}: {corpus:?}");
        assert!((0.0..=3.0).contains(&got), "corpus {i} scored {got}");
    }
    format!("{corpora} random corpora equal the hash-set oracle; 'the cat sat the cat' = 2.75; all scores in [0,3]")
}

// ---------------------------------------------------------------- clustering

/// Three separated Gaussian blobs in 4-D with sizes 30, 32 and 88.
pub fn blobs(seed: u64) -> (Vec<CaptionedImage>, Vec<usize>) {
    let centres = [[0.0, 0.0, 0.0, 0.0], [25.0, 0.0, 0.0, 0.0], [0.0, 25.0, 0.0, 0.0]];
    let sizes = [30, 32, 88];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, (centre, &size)) in centres.iter().zip(&sizes).enumerate() {
        for j in 0..size {
            let mut img = CaptionedImage::new(format!("https://blob.example/{label}/{j}"), "x");
            img.embedding = Some(centre.iter().map(|c| (c + oracles::gaussian(&mut rng)) as f32).collect());
            images.push(img);
            labels.push(label);
        }
    }
    (images, labels)
}

pub fn purity(assignments: &[usize], labels: &[usize]) -> f64 {
    let mut table: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *table.entry(a).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = table.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / labels.len() as f64
}

pub fn check_clustering() -> String {
    let (images, labels) = blobs(3);
    assert_eq!(images.len(), 150);
    let matrix = EmbeddingMatrix::from_images(&images).unwrap();
    let mut iterations = Vec::new();
    for seed in 0..20 {
        let params = KMeansParams { k: 3, seed, ..KMeansParams::default() };
        let out = kmeans(&matrix, &params).unwrap();
        assert_eq!(purity(&out.assignments, &labels), 1.0, "seed {seed}");
        for w in out.sse_history.windows(2) {
            assert!(w[1] <= w[0], "seed {seed}: SSE rose from {} to {}", w[0], w[1]);
        }
        let pruned = prune_outlier_clusters(out.clusters.clone(), 32);
        let mut kept: Vec<usize> = pruned.survivors.iter().map(TopicCluster::len).collect();
        kept.sort();
        assert_eq!(kept, vec![32, 88], "seed {seed}");
        assert_eq!(pruned.pruned.len(), 1);
        assert_eq!(pruned.pruned[0].size, 30);
        assert_eq!(pruned.unsampleable.len(), 30);
        iterations.push(out.iterations);
    }
    // pruning on hand-made sizes, including the boundary
    let sizes = [0usize, 1, 31, 32, 33, 500];
    let clusters: Vec<TopicCluster> = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| TopicCluster {
            cluster_id: i as u32,
            centroid: vec![0.0],
            member_ids: (0..n).map(|j| ImageId(format!("{i}-{j}"))).collect(),
        })
        .collect();
    let out = prune_outlier_clusters(clusters, 32);
    let pruned: Vec<u32> = out.pruned.iter().map(|p| p.cluster_id).collect();
    assert_eq!(pruned, vec![0, 1, 2]);
    format!(
        "purity 1.0 and non-increasing SSE over 20 seeds (max {} iterations); pruning at 32 removed exactly the undersized clusters",
        iterations.iter().max().unwrap()
    )
}

// ---------------------------------------------------------------- parser

pub struct Golden {
    pub fixture: &'static str,
    pub turns: usize,
    pub refs: Vec<(usize, Side, u32, &'static str)>,
}

pub fn sample_dialogue_goldens() -> Vec<Golden> {
    use Side::*;
    vec![
        Golden {
            fixture: "sample_dialogue_1",
            turns: 3,
            refs: vec![
                (1, Response, 0, "a cartoon illustration of a clown looking angry"),
                (2, Response, 1, "cartoon illustration of a cupcake with a happy expression"),
            ],
        },
        Golden {
            fixture: "sample_dialogue_2",
            turns: 3,
            refs: vec![
                (1, Response, 0, "a mother and daughter selling gum and cigarettes in person"),
                (3, Response, 1, "a child eating ice cream"),
            ],
        },
        Golden {
            fixture: "sample_dialogue_3",
            turns: 3,
            refs: vec![
                (2, Instruction, 0, "large group of people in the shape of flag"),
                (2, Instruction, 1, "rear view of a male boxer holding globe with flag painted on his back"),
                (3, Instruction, 2, "diplomatic handshake between countries : flags overprinted the hands stock photo"),
            ],
        },
    ]
}

pub fn check_parser_goldens() -> String {
    let bless = std::env::var_os("MMDIALOG_BLESS").is_some();
    for g in sample_dialogue_goldens() {
        let text = std::fs::read_to_string(fixture(&format!("{}.txt", g.fixture))).unwrap();
        let captions: Vec<&str> = g.refs.iter().map(|r| r.3).collect();
        let conv = parse_transcript(g.fixture, &text, roster(&captions), Provenance::default())
            .unwrap_or_else(|d| panic!("{}: {d:?}", g.fixture));
        assert_eq!(conv.turns.len(), g.turns, "{}", g.fixture);
        let refs: Vec<(usize, Side, u32, &str)> =
            conv.image_refs().map(|(Position { turn, side }, i, d)| (turn, side, i, d)).collect();
        let want: Vec<(usize, Side, u32, &str)> = g.refs.iter().map(|&(t, s, i, d)| (t, s, i, d)).collect();
        assert_eq!(refs, want, "{}", g.fixture);
        // full structure against the checked-in golden
        let golden_path = fixture(&format!("{}.turns.json", g.fixture));
        let rendered = serde_json::to_string_pretty(&conv.turns).unwrap() + "\n";
        if bless {
            std::fs::write(&golden_path, &rendered).unwrap();
        }
        let golden = std::fs::read_to_string(&golden_path).unwrap();
        let expected: Vec<Turn> = serde_json::from_str(&golden).unwrap();
        assert_eq!(conv.turns, expected, "{} differs from its golden file", g.fixture);
        // and the whole thing passes the filters against its own captions
        let verdict = run_filter_pipeline(&FilterInput::parsed(&conv), &FilterConfig::default());
        assert!(verdict.passed(), "{}: {:?}", g.fixture, verdict.reasons);
    }
    "3 sample dialogues match their turn/image goldens".into()
}

/// Strings built from the parser's own vocabulary so that every branch is hit.
pub fn fuzz_string(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 24] = [
        "Human: ", "Assistant: ", "**Human**: ", "human: ", "Assistant:", "\n", "\n", " ", "hello", "a picture",
        "<img0> ", " </img0>", "<img1>", "</img1>", "<img", "</img", "<img01>", "<img9>", ">", "<", "</img2>",
        "é漢", "\t", "Human: hi\nAssistant: ok\n",
    ];
    let n = rng.random_range(0..30);
    let mut s = String::new();
    for _ in 0..n {
        if rng.random_bool(0.1) {
            s.push(char::from_u32(rng.random_range(0..0x3000)).unwrap_or('?'));
        } else {
            s.push_str(PIECES.choose(rng).unwrap());
        }
    }
    s
}

fn defect_label(kind: &ParseDefectKind) -> String {
    match kind {
        ParseDefectKind::Tag { defect } => match defect {
            TagDefectKind::MalformedToken => "tag:malformed",
            TagDefectKind::MismatchedClose { .. } => "tag:mismatched",
            TagDefectKind::StrayClose { .. } => "tag:stray",
            TagDefectKind::Unclosed { .. } => "tag:unclosed",
            TagDefectKind::Nested => "tag:nested",
            TagDefectKind::EmptyDescription { .. } => "tag:empty",
        }
        .to_string(),
        ParseDefectKind::ConsecutiveSpeaker { .. } => "consecutive".into(),
        ParseDefectKind::EmptyMessage { .. } => "empty_message".into(),
        other => format!("{other:?}"),
    }
}

pub fn check_parser_fuzz(count: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
    let mut passed = 0usize;
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for i in 0..count {
        let text = fuzz_string(&mut rng);
        let outcome = std::panic::catch_unwind(|| parse_turns(&text));
        let outcome = outcome.unwrap_or_else(|_| panic!("parser panicked on input {i}: {text:?}"));
        match outcome {
            Ok(turns) => {
                assert!(!turns.is_empty(), "input {i}: accepted with no turns");
                passed += 1;
            }
            Err(defects) => {
                assert!(!defects.is_empty(), "input {i}: rejected without a defect");
                for d in &defects {
                    if let Some(span) = &d.span {
                        assert!(span.end <= text.len() && text.is_char_boundary(span.start) && text.is_char_boundary(span.end));
                    }
                    seen.insert(defect_label(&d.kind));
                }
            }
        }
    }
    let wanted = [
        "NoMessages", "LeadingText", "FirstSpeakerNotHuman", "consecutive", "empty_message",
        "UnansweredFinalInstruction", "tag:malformed", "tag:mismatched", "tag:stray", "tag:unclosed", "tag:nested",
        "tag:empty",
    ];
    for w in wanted {
        assert!(seen.contains(w), "fuzz corpus never produced defect {w}");
    }
    assert!(passed > 0, "fuzz corpus never produced a clean parse");
    format!("{count} fuzz strings: 0 crashes, {passed} clean parses, {} defect kinds hit", seen.len())
}

// ---------------------------------------------------------------- filters

pub struct FilterCase {
    pub conversation: Conversation,
    pub expected: BTreeSet<ReasonCode>,
}

fn text(s: &str) -> Segment {
    Segment::Text { content: s.to_string() }
}

fn image(index: u32, description: &str) -> Segment {
    Segment::ImageRef { index, description: description.to_string() }
}

fn case(id: String, captions: &[&str], turns: Vec<Turn>, expected: &[ReasonCode]) -> FilterCase {
    FilterCase {
        conversation: Conversation { id, turns, roster: roster(captions), provenance: Provenance::default() },
        expected: expected.iter().copied().collect(),
    }
}

fn qa(instruction: Vec<Segment>, response: Vec<Segment>) -> Turn {
    Turn { instruction, response }
}

/// Forty crafted conversations: 5 clean, 1 on the turn limit, 8 with drift
/// at or below 0.1, 8 just above it, 6 unknown indices, 6 duplicate copies
/// (one also drifted) and 6 with six turns. Captions are 20 chars so each
/// substituted char moves the normalized distance by 0.05.
pub fn filter_corpus() -> Vec<FilterCase> {
    const CAPS: [&str; 8] = [
        "a dog on a red couch",
        "two cats in a garden",
        "a boat on a calm sea",
        "an old brick factory",
        "fresh bread on table",
        "snow on a pine grove",
        "kids playing chess!!",
        "a tram in the street",
    ];
    for c in CAPS {
        assert_eq!(c.chars().count(), 20);
    }
    let swap = |s: &str, n: usize| -> String {
        s.chars().enumerate().map(|(i, c)| if i < n { if c == 'Z' { 'Y' } else { 'Z' } } else { c }).collect()
    };
    let mut out = Vec::new();
    for (k, cap) in CAPS.iter().enumerate() {
        let other = CAPS[(k + 1) % 8];
        if k < 5 {
            out.push(case(
                format!("clean-{k}"),
                &[cap, other],
                vec![
                    qa(vec![text("Show me something.")], vec![text("Here: "), image(0, cap)]),
                    qa(vec![text("And another?"), image(1, other)], vec![text("That one is nice too.")]),
                ],
                &[],
            ));
        }
        // 0.05 for odd k, exactly 0.10 for even k: both pass
        let near = swap(cap, if k % 2 == 0 { 2 } else { 1 });
        assert!(normalized_edit_distance(&near, cap) <= 0.1);
        out.push(case(
            format!("drift-below-{k}"),
            &[cap],
            vec![qa(vec![text("Picture please.")], vec![image(0, &near)])],
            &[],
        ));
        // 3/20 = 0.15 for even k, 3/23 ~ 0.13 for odd k
        let far = if k % 2 == 0 { swap(cap, 3) } else { format!("{cap}!!!") };
        let d = normalized_edit_distance(&far, cap);
        assert!(d > 0.1 && d <= 0.15, "{far:?}: {d}");
        out.push(case(
            format!("drift-above-{k}"),
            &[cap],
            vec![qa(vec![text("Picture please.")], vec![image(0, &far)])],
            &[ReasonCode::DescriptionDrift],
        ));
        if k < 6 {
            out.push(case(
                format!("unknown-{k}"),
                &[cap, other],
                vec![qa(vec![text("Hi"), image(0, cap)], vec![text("Also "), image(2 + k as u32, "a mystery image")])],
                &[ReasonCode::UnknownImage],
            ));
            // the second copy sits in the same turn for even k, a later one for odd k
            let turns = if k % 2 == 0 {
                vec![qa(vec![image(0, cap)], vec![text("Again: "), image(0, cap)])]
            } else {
                vec![qa(vec![image(0, cap)], vec![text("ok")]), qa(vec![text("Once more")], vec![image(0, cap)])]
            };
            let mut c = case(format!("duplicate-{k}"), &[cap], turns, &[ReasonCode::DuplicateImageCopy]);
            if k == 5 {
                // a copy that has also drifted trips both rules
                c.conversation.turns[1].response = vec![image(0, &swap(cap, 5))];
                c.expected.insert(ReasonCode::DescriptionDrift);
            }
            out.push(c);
            let mut turns = vec![qa(vec![text("Start")], vec![image(0, cap)])];
            for t in 1..6 {
                turns.push(qa(vec![text(&format!("question {t}"))], vec![text(&format!("answer {t}"))]));
            }
            out.push(case(format!("six-turns-{k}"), &[cap], turns, &[ReasonCode::TurnLimitExceeded]));
        }
    }
    let mut five: Vec<Turn> = vec![qa(vec![text("Start")], vec![image(0, CAPS[0])])];
    for t in 1..5 {
        five.push(qa(vec![text(&format!("q{t}"))], vec![text(&format!("a{t}"))]));
    }
    out.push(case("five-turns".into(), &[CAPS[0]], five, &[]));
    out
}

fn permutations(items: &[Check]) -> Vec<Vec<Check>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let first = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, first);
            out.push(p);
        }
    }
    out
}

pub fn check_filter_suite() -> String {
    let corpus = filter_corpus();
    assert_eq!(corpus.len(), 40);
    let ids: BTreeSet<&str> = corpus.iter().map(|c| c.conversation.id.as_str()).collect();
    assert_eq!(ids.len(), 40, "ids are unique");
    let cfg = FilterConfig::default();
    let orders = permutations(&Check::ALL);
    assert_eq!(orders.len(), 24);
    let mut rejected = 0;
    for c in &corpus {
        let input = FilterInput::parsed(&c.conversation);
        let reference = run_filter_pipeline(&input, &cfg);
        let got: BTreeSet<ReasonCode> = reference.reasons.iter().copied().collect();
        assert_eq!(got, c.expected, "{}", c.conversation.id);
        assert_eq!(reference.passed(), c.expected.is_empty(), "{}", c.conversation.id);
        rejected += usize::from(!reference.passed());
        for order in &orders {
            let v: FilterVerdict = run_checks(&input, order, &cfg);
            assert_eq!(v, reference, "{} under order {order:?}", c.conversation.id);
        }
    }
    format!("40 conversations, {rejected} rejected, verdicts identical under all 24 check orders")
}

// ---------------------------------------------------------------- in-context triples

pub fn check_triple_distribution(draws: usize) -> String {
    let seed_set = load_seed_examples(&fixture("seed12.jsonl")).unwrap();
    assert_eq!(seed_set.len(), 12);
    let feasible = oracles::feasible_triples(&seed_set);
    assert!(!feasible.is_empty());
    let mut counts: BTreeMap<[usize; 3], usize> = feasible.iter().map(|t| (*t, 0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7219);
    for _ in 0..draws {
        let t = select_in_context_indices(&seed_set, &mut rng).unwrap();
        assert!(oracles::triple_ok(&seed_set, t), "infeasible triple {t:?}");
        *counts.get_mut(&t).unwrap_or_else(|| panic!("{t:?} not in the feasible set")) += 1;
    }
    let expected = draws as f64 / feasible.len() as f64;
    let mut worst = 0f64;
    for (t, &n) in &counts {
        let rel = (n as f64 - expected).abs() / expected;
        assert!(rel <= 0.20, "triple {t:?}: {n} draws vs {expected:.1} expected ({:.1}% off)", rel * 100.0);
        worst = worst.max(rel);
    }
    format!(
        "{draws} draws all feasible; {} feasible triples each within {:.1}% of uniform (limit 20%)",
        feasible.len(),
        worst * 100.0
    )
}

// ---------------------------------------------------------------- end to end

pub const COMPARED: [&str; 3] = [pipeline::ACCEPTED, pipeline::VERDICTS, pipeline::STATS];

pub fn run_fixture_pipeline(root: &Path, config: PipelineConfig) -> Workspace {
    let mut ws = fresh_workspace(root, config);
    pipeline::run_all(
        &mut ws,
        &fixture("corpus200.tsv"),
        Some(&fixture("corpus200.embeddings.jsonl")),
        &StageOptions::default(),
    )
    .unwrap();
    ws
}

pub fn check_end_to_end_determinism() -> String {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ws_a = run_fixture_pipeline(a.path(), fixture_config());
    // different concurrency, same seeds
    let mut cfg_b = fixture_config();
    cfg_b.backend.max_inflight = 1;
    let ws_b = run_fixture_pipeline(b.path(), cfg_b);
    for name in COMPARED {
        let x = std::fs::read(ws_a.path(name)).unwrap();
        let y = std::fs::read(ws_b.path(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
    let accepted: Vec<Conversation> = ws_a.read_jsonl(pipeline::ACCEPTED).unwrap();
    let verdicts: Vec<FilterVerdict> = ws_a.read_jsonl(pipeline::VERDICTS).unwrap();
    assert!(!accepted.is_empty(), "nothing accepted");
    assert!(accepted.len() < verdicts.len(), "the mock's planted defects were all missed");
    ws_a.verify().unwrap();
    ws_b.verify().unwrap();
    let hash = mmdialog_core::rng::sha256_hex(std::fs::read(ws_a.path(pipeline::ACCEPTED)).unwrap());
    format!(
        "two runs byte-identical on accepted/verdicts/stats ({} of {} accepted, accepted.jsonl sha256 {})",
        accepted.len(),
        verdicts.len(),
        &hash[..12]
    )
}

// ---------------------------------------------------------------- protocol

/// Scripted label for the i-th item of a batch.
pub fn scripted(i: usize, id: &str) -> AnnotationInput {
    use Characteristic::*;
    let (quality, characteristics, error_tags): (QualityLabel, Vec<Characteristic>, Vec<ErrorTag>) = match i % 5 {
        0 => (QualityLabel::Excellent, vec![ImageCreation, ImageComparison], vec![]),
        1 => (QualityLabel::Satisfactory, vec![IntrinsicImageUnderstanding, ExtrinsicImageUnderstanding], vec![]),
        2 => (QualityLabel::Poor, vec![], vec![ErrorTag::Hallucination]),
        3 => (QualityLabel::Satisfactory, vec![ImageComparison], vec![]),
        _ => (QualityLabel::Poor, vec![], vec![ErrorTag::ImgCapMismatch, ErrorTag::Incoherence]),
    };
    AnnotationInput {
        conversation_id: id.to_string(),
        quality,
        characteristics: characteristics.into_iter().collect(),
        error_tags: error_tags.into_iter().collect(),
        annotator: format!("annotator-{}", i % 2),
    }
}

pub fn check_protocol() -> String {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig { batch_size: 5, freeze_after: 3, ..fixture_config() };
    let ws = clustered_workspace(dir.path(), cfg);
    let mut store = pipeline::open_seed_store(&ws).unwrap();
    let mut sizes = vec![0usize];
    for round in 0..3u32 {
        let (state, report) = pipeline::run_iteration(&ws, &mut store).unwrap();
        assert_eq!(state.iteration, round);
        assert_eq!(state.batch.len(), 5);
        assert_eq!(report.queued, 5);
        // the first batch has no seed set to draw from; later ones do
        assert_eq!(report.bootstrap, round == 0, "round {round}");
        let batch = state.batch.clone();
        // a second batch cannot start while this one is pending
        assert!(matches!(pipeline::run_iteration(&ws, &mut store), Err(PipelineError::Seed(SeedError::PendingAnnotations(_)))));
        for (i, id) in batch.iter().enumerate() {
            store.submit_annotation(scripted(i, id)).unwrap();
            if round == 1 && i == 2 {
                // process restart mid-iteration
                let before = store.snapshot();
                drop(store);
                store = pipeline::open_seed_store(&ws).unwrap();
                assert_eq!(*store.snapshot(), *before, "state changed across restart");
            }
        }
        let delta = store.promote_and_advance().unwrap();
        let expected: Vec<String> = batch.iter().enumerate().filter(|(i, _)| matches!(i % 5, 0 | 1 | 3)).map(|(_, id)| id.clone()).collect();
        assert_eq!(delta.promoted, expected, "round {round}");
        sizes.push(delta.seed_set_size);
        assert_eq!(delta.seed_set_size, sizes[round as usize] + 3);
        assert_eq!(delta.frozen, round == 2);
    }
    assert_eq!(store.seed_set().len(), 9);
    let snapshot = store.snapshot();
    drop(store);
    let mut store = pipeline::open_seed_store(&ws).unwrap();
    assert_eq!(*store.snapshot(), *snapshot, "state changed across restart");
    assert!(store.snapshot().frozen);
    assert!(matches!(pipeline::run_iteration(&ws, &mut store), Err(PipelineError::Seed(SeedError::Frozen))));
    let last = snapshot.closed_batches.last().unwrap().items[0].conversation.id.clone();
    assert!(matches!(store.submit_annotation(scripted(0, &last)), Err(SeedError::Frozen)));
    assert!(matches!(store.promote_and_advance(), Err(SeedError::Frozen)));
    // the seed-set file mirrors the store
    let on_disk = load_seed_examples(&store.dir().join(mmdialog_core::seedset::SEED_SET_FILE)).unwrap();
    assert_eq!(on_disk, store.seed_set());
    format!("3 iterations of 5: seed set 0 -> {sizes:?}, frozen after iteration 3, restart-stable, later attempts rejected")
}

// ---------------------------------------------------------------- stats

pub fn random_dataset(rng: &mut ChaCha8Rng) -> Vec<Conversation> {
    let n = rng.random_range(0..12);
    (0..n)
        .map(|c| {
            let turns = (0..rng.random_range(1..=6))
                .map(|_| {
                    let mut side = || -> Vec<Segment> {
                        (0..rng.random_range(1..4))
                            .map(|_| {
                                if rng.random_bool(0.3) {
                                    image(rng.random_range(0..4), "x")
                                } else {
                                    text(WORDS.choose(rng).unwrap())
                                }
                            })
                            .collect()
                    };
                    let instruction = side();
                    let response = side();
                    Turn { instruction, response }
                })
                .collect();
            Conversation { id: format!("c{c}"), turns, roster: Roster::default(), provenance: Provenance::default() }
        })
        .collect()
}

/// Exact identities on one dataset; returns the number of images seen.
pub fn assert_stats_identities(dataset: &[Conversation]) -> u64 {
    let (mut instr, mut resp) = (0u64, 0u64);
    for c in dataset {
        for t in &c.turns {
            instr += t.instruction.iter().filter(|s| matches!(s, Segment::ImageRef { .. })).count() as u64;
            resp += t.response.iter().filter(|s| matches!(s, Segment::ImageRef { .. })).count() as u64;
        }
    }
    let n = dataset.len() as u64;
    let s = corpus_stats(dataset);
    assert_eq!(s.totals.instruction_images, instr);
    assert_eq!(s.totals.response_images, resp);
    let h = per_turn_image_histogram(dataset);
    // integer form of "the histogram mass sums to the average": shared
    // denominator, numerators add up
    assert_eq!(h.total_images(), instr + resp);
    assert_eq!(h.dataset_conversations, n);
    if n == 0 {
        assert_eq!(s.avg_images, None);
        assert!(h.bins.is_empty());
        return 0;
    }
    let ai = s.avg_images_instructions.unwrap();
    let ar = s.avg_images_responses.unwrap();
    let total = s.avg_images.unwrap();
    assert_eq!(ai, instr as f64 / n as f64);
    assert_eq!(ar, resp as f64 / n as f64);
    assert_eq!(ai + ar, total, "instruction + response averages must equal the total exactly");
    let mass: f64 = h.mass().iter().sum();
    assert!(
        (mass - total).abs() <= MASS_TOLERANCE * total.max(1.0),
        "histogram mass {mass} vs average {total}"
    );
    let full = dataset_stats(dataset, None);
    assert_eq!(full.corpus, s);
    instr + resp
}

/// Float rounding allowance for summing per-bin fractions; the integer
/// identity above is exact.
pub const MASS_TOLERANCE: f64 = 1e-12;

pub fn check_stats_identities(datasets: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0x57A7);
    let mut images = 0;
    for _ in 0..datasets {
        images += assert_stats_identities(&random_dataset(&mut rng));
    }
    let dir = tempfile::tempdir().unwrap();
    let ws = run_fixture_pipeline(dir.path(), fixture_config());
    let accepted: Vec<Conversation> = ws.read_jsonl(pipeline::ACCEPTED).unwrap();
    let all: Vec<Conversation> = ws.read_jsonl(pipeline::CONVERSATIONS).unwrap();
    images += assert_stats_identities(&accepted) + assert_stats_identities(&all);
    let written: mmdialog_core::stats::DatasetStats = ws.read_json(pipeline::STATS).unwrap();
    assert_eq!(written.corpus, corpus_stats(&accepted));
    format!("{datasets} random datasets plus the fixture's parsed and accepted sets ({images} images): identities hold")
}
