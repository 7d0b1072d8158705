use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, Completion, SamplingParams};
use crate::convparse::extract_image_tags;
use crate::promptkit::{render_image_tag, INPUT_IMAGES_HEADER};
use crate::rng::{derive_seed, rng_from_seed, sha256_hex, PipelineRng};

/// Faults the fallback generator can plant so every filter has work to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MockDefect {
    Drift,
    UnknownImage,
    DuplicateCopy,
    TooManyTurns,
    Truncated,
    BrokenTag,
}

impl MockDefect {
    pub const ALL: [MockDefect; 6] = [
        MockDefect::Drift,
        MockDefect::UnknownImage,
        MockDefect::DuplicateCopy,
        MockDefect::TooManyTurns,
        MockDefect::Truncated,
        MockDefect::BrokenTag,
    ];
}

/// Offline backend. Prompts whose fingerprint has a stored fixture get it
/// back verbatim; anything else gets a small dialogue over the prompt's input
/// images, derived only from the seed and the prompt, so results do not
/// depend on call order or concurrency.
#[derive(Debug)]
pub struct MockBackend {
    seed: u64,
    fixtures: HashMap<String, String>,
    defect_rate: f64,
    delay: Option<Duration>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend {
            seed,
            fixtures: HashMap::new(),
            defect_rate: 0.0,
            delay: None,
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_fixture(mut self, prompt_fingerprint: impl Into<String>, transcript: impl Into<String>) -> Self {
        self.fixtures.insert(prompt_fingerprint.into(), transcript.into());
        self
    }

    /// Probability that a generated dialogue carries one planted defect.
    pub fn with_defect_rate(mut self, rate: f64) -> Self {
        self.defect_rate = rate.clamp(0.0, 1.0);
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn prompt_rng(&self, prompt: &str) -> PipelineRng {
        let digest = sha256_hex(prompt);
        let key = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
        rng_from_seed(derive_seed(self.seed, "mock-dialogue", key))
    }

    fn respond(&self, prompt: &str) -> Completion {
        let fingerprint = sha256_hex(prompt);
        if let Some(text) = self.fixtures.get(&fingerprint) {
            return Completion { text: text.clone(), finish_reason: Some("stop".into()), ..Completion::default() };
        }
        let images = input_images(prompt);
        let mut rng = self.prompt_rng(prompt);
        let defect = (rng.random::<f64>() < self.defect_rate)
            .then(|| MockDefect::ALL[rng.random_range(0..MockDefect::ALL.len())]);
        let (text, finish) = synthesize(&images, defect, &mut rng);
        Completion {
            completion_tokens: Some(text.split_whitespace().count() as u64),
            prompt_tokens: Some(prompt.split_whitespace().count() as u64),
            text,
            finish_reason: Some(finish.into()),
            model: Some("mock".into()),
        }
    }
}

impl ChatBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, prompt: &str, _params: &SamplingParams) -> Result<Completion, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        let out = self.respond(prompt);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(out)
    }
}

/// The `(index, caption)` pairs listed under the prompt's input-image header.
pub(crate) fn input_images(prompt: &str) -> Vec<(u32, String)> {
    let Some(start) = prompt.find(INPUT_IMAGES_HEADER) else { return Vec::new() };
    let block: Vec<&str> = prompt[start + INPUT_IMAGES_HEADER.len()..]
        .lines()
        .skip(1)
        .take_while(|l| !l.trim().is_empty())
        .collect();
    extract_image_tags(&block.join("\n")).tags.into_iter().map(|t| (t.index, t.description)).collect()
}

const OPENERS: [&str; 8] = [
    "I have been thinking about planning a weekend trip.",
    "Could you help me with a small project?",
    "I want to write a short story for my niece.",
    "What do you think makes a photo memorable?",
    "My friend and I are arguing about something.",
    "I am preparing a presentation for my class.",
    "Can you suggest an idea for a birthday card?",
    "I found some old pictures in my drawer.",
];
const SHARES: [&str; 6] = [
    "Here is something I saw recently:",
    "Take a look at this:",
    "What can you tell me about this one?",
    "How does this compare?",
    "This reminded me of our chat:",
    "I took this last summer:",
];
const FOLLOW_UPS: [&str; 7] = [
    "Interesting, can you tell me more about the history behind it?",
    "Which of them would you pick, and why?",
    "Could you show me something with a similar mood?",
    "How would you describe the atmosphere to someone who has never seen it?",
    "That makes sense. Any practical tips?",
    "What would be a good caption for a social media post?",
    "Can you think of a fun fact related to this?",
];
const ANSWERS: [&str; 8] = [
    "Sure! Scenes like this often carry a story of their own.",
    "Great question. The details usually say a lot about the place and the people.",
    "Of course. One idea is to focus on the contrast between light and colour.",
    "I would start with the setting, then move on to the small details.",
    "Many people find that kind of view calming and nostalgic.",
    "A simple approach is to keep the message short and personal.",
    "Here is an image that fits what you described:",
    "Absolutely, this one captures a similar feeling:",
];

fn pick<'a>(rng: &mut PipelineRng, list: &[&'a str]) -> &'a str {
    list[rng.random_range(0..list.len())]
}

fn tag(index: u32, caption: &str) -> String {
    render_image_tag(index, caption).unwrap_or_else(|_| format!("<img{index}> image </img{index}>"))
}

/// A dialogue placing each input image exactly once, optionally with one
/// planted defect. Returns the text and the finish reason.
fn synthesize(images: &[(u32, String)], defect: Option<MockDefect>, rng: &mut PipelineRng) -> (String, &'static str) {
    let turns = rng.random_range(2..=4usize);
    // slot = turn * 2 + side (0 instruction, 1 response)
    let mut slots: Vec<Vec<String>> = vec![Vec::new(); turns * 2];
    for (i, (index, caption)) in images.iter().enumerate() {
        let mut description = caption.clone();
        if defect == Some(MockDefect::Drift) && i == 0 {
            description = "an entirely unrelated picture of a quiet harbour at dawn".to_string();
        }
        slots[rng.random_range(0..turns * 2)].push(tag(*index, &description));
    }
    let last = turns * 2 - 1;
    match defect {
        Some(MockDefect::UnknownImage) => slots[last].push(tag(images.len() as u32, "a picture that was never provided")),
        Some(MockDefect::DuplicateCopy) => {
            if let Some((index, caption)) = images.first() {
                slots[last].push(tag(*index, caption));
            }
        }
        Some(MockDefect::BrokenTag) => {
            let (index, caption) = images.first().cloned().unwrap_or((0, "image".into()));
            slots[last].push(format!("<img{index}> {caption} </img{}>", index + 1));
        }
        _ => {}
    }
    let total_turns = if defect == Some(MockDefect::TooManyTurns) { 6 } else { turns };
    let mut out = String::new();
    for t in 0..total_turns {
        let instr_images = slots.get(t * 2).cloned().unwrap_or_default();
        let resp_images = slots.get(t * 2 + 1).cloned().unwrap_or_default();
        let mut instruction = if t == 0 { pick(rng, &OPENERS).to_string() } else { pick(rng, &FOLLOW_UPS).to_string() };
        if !instr_images.is_empty() {
            instruction = format!("{instruction} {} {}", pick(rng, &SHARES), instr_images.join(" "));
        }
        let mut response = pick(rng, &ANSWERS).to_string();
        if !resp_images.is_empty() {
            response = format!("{response} {}", resp_images.join(" "));
        }
        out.push_str(&format!("Human: {instruction}\nAssistant: {response}\n"));
    }
    if defect == Some(MockDefect::Truncated) {
        let mut cut = out.len() * 2 / 3;
        while !out.is_char_boundary(cut) {
            cut -= 1;
        }
        out.truncate(cut);
        return (out, "length");
    }
    (out, "stop")
}
