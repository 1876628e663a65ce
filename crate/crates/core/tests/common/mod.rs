#![allow(dead_code)]

use std::collections::BTreeMap;

use cocot_core::choices::ChoiceSet;
use cocot_core::evaluator::parse_choice;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
pub struct OptionSet {
    pub labels: Vec<String>,
    pub texts: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct ParseCase {
    pub set: String,
    pub response: String,
    pub expected: Option<String>,
    #[serde(default)]
    pub multi_label: bool,
}

#[derive(Debug, Deserialize)]
pub struct ParseCorpus {
    pub sets: BTreeMap<String, OptionSet>,
    pub cases: Vec<ParseCase>,
}

pub fn parse_corpus() -> ParseCorpus {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/parse_choice.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Cases where the parser disagrees with the hand label, as (case, got).
pub fn parse_disagreements(corpus: &ParseCorpus) -> Vec<(&ParseCase, Option<String>)> {
    corpus
        .cases
        .iter()
        .filter_map(|c| {
            let set = &corpus.sets[&c.set];
            let choices = ChoiceSet::new(set.labels.clone(), set.texts.clone()).unwrap();
            let got = parse_choice(&c.response, &choices);
            (got != c.expected).then_some((c, got))
        })
        .collect()
}

use cocot_core::chat::{cache_key, ChatMessage, GenerationParams, ImageRef, MessagePart, Role, TokenUsage};
use cocot_core::evaluator::{Dataset, Protocol, RunRecord, Subtrial, Timing};
use rand::Rng;

/// Everything that feeds a cache key.
#[derive(Debug, Clone)]
pub struct KeyInput {
    pub backend: String,
    pub params: GenerationParams,
    pub messages: Vec<ChatMessage>,
    pub continuation: Option<String>,
}

impl KeyInput {
    pub fn key(&self) -> String {
        cache_key(&self.backend, &self.params, &self.messages, self.continuation.as_deref())
    }
}

pub fn image(n: u64) -> ImageRef {
    ImageRef { uri: format!("img/{n}.png"), media_type: "image/png".into(), sha256: format!("{n:064x}") }
}

pub fn base_key_input(rng: &mut impl Rng) -> KeyInput {
    let n_images = rng.random_range(1..=4);
    let mut parts: Vec<MessagePart> = (0..n_images).map(|_| MessagePart::image(image(rng.random()))).collect();
    parts.push(MessagePart::text(format!("Question {} with options (A) and (B).", rng.random::<u32>())));
    KeyInput {
        backend: format!("backend-{}", rng.random_range(0..5)),
        params: GenerationParams { temperature: rng.random_range(0..10) as f64 / 10.0, ..GenerationParams::default() },
        messages: vec![ChatMessage::user(parts)],
        continuation: rng.random_bool(0.5).then(|| "Yes".to_string()),
    }
}

pub const MUTATION_KINDS: usize = 14;

/// Applies one semantically meaningful change; the result must hash differently.
pub fn mutate(input: &KeyInput, kind: usize, rng: &mut impl Rng) -> KeyInput {
    let mut m = input.clone();
    let msg = &mut m.messages[0];
    match kind {
        0 => m.backend.push('x'),
        1 => m.params.temperature += 0.25,
        2 => m.params.top_p = 0.5,
        3 => m.params.top_k = Some(m.params.top_k.map_or(1, |k| k + 1)),
        4 => m.params.max_tokens += 1,
        5 => m.params.beam_width = Some(m.params.beam_width.map_or(2, |b| b + 1)),
        6 => m.params.seed = Some(m.params.seed.map_or(0, |s| s.wrapping_add(1))),
        7 => {
            let last = msg.parts.len() - 1;
            let MessagePart::Text { text } = &mut msg.parts[last] else { unreachable!() };
            let at = rng.random_range(0..text.len());
            let c = text.as_bytes()[at] as char;
            text.replace_range(at..=at, if c == 'z' { "y" } else { "z" });
        }
        8 => {
            let i = rng.random_range(0..msg.parts.len() - 1);
            let MessagePart::Image { image } = &mut msg.parts[i] else { unreachable!() };
            let flip = if image.sha256.starts_with('f') { "e" } else { "f" };
            image.sha256.replace_range(0..1, flip);
        }
        9 => {
            let n = msg.parts.len();
            msg.parts.swap(n - 2, n - 1);
        }
        10 => msg.role = Role::System,
        11 => m.messages.push(ChatMessage::new(Role::Assistant, vec![MessagePart::text("prior")])),
        12 => m.continuation = if m.continuation.is_some() { None } else { Some("Yes".into()) },
        13 => msg.parts.insert(0, MessagePart::image(image(rng.random()))),
        _ => unreachable!(),
    }
    m
}

/// Same request with every image moved to a different location; keys must not change.
pub fn relocate_images(input: &KeyInput) -> KeyInput {
    let mut m = input.clone();
    for msg in &mut m.messages {
        for p in &mut msg.parts {
            if let MessagePart::Image { image } = p {
                image.uri = format!("/elsewhere/{}", image.uri);
            }
        }
    }
    m
}

pub fn record(dataset: Dataset, id: &str, subtrial: Option<Subtrial>, correct: Option<bool>) -> RunRecord {
    RunRecord {
        dataset,
        instance_id: id.to_string(),
        subtrial,
        strategy: "standard".into(),
        backend: "mock".into(),
        protocol: Protocol::Choice,
        transcript: Vec::new(),
        parsed_answer: correct.map(|_| "A".to_string()),
        gold: Some(if correct == Some(false) { "B" } else { "A" }.to_string()),
        correct,
        presentation: None,
        tie: false,
        flags: Vec::new(),
        error: None,
        usage: TokenUsage::default(),
        template_version: "v".into(),
        seed: 0,
        timing: Timing::default(),
    }
}

/// Four records for one Winoground group with correctness `[T0, T1, I0, I1]`.
pub fn winoground_group(id: &str, pattern: [bool; 4]) -> Vec<RunRecord> {
    Subtrial::ALL
        .into_iter()
        .zip(pattern)
        .map(|(s, ok)| record(Dataset::Winoground, id, Some(s), Some(ok)))
        .collect()
}

/// Brute-force (text, image, group) counts.
pub fn brute_winoground(patterns: &[[bool; 4]]) -> (usize, usize, usize) {
    let mut t = 0;
    let mut i = 0;
    let mut g = 0;
    for p in patterns {
        let text_ok = p[0] && p[1];
        let image_ok = p[2] && p[3];
        if text_ok {
            t += 1;
        }
        if image_ok {
            i += 1;
        }
        if text_ok && image_ok {
            g += 1;
        }
    }
    (t, i, g)
}
