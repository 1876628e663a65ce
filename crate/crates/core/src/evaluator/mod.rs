//! Task protocols: turn one benchmark instance into chains, calls, and [`RunRecord`]s.

mod parse;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chat::{ChatClient, ChatError, ChatMessage, TokenUsage};
use crate::choices::ChoiceSet;
use crate::datasets::{FactifyPair, RavenPuzzle, WinogroundGroup};
use crate::strategies::{build_chain, extract_json, parse_subquestions, ChainError, Expects, StageInputs, Strategy, StrategyId, TaskPrompt};

pub use parse::parse_choice;

pub const FACTIFY_QUESTION: &str = "Does the second image support the content of the first image?";
pub const RAVEN_CHOICE_QUESTION: &str = "Which candidate image completes the pattern?";
pub const RAVEN_LOGIT_QUESTION: &str = "Does this candidate complete the pattern? Answer Yes or No.";
pub const WINOGROUND_TEXT_QUESTION: &str = "Which caption best matches the image?";
pub const DEFAULT_CONTINUATION: &str = "Yes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Winoground,
    Raven50,
    FactifyV,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Winoground => "winoground",
            Dataset::Raven50 => "raven50",
            Dataset::FactifyV => "factify_v",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "winoground" => Ok(Dataset::Winoground),
            "raven50" | "raven" => Ok(Dataset::Raven50),
            "factify_v" | "factify" => Ok(Dataset::FactifyV),
            _ => Err(format!("unknown dataset {s:?} (expected winoground, raven50, factify_v)")),
        }
    }
}

/// Winoground sub-trials: `T_k` shows image k with both captions, `I_k` shows caption k with both images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subtrial {
    T0,
    T1,
    I0,
    I1,
}

impl Subtrial {
    pub const ALL: [Subtrial; 4] = [Subtrial::T0, Subtrial::T1, Subtrial::I0, Subtrial::I1];

    pub fn as_str(self) -> &'static str {
        match self {
            Subtrial::T0 => "T0",
            Subtrial::T1 => "T1",
            Subtrial::I0 => "I0",
            Subtrial::I1 => "I1",
        }
    }

    fn index(self) -> usize {
        match self {
            Subtrial::T0 | Subtrial::I0 => 0,
            Subtrial::T1 | Subtrial::I1 => 1,
        }
    }
}

/// How a multiple-choice instance is answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// The model names an option in free text.
    Choice,
    /// Each candidate is scored by the likelihood of an affirmative continuation.
    Logit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instance {
    Winoground(WinogroundGroup),
    Raven(RavenPuzzle),
    Factify(FactifyPair),
}

impl Instance {
    pub fn id(&self) -> &str {
        match self {
            Instance::Winoground(g) => &g.id,
            Instance::Raven(p) => &p.id,
            Instance::Factify(p) => &p.id,
        }
    }

    pub fn dataset(&self) -> Dataset {
        match self {
            Instance::Winoground(_) => Dataset::Winoground,
            Instance::Raven(_) => Dataset::Raven50,
            Instance::Factify(_) => Dataset::FactifyV,
        }
    }

    pub fn subtrials(&self) -> Vec<Option<Subtrial>> {
        match self {
            Instance::Winoground(_) => Subtrial::ALL.into_iter().map(Some).collect(),
            _ => vec![None],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub stage: String,
    /// Cache key of the request; for a per-candidate scored stage, a digest over all candidate keys.
    pub prompt_digest: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

/// Wall-clock and cache facts that differ between otherwise identical runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub latency_ms: u64,
    pub calls: u32,
    pub cached_calls: u32,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: Dataset,
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtrial: Option<Subtrial>,
    pub strategy: String,
    pub backend: String,
    pub protocol: Protocol,
    pub transcript: Vec<TranscriptEntry>,
    /// `None` means unparsed.
    pub parsed_answer: Option<String>,
    /// `None` means excluded from scoring.
    pub gold: Option<String>,
    pub correct: Option<bool>,
    /// Original index shown at each presented position, when options were reordered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presentation: Option<Vec<usize>>,
    #[serde(default)]
    pub tie: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub usage: TokenUsage,
    pub template_version: String,
    pub seed: u64,
    #[serde(default)]
    pub timing: Timing,
}

impl RunRecord {
    /// Identity of the trial this record answers.
    pub fn trial_key(&self) -> TrialKey {
        TrialKey {
            backend: self.backend.clone(),
            strategy: self.strategy.clone(),
            instance_id: self.instance_id.clone(),
            subtrial: self.subtrial,
        }
    }

    /// JSON of the record with timing removed; equal digests mean equal outcomes.
    pub fn comparison_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("record serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("timing");
        }
        v.to_string()
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.comparison_json().as_bytes()))
    }
}

/// Digest over an ordered record list, timing excluded.
pub fn records_digest(records: &[RunRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.comparison_json().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrialKey {
    pub backend: String,
    pub strategy: String,
    pub instance_id: String,
    pub subtrial: Option<Subtrial>,
}

/// Settings shared by every trial of a run.
#[derive(Debug, Clone)]
pub struct TrialOptions {
    pub seed: u64,
    pub fixed_order: bool,
    pub continuation: String,
}

impl Default for TrialOptions {
    fn default() -> Self {
        Self { seed: 0, fixed_order: false, continuation: DEFAULT_CONTINUATION.into() }
    }
}

/// Whether the presented order of a Winoground sub-trial is swapped.
pub fn presentation_swapped(seed: u64, instance_id: &str, sub: Subtrial) -> bool {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((instance_id.len() as u64).to_le_bytes());
    h.update(instance_id.as_bytes());
    h.update(sub.as_str().as_bytes());
    h.finalize()[0] & 1 == 1
}

/// A rendered task: prompt, gold label, and presentation order.
struct Task {
    prompt: TaskPrompt,
    gold: Option<String>,
    presentation: Option<Vec<usize>>,
}

fn factify_task(p: &FactifyPair) -> Task {
    let choices = ChoiceSet::letters(&["support", "refute"]).expect("two options");
    let gold = p.label.map(|l| match l {
        crate::datasets::FactifyLabel::Support => "A".to_string(),
        crate::datasets::FactifyLabel::Refute => "B".to_string(),
    });
    Task {
        prompt: TaskPrompt {
            images: vec![p.claim_image.clone(), p.document_image.clone()],
            candidates: vec![],
            question: FACTIFY_QUESTION.into(),
            choices: Some(choices),
            requires_choices: true,
        },
        gold,
        presentation: None,
    }
}

fn raven_choices(n: usize) -> ChoiceSet {
    let texts: Vec<String> = (1..=n).map(|k| format!("Candidate {k}")).collect();
    ChoiceSet::numbered(&texts).expect("at least two candidates")
}

fn raven_task(p: &RavenPuzzle, protocol: Protocol) -> Task {
    let (question, choices) = match protocol {
        Protocol::Choice => (RAVEN_CHOICE_QUESTION, Some(raven_choices(p.candidate_images.len()))),
        Protocol::Logit => (RAVEN_LOGIT_QUESTION, None),
    };
    Task {
        prompt: TaskPrompt {
            images: p.context_images.clone(),
            candidates: p.candidate_images.clone(),
            question: question.into(),
            requires_choices: choices.is_some(),
            choices,
        },
        gold: Some((p.answer_index + 1).to_string()),
        presentation: None,
    }
}

fn winoground_task(g: &WinogroundGroup, sub: Subtrial, opts: &TrialOptions) -> Task {
    let order = if !opts.fixed_order && presentation_swapped(opts.seed, &g.id, sub) { vec![1, 0] } else { vec![0, 1] };
    let k = sub.index();
    let gold_pos = order.iter().position(|&o| o == k).expect("permutation");
    let captions = [&g.caption_0, &g.caption_1];
    let images = [&g.image_0, &g.image_1];
    let (prompt, labels) = match sub {
        Subtrial::T0 | Subtrial::T1 => {
            let texts: Vec<&str> = order.iter().map(|&o| captions[o].as_str()).collect();
            let choices = ChoiceSet::letters(&texts).expect("two captions");
            let labels = choices.labels().to_vec();
            (
                TaskPrompt {
                    images: vec![images[k].clone()],
                    candidates: vec![],
                    question: WINOGROUND_TEXT_QUESTION.into(),
                    choices: Some(choices),
                    requires_choices: true,
                },
                labels,
            )
        }
        Subtrial::I0 | Subtrial::I1 => {
            let choices = ChoiceSet::new(
                vec!["Image 1".into(), "Image 2".into()],
                vec!["the first image".into(), "the second image".into()],
            )
            .expect("two images");
            let labels = choices.labels().to_vec();
            (
                TaskPrompt {
                    images: order.iter().map(|&o| images[o].clone()).collect(),
                    candidates: vec![],
                    question: format!("Which image best matches the caption \"{}\"?", captions[k]),
                    choices: Some(choices),
                    requires_choices: true,
                },
                labels,
            )
        }
    };
    Task { prompt, gold: Some(labels[gold_pos].clone()), presentation: Some(order) }
}

/// Accumulates call bookkeeping for one trial.
#[derive(Default)]
struct Calls {
    usage: TokenUsage,
    timing: Timing,
}

impl Calls {
    fn note(&mut self, latency_ms: u64, cached: bool, attempts: u32, usage: Option<TokenUsage>) {
        self.timing.calls += 1;
        self.timing.latency_ms += latency_ms;
        self.timing.cached_calls += u32::from(cached);
        self.timing.attempts += attempts;
        if let Some(u) = usage {
            self.usage.prompt += u.prompt;
            self.usage.completion += u.completion;
        }
    }
}

struct Outcome {
    transcript: Vec<TranscriptEntry>,
    parsed: Option<String>,
    tie: bool,
    flags: Vec<String>,
    error: Option<String>,
}

fn run_choice_chain(client: &ChatClient, strategy: &Strategy, prompt: &TaskPrompt, calls: &mut Calls) -> Outcome {
    let mut transcript = Vec::new();
    let mut flags = Vec::new();
    let params = client.descriptor().params.clone();
    let result = build_chain(strategy, prompt, |stage, messages: &[ChatMessage]| {
        let r = client.generate(messages, None)?;
        calls.note(r.latency_ms, r.cached, r.attempts, r.token_usage);
        if stage.expects == Expects::StructuredJson && extract_json(&r.text).is_none() {
            flags.push(format!("{}_unstructured", stage.name));
        }
        transcript.push(TranscriptEntry {
            stage: stage.name.clone(),
            prompt_digest: client.key_for(&params, messages, None),
            response: r.text.clone(),
            scores: None,
        });
        Ok::<_, ChatError>(r.text)
    });
    match result {
        Ok(chain) => {
            let last = chain.last().map(|s| s.output.as_str()).unwrap_or_default();
            let parsed = prompt.choices.as_ref().and_then(|c| parse_choice(last, c));
            Outcome { transcript, parsed, tie: false, flags, error: None }
        }
        Err(e) => Outcome { transcript, parsed: None, tie: false, flags, error: Some(chain_error(e)) },
    }
}

fn chain_error(e: ChainError<ChatError>) -> String {
    match e {
        ChainError::Strategy(s) => s.to_string(),
        ChainError::Backend(b) => b.to_string(),
    }
}

/// Index of the maximum score; ties go to the lowest index and are reported.
pub fn argmax_lowest(scores: &[f64]) -> Option<(usize, bool)> {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = scores.iter().position(|&s| s == best)?;
    let tie = scores.iter().filter(|&&s| s == best).count() > 1;
    Some((first, tie))
}

fn run_logit_chain(client: &ChatClient, strategy: &Strategy, prompt: &TaskPrompt, continuation: &str, calls: &mut Calls) -> Outcome {
    let scoring = strategy.for_candidate_scoring();
    let n = scoring.stages.len();
    let mut prefix = scoring.clone();
    prefix.stages.truncate(n - 1);
    let mut out = run_choice_chain(client, &prefix, prompt, calls);
    if out.error.is_some() {
        return out;
    }
    let prior = out.transcript.last().map(|t| t.response.clone());
    let subquestions = if strategy.id == StrategyId::Ddcot {
        match out.transcript.first().map(|t| parse_subquestions(&t.response)) {
            Some(Ok(q)) => Some(q),
            Some(Err(e)) => {
                out.error = Some(e.to_string());
                return out;
            }
            None => None,
        }
    } else {
        None
    };
    let params = client.descriptor().params.clone();
    let mut scores = Vec::with_capacity(prompt.candidates.len());
    let mut digest = Sha256::new();
    for k in 0..prompt.candidates.len() {
        let inputs = StageInputs { prior_output: prior.as_deref(), subquestions: subquestions.as_deref(), candidate: Some(k) };
        let messages = match scoring.render_stage(n - 1, prompt, inputs) {
            Ok(m) => m,
            Err(e) => {
                out.error = Some(e.to_string());
                return out;
            }
        };
        digest.update(client.key_for(&params, &messages, Some(continuation)).as_bytes());
        match client.score(&messages, continuation, None) {
            Ok(s) => {
                calls.note(s.latency_ms, s.cached, s.attempts, None);
                scores.push(s.logprob);
            }
            Err(e) => {
                out.error = Some(e.to_string());
                return out;
            }
        }
    }
    let (best, tie) = argmax_lowest(&scores).expect("six candidates");
    out.transcript.push(TranscriptEntry {
        stage: scoring.stages[n - 1].name.clone(),
        prompt_digest: hex::encode(digest.finalize()),
        response: String::new(),
        scores: Some(scores),
    });
    out.parsed = Some((best + 1).to_string());
    out.tie = tie;
    out
}

/// Runs one trial. Backend and strategy failures become an `error` on the record, never a panic or abort.
pub fn eval_trial(
    client: &ChatClient,
    strategy: &Strategy,
    instance: &Instance,
    subtrial: Option<Subtrial>,
    protocol: Protocol,
    opts: &TrialOptions,
) -> RunRecord {
    let (task, protocol) = match (instance, subtrial) {
        (Instance::Factify(p), _) => (factify_task(p), Protocol::Choice),
        (Instance::Raven(p), _) => (raven_task(p, protocol), protocol),
        (Instance::Winoground(g), Some(sub)) => (winoground_task(g, sub, opts), Protocol::Choice),
        (Instance::Winoground(_), None) => panic!("winoground trials need a sub-trial"),
    };
    let mut calls = Calls::default();
    let outcome = match protocol {
        Protocol::Choice => run_choice_chain(client, strategy, &task.prompt, &mut calls),
        Protocol::Logit => run_logit_chain(client, strategy, &task.prompt, &opts.continuation, &mut calls),
    };
    let correct = match (&outcome.parsed, &task.gold) {
        (Some(p), Some(g)) => Some(p == g),
        _ => None,
    };
    RunRecord {
        dataset: instance.dataset(),
        instance_id: instance.id().to_string(),
        subtrial,
        strategy: strategy.key(),
        backend: client.id().to_string(),
        protocol,
        transcript: outcome.transcript,
        parsed_answer: outcome.parsed,
        gold: task.gold,
        correct,
        presentation: task.presentation,
        tie: outcome.tie,
        flags: outcome.flags,
        error: outcome.error,
        usage: calls.usage,
        template_version: strategy.template_version.clone(),
        seed: opts.seed,
        timing: calls.timing,
    }
}

pub fn eval_factify(client: &ChatClient, strategy: &Strategy, pair: &FactifyPair, opts: &TrialOptions) -> RunRecord {
    eval_trial(client, strategy, &Instance::Factify(pair.clone()), None, Protocol::Choice, opts)
}

pub fn eval_raven_choice(client: &ChatClient, strategy: &Strategy, puzzle: &RavenPuzzle, opts: &TrialOptions) -> RunRecord {
    eval_trial(client, strategy, &Instance::Raven(puzzle.clone()), None, Protocol::Choice, opts)
}

pub fn eval_raven_logit(client: &ChatClient, strategy: &Strategy, puzzle: &RavenPuzzle, opts: &TrialOptions) -> RunRecord {
    eval_trial(client, strategy, &Instance::Raven(puzzle.clone()), None, Protocol::Logit, opts)
}

/// The four sub-trial records of one group, in `T0, T1, I0, I1` order.
pub fn eval_winoground_group(client: &ChatClient, strategy: &Strategy, group: &WinogroundGroup, opts: &TrialOptions) -> Vec<RunRecord> {
    let inst = Instance::Winoground(group.clone());
    Subtrial::ALL
        .into_iter()
        .map(|s| eval_trial(client, strategy, &inst, Some(s), Protocol::Choice, opts))
        .collect()
}
