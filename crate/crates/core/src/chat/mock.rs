//! Deterministic in-process backend used for CI and baseline simulations.
//!
//! Every policy is a pure function of the policy seed and the request digest,
//! so responses do not depend on call order or concurrency.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::transport::{BackendRequest, BackendResponse, HealthInfo, Transport};
use super::{cache_key, ChatMessage, FinishReason, TokenUsage, TransportError};
use crate::choices::ChoiceSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum MockPolicy {
    /// Replies with the text of the final message.
    Echo,
    /// Replies with a fixed string.
    Constant { text: String },
    /// Picks one of the offered option labels uniformly at random.
    UniformRandom { seed: u64 },
    /// Assigns every (caption, image) pair an iid uniform score and answers
    /// by comparing scores.
    PairScores { seed: u64 },
    /// Looks up `/v1/score` values by request digest, falling back to the
    /// digest of the last attached image, then to `default`.
    ScriptedScores {
        #[serde(default)]
        by_digest: BTreeMap<String, f64>,
        #[serde(default)]
        by_image: BTreeMap<String, f64>,
        #[serde(default = "default_logprob")]
        default: f64,
        #[serde(default = "default_reply")]
        reply: String,
    },
    /// Uniform unigram model: every whitespace token has probability 1/V.
    Unigram { vocab_size: u64 },
}

fn default_logprob() -> f64 {
    -10.0
}

fn default_reply() -> String {
    "Yes".into()
}

/// Policy plus optional fault injection, as written in a backend config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSpec {
    #[serde(flatten)]
    pub policy: MockPolicy,
    #[serde(default)]
    pub faults: MockFaults,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockFaults {
    /// HTTP statuses returned, in order, by the first calls.
    #[serde(default)]
    pub fail_first: Vec<u16>,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub unhealthy: bool,
}

/// Call counters, exposed so tests can assert on traffic.
#[derive(Debug, Default)]
pub struct MockStats {
    pub generate_calls: AtomicU64,
    pub score_calls: AtomicU64,
    pub failed_calls: AtomicU64,
    in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    started: Mutex<Vec<Instant>>,
}

impl MockStats {
    pub fn total_calls(&self) -> u64 {
        self.generate_calls.load(Ordering::SeqCst) + self.score_calls.load(Ordering::SeqCst)
    }

    pub fn call_starts(&self) -> Vec<Instant> {
        self.started.lock().unwrap().clone()
    }
}

pub struct MockTransport {
    backend_id: String,
    policy: MockPolicy,
    faults: MockFaults,
    call_index: AtomicUsize,
    pub stats: MockStats,
}

/// Uniform draw in [0, 1) from a hash of the given fields.
fn hash_unit(parts: &[&[u8]]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().unwrap());
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn seeded_rng(seed: u64, digest: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(digest.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn last_text(messages: &[ChatMessage]) -> String {
    messages.last().map(ChatMessage::text).unwrap_or_default()
}

fn caption_in(text: &str) -> Option<&str> {
    const MARK: &str = "the caption \"";
    let start = text.rfind(MARK)? + MARK.len();
    let end = text[start..].find('"')? + start;
    Some(&text[start..end])
}

impl MockTransport {
    pub fn new(backend_id: impl Into<String>, policy: MockPolicy, faults: MockFaults) -> Self {
        Self {
            backend_id: backend_id.into(),
            policy,
            faults,
            call_index: AtomicUsize::new(0),
            stats: MockStats::default(),
        }
    }

    fn enter(&self) -> Result<InFlight<'_>, TransportError> {
        self.stats.started.lock().unwrap().push(Instant::now());
        let now = self.stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let guard = InFlight(&self.stats);
        if self.faults.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.faults.latency_ms));
        }
        let idx = self.call_index.fetch_add(1, Ordering::SeqCst);
        if let Some(&status) = self.faults.fail_first.get(idx) {
            self.stats.failed_calls.fetch_add(1, Ordering::SeqCst);
            return Err(TransportError::Status { status, body: "scripted fault".into() });
        }
        Ok(guard)
    }

    fn digest(&self, req: &BackendRequest<'_>) -> String {
        cache_key(&self.backend_id, req.params, req.messages, req.continuation)
    }

    fn answer(&self, req: &BackendRequest<'_>) -> String {
        let text = last_text(req.messages);
        match &self.policy {
            MockPolicy::Echo => text,
            MockPolicy::Constant { text } => text.clone(),
            MockPolicy::ScriptedScores { reply, .. } => reply.clone(),
            MockPolicy::Unigram { .. } => "Yes".into(),
            MockPolicy::UniformRandom { seed } => match ChoiceSet::parse_rendered(&text) {
                Some(choices) => {
                    let mut rng = seeded_rng(*seed, &self.digest(req));
                    let i = rng.random_range(0..choices.len());
                    format!("({})", choices.labels()[i])
                }
                None => "The images share a layout but differ in detail.".into(),
            },
            MockPolicy::PairScores { seed } => {
                let Some(choices) = ChoiceSet::parse_rendered(&text) else {
                    return "The images share a layout but differ in detail.".into();
                };
                let images: Vec<_> = req.messages.iter().flat_map(|m| m.images()).collect();
                let seed = seed.to_le_bytes();
                let scores: Vec<f64> = if images.len() == 1 {
                    choices
                        .texts()
                        .iter()
                        .map(|cap| hash_unit(&[&seed, cap.as_bytes(), images[0].sha256.as_bytes()]))
                        .collect()
                } else {
                    let cap = caption_in(&text).unwrap_or_default();
                    images
                        .iter()
                        .take(choices.len())
                        .map(|img| hash_unit(&[&seed, cap.as_bytes(), img.sha256.as_bytes()]))
                        .collect()
                };
                let best = scores
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                format!("({})", choices.labels()[best])
            }
        }
    }
}

struct InFlight<'a>(&'a MockStats);

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Transport for MockTransport {
    fn generate(&self, req: &BackendRequest<'_>) -> Result<BackendResponse, TransportError> {
        self.stats.generate_calls.fetch_add(1, Ordering::SeqCst);
        let _g = self.enter()?;
        let text = self.answer(req);
        let prompt_tokens = req.messages.iter().map(|m| m.text().split_whitespace().count() as u64).sum();
        let completion = text.split_whitespace().count() as u64;
        Ok(BackendResponse {
            text,
            finish_reason: FinishReason::Stop,
            usage: Some(TokenUsage { prompt: prompt_tokens, completion }),
        })
    }

    fn score(&self, req: &BackendRequest<'_>) -> Result<f64, TransportError> {
        self.stats.score_calls.fetch_add(1, Ordering::SeqCst);
        let _g = self.enter()?;
        let continuation = req.continuation.unwrap_or_default();
        Ok(match &self.policy {
            MockPolicy::Unigram { vocab_size } => {
                let n = continuation.split_whitespace().count() as f64;
                n * (1.0 / *vocab_size as f64).ln()
            }
            MockPolicy::ScriptedScores { by_digest, by_image, default, .. } => {
                if let Some(v) = by_digest.get(&self.digest(req)) {
                    *v
                } else {
                    req.messages
                        .iter()
                        .flat_map(|m| m.images())
                        .last()
                        .and_then(|img| by_image.get(&img.sha256))
                        .copied()
                        .unwrap_or(*default)
                }
            }
            MockPolicy::UniformRandom { seed } | MockPolicy::PairScores { seed } => {
                let mut rng = seeded_rng(*seed, &self.digest(req));
                -rng.random_range(0.0..10.0)
            }
            MockPolicy::Echo | MockPolicy::Constant { .. } => -1.0,
        })
    }

    fn health(&self) -> Result<HealthInfo, TransportError> {
        if self.faults.unhealthy {
            return Err(TransportError::Status { status: 503, body: "mock configured unhealthy".into() });
        }
        Ok(HealthInfo {
            mode: "mock".into(),
            model: self.backend_id.clone(),
            capabilities: vec!["generate".into(), "score".into()],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::GenerationParams;

    fn req<'a>(msgs: &'a [ChatMessage], params: &'a GenerationParams, cont: Option<&'a str>) -> BackendRequest<'a> {
        BackendRequest { model: "m", messages: msgs, params, continuation: cont, credential: None }
    }

    #[test]
    fn unigram_closed_form() {
        let t = MockTransport::new("m", MockPolicy::Unigram { vocab_size: 32000 }, MockFaults::default());
        let msgs = [ChatMessage::user_text("context")];
        let p = GenerationParams::default();
        let lp = t.score(&req(&msgs, &p, Some("Yes it does"))).unwrap();
        assert!((lp - 3.0 * (1.0f64 / 32000.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_random_is_a_function_of_the_request() {
        let t = MockTransport::new("m", MockPolicy::UniformRandom { seed: 3 }, MockFaults::default());
        let cs = ChoiceSet::letters(&["support", "refute"]).unwrap();
        let msgs = [ChatMessage::user_text(format!("Does it? {}", cs.render()))];
        let p = GenerationParams::default();
        let a = t.generate(&req(&msgs, &p, None)).unwrap().text;
        let b = t.generate(&req(&msgs, &p, None)).unwrap().text;
        assert_eq!(a, b);
        assert!(a == "(A)" || a == "(B)");
    }

    #[test]
    fn scripted_faults_come_first() {
        let faults = MockFaults { fail_first: vec![429, 503], ..Default::default() };
        let t = MockTransport::new("m", MockPolicy::Constant { text: "OK".into() }, faults);
        let msgs = [ChatMessage::user_text("x")];
        let p = GenerationParams::default();
        assert!(t.generate(&req(&msgs, &p, None)).is_err());
        assert!(t.generate(&req(&msgs, &p, None)).is_err());
        assert_eq!(t.generate(&req(&msgs, &p, None)).unwrap().text, "OK");
        assert_eq!(t.stats.failed_calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn caption_extraction() {
        assert_eq!(caption_in("Which image best matches the caption \"a dog bites a man\"?"), Some("a dog bites a man"));
        assert_eq!(caption_in("no caption here"), None);
    }
}
