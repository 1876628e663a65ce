use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;

use super::cache::{CacheEntry, CachedResponse, ResponseCache};
use super::mock::{MockFaults, MockTransport};
use super::transport::{BackendRequest, HealthInfo, Transport};
use super::{
    cache_key, canonical_request, AdapterKind, BackendDescriptor, Capability, ChatError, ChatMessage,
    GenerationParams, GenerationResult, GeminiTransport, HarnessTransport, OpenAiTransport, TransportError,
};

/// Exponential backoff: attempt `k` (0-based) waits `base * 2^k`, scaled by `1 ± jitter`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 5, base_delay: Duration::from_secs(1), jitter: 0.2 }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry_index: u32, rng: &mut impl Rng) -> Duration {
        let nominal = self.base_delay.as_secs_f64() * 2f64.powi(retry_index as i32);
        let scale = if self.jitter > 0.0 { 1.0 + rng.random_range(-self.jitter..=self.jitter) } else { 1.0 };
        Duration::from_secs_f64((nominal * scale).max(0.0))
    }
}

/// Sliding-window request limiter: at most `limit` acquisitions per `window`.
#[derive(Debug)]
pub struct RateLimiter {
    limit: usize,
    window: Duration,
    stamps: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn new(limit: u32, window: Duration) -> Self {
        Self { limit: limit.max(1) as usize, window, stamps: Mutex::new(VecDeque::new()) }
    }

    pub fn per_minute(limit: u32) -> Self {
        Self::new(limit, Duration::from_secs(60))
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut stamps = self.stamps.lock().unwrap();
                let now = Instant::now();
                while stamps.front().is_some_and(|t| now.duration_since(*t) >= self.window) {
                    stamps.pop_front();
                }
                if stamps.len() < self.limit {
                    stamps.push_back(now);
                    return;
                }
                self.window - now.duration_since(*stamps.front().unwrap())
            };
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug)]
struct InFlightGate {
    max: usize,
    current: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(max: u32) -> Self {
        Self { max: max.max(1) as usize, current: Mutex::new(0), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut cur = self.current.lock().unwrap();
        while *cur >= self.max {
            cur = self.cv.wait(cur).unwrap();
        }
        *cur += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.current.lock().unwrap() -= 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutcome {
    pub logprob: f64,
    pub cached: bool,
    pub latency_ms: u64,
    pub attempts: u32,
}

/// Cached, rate-limited, retrying client for one backend. Safe to share across threads.
pub struct ChatClient {
    descriptor: BackendDescriptor,
    transport: Arc<dyn Transport>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    limiter: RateLimiter,
    gate: InFlightGate,
    credential: Option<String>,
    transport_calls: AtomicU64,
}

impl ChatClient {
    /// Builds the transport named by the descriptor's adapter.
    pub fn from_descriptor(descriptor: BackendDescriptor, cache: Option<ResponseCache>) -> Result<Self, ChatError> {
        descriptor.validate()?;
        let timeout = Duration::from_secs(descriptor.timeout_secs.max(1));
        let transport: Arc<dyn Transport> = match descriptor.adapter {
            AdapterKind::Harness => Arc::new(HarnessTransport::new(&descriptor.endpoint, timeout, None)),
            AdapterKind::Openai => Arc::new(OpenAiTransport::new(&descriptor.endpoint, timeout)),
            AdapterKind::Gemini => Arc::new(GeminiTransport::new(&descriptor.endpoint, timeout)),
            AdapterKind::Mock => {
                let spec = descriptor.mock.clone().expect("validated");
                Arc::new(MockTransport::new(descriptor.id.clone(), spec.policy, spec.faults))
            }
        };
        Self::with_transport(descriptor, transport, cache)
    }

    pub fn with_transport(
        descriptor: BackendDescriptor,
        transport: Arc<dyn Transport>,
        cache: Option<ResponseCache>,
    ) -> Result<Self, ChatError> {
        descriptor.validate()?;
        let credential = descriptor.credential();
        Ok(Self {
            limiter: RateLimiter::per_minute(descriptor.rate_limit),
            gate: InFlightGate::new(descriptor.max_in_flight),
            descriptor,
            transport,
            cache,
            retry: RetryPolicy::default(),
            credential,
            transport_calls: AtomicU64::new(0),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Replaces the per-minute limiter, mainly so tests can use short windows.
    pub fn with_rate_window(mut self, window: Duration) -> Self {
        self.limiter = RateLimiter::new(self.descriptor.rate_limit, window);
        self
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    pub fn id(&self) -> &str {
        &self.descriptor.id
    }

    /// Number of transport attempts issued so far (cache hits excluded).
    pub fn transport_calls(&self) -> u64 {
        self.transport_calls.load(Ordering::SeqCst)
    }

    pub fn health(&self) -> Result<HealthInfo, TransportError> {
        self.transport.health()
    }

    pub fn key_for(&self, params: &GenerationParams, messages: &[ChatMessage], continuation: Option<&str>) -> String {
        cache_key(&self.descriptor.id, params, messages, continuation)
    }

    fn require(&self, cap: Capability) -> Result<(), ChatError> {
        if self.descriptor.has(cap) {
            Ok(())
        } else {
            Err(ChatError::CapabilityMissing {
                backend: self.descriptor.id.clone(),
                capability: format!("{cap:?}").to_lowercase(),
            })
        }
    }

    fn check(messages: &[ChatMessage], params: &GenerationParams) -> Result<(), ChatError> {
        if messages.is_empty() {
            return Err(ChatError::Precondition("messages must be non-empty".into()));
        }
        for m in messages {
            m.validate()?;
        }
        params.validate()
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, TransportError>) -> Result<(T, u32), ChatError> {
        let mut rng = rand::rng();
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.gate.acquire();
                self.limiter.acquire();
                self.transport_calls.fetch_add(1, Ordering::SeqCst);
                call()
            };
            let err = match result {
                Ok(v) => return Ok((v, attempt)),
                Err(e) => e,
            };
            let backend = self.descriptor.id.clone();
            if err.is_auth() {
                return Err(ChatError::AuthRejected { backend, detail: err.to_string() });
            }
            if let TransportError::Image { uri, reason } = err {
                return Err(ChatError::ImageUnresolvable { uri, reason });
            }
            if !err.is_transient() {
                return Err(ChatError::RequestRejected { backend, detail: err.to_string() });
            }
            if attempt >= max {
                return Err(ChatError::BackendUnreachable { backend, attempts: attempt, last: err.to_string() });
            }
            let delay = self.retry.delay(attempt - 1, &mut rng);
            tracing::debug!(backend = %self.descriptor.id, attempt, ?delay, error = %err, "retrying");
            std::thread::sleep(delay);
        }
    }

    fn store(&self, key: &str, messages: &[ChatMessage], params: &GenerationParams, continuation: Option<&str>, response: CachedResponse) {
        let Some(cache) = &self.cache else { return };
        let entry = CacheEntry {
            key: key.to_string(),
            request: canonical_request(&self.descriptor.id, params, messages, continuation),
            response,
        };
        if let Err(e) = cache.put(&entry) {
            tracing::warn!(error = %e, "failed to write cache entry");
        }
    }

    /// Generates a reply. `params` defaults to the descriptor's params.
    pub fn generate(&self, messages: &[ChatMessage], params: Option<&GenerationParams>) -> Result<GenerationResult, ChatError> {
        self.require(Capability::Generate)?;
        let params = params.unwrap_or(&self.descriptor.params);
        Self::check(messages, params)?;
        let key = self.key_for(params, messages, None);
        if let Some(CacheEntry { response: CachedResponse::Generate { text, finish_reason, usage }, .. }) =
            self.cache.as_ref().and_then(|c| c.get(&key))
        {
            return Ok(GenerationResult { text, finish_reason, latency_ms: 0, token_usage: usage, cached: true, attempts: 0 });
        }
        let started = Instant::now();
        let req = BackendRequest {
            model: self.descriptor.model_name(),
            messages,
            params,
            continuation: None,
            credential: self.credential.as_deref(),
        };
        let (resp, attempts) = self.with_retries(|| self.transport.generate(&req))?;
        let latency_ms = started.elapsed().as_millis() as u64;
        self.store(
            &key,
            messages,
            params,
            None,
            CachedResponse::Generate { text: resp.text.clone(), finish_reason: resp.finish_reason, usage: resp.usage },
        );
        Ok(GenerationResult {
            text: resp.text,
            finish_reason: resp.finish_reason,
            latency_ms,
            token_usage: resp.usage,
            cached: false,
            attempts,
        })
    }

    /// Total log-likelihood of `continuation` given `messages`.
    pub fn score(&self, messages: &[ChatMessage], continuation: &str, params: Option<&GenerationParams>) -> Result<ScoreOutcome, ChatError> {
        self.require(Capability::Score)?;
        if continuation.trim().is_empty() {
            return Err(ChatError::Precondition("continuation must be non-empty".into()));
        }
        let params = params.unwrap_or(&self.descriptor.params);
        Self::check(messages, params)?;
        let key = self.key_for(params, messages, Some(continuation));
        if let Some(CacheEntry { response: CachedResponse::Score { logprob }, .. }) =
            self.cache.as_ref().and_then(|c| c.get(&key))
        {
            return Ok(ScoreOutcome { logprob, cached: true, latency_ms: 0, attempts: 0 });
        }
        let started = Instant::now();
        let req = BackendRequest {
            model: self.descriptor.model_name(),
            messages,
            params,
            continuation: Some(continuation),
            credential: self.credential.as_deref(),
        };
        let (logprob, attempts) = self.with_retries(|| self.transport.score(&req))?;
        self.store(&key, messages, params, Some(continuation), CachedResponse::Score { logprob });
        Ok(ScoreOutcome { logprob, cached: false, latency_ms: started.elapsed().as_millis() as u64, attempts })
    }
}

/// Convenience constructor for an in-process mock backend with default faults.
pub fn mock_descriptor(id: &str, policy: super::mock::MockPolicy) -> BackendDescriptor {
    BackendDescriptor {
        id: id.to_string(),
        endpoint: String::new(),
        model: None,
        adapter: AdapterKind::Mock,
        capabilities: [Capability::Generate, Capability::Score].into_iter().collect(),
        params: GenerationParams::default(),
        auth: None,
        rate_limit: 1_000_000,
        max_in_flight: 64,
        timeout_secs: 30,
        mock: Some(super::mock::MockSpec { policy, faults: MockFaults::default() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::mock::MockPolicy;
    use crate::chat::FinishReason;
    use rand::SeedableRng;

    fn fast_retry() -> RetryPolicy {
        RetryPolicy { max_attempts: 5, base_delay: Duration::from_millis(1), jitter: 0.2 }
    }

    fn client_with(policy: MockPolicy, faults: MockFaults, cache: Option<ResponseCache>) -> (ChatClient, Arc<MockTransport>) {
        let desc = mock_descriptor("mock", policy.clone());
        let t = Arc::new(MockTransport::new("mock", policy, faults));
        let c = ChatClient::with_transport(desc, t.clone(), cache).unwrap().with_retry(fast_retry());
        (c, t)
    }

    #[test]
    fn echo_fixture() {
        let (c, _) = client_with(MockPolicy::Constant { text: "OK".into() }, MockFaults::default(), None);
        let r = c.generate(&[ChatMessage::user_text("ping")], None).unwrap();
        assert_eq!(r.text, "OK");
        assert_eq!(r.finish_reason, FinishReason::Stop);
        assert!(!r.cached);
    }

    #[test]
    fn second_identical_call_is_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let (c, t) = client_with(MockPolicy::Echo, MockFaults::default(), Some(cache));
        let msgs = [ChatMessage::user_text("hello")];
        let a = c.generate(&msgs, None).unwrap();
        let b = c.generate(&msgs, None).unwrap();
        assert!(!a.cached && b.cached);
        assert_eq!(a.text, b.text);
        assert_eq!(t.stats.total_calls(), 1);
    }

    #[test]
    fn retries_429_then_succeeds() {
        let faults = MockFaults { fail_first: vec![429, 429], ..Default::default() };
        let (c, t) = client_with(MockPolicy::Constant { text: "OK".into() }, faults, None);
        let r = c.generate(&[ChatMessage::user_text("x")], None).unwrap();
        assert_eq!(r.attempts, 3);
        assert_eq!(t.stats.total_calls(), 3);
    }

    #[test]
    fn retries_exhausted() {
        let faults = MockFaults { fail_first: vec![503; 10], ..Default::default() };
        let (c, t) = client_with(MockPolicy::Echo, faults, None);
        let err = c.generate(&[ChatMessage::user_text("x")], None).unwrap_err();
        assert!(matches!(err, ChatError::BackendUnreachable { attempts: 5, .. }));
        assert_eq!(t.stats.total_calls(), 5);
    }

    #[test]
    fn auth_is_not_retried() {
        let faults = MockFaults { fail_first: vec![401; 10], ..Default::default() };
        let (c, t) = client_with(MockPolicy::Echo, faults, None);
        let err = c.generate(&[ChatMessage::user_text("x")], None).unwrap_err();
        assert!(matches!(err, ChatError::AuthRejected { .. }));
        assert_eq!(t.stats.total_calls(), 1);
    }

    #[test]
    fn capability_missing() {
        let mut desc = mock_descriptor("g", MockPolicy::Echo);
        desc.capabilities = [Capability::Generate].into_iter().collect();
        let c = ChatClient::from_descriptor(desc, None).unwrap();
        let err = c.score(&[ChatMessage::user_text("x")], "Yes", None).unwrap_err();
        assert!(matches!(err, ChatError::CapabilityMissing { .. }));
    }

    #[test]
    fn unigram_score_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let (c, t) = client_with(MockPolicy::Unigram { vocab_size: 50 }, MockFaults::default(), Some(cache));
        let msgs = [ChatMessage::user_text("ctx")];
        let a = c.score(&msgs, "Yes", None).unwrap();
        assert!((a.logprob - (1.0f64 / 50.0).ln()).abs() < 1e-12);
        let b = c.score(&msgs, "Yes", None).unwrap();
        assert!(b.cached);
        assert_eq!(a.logprob.to_bits(), b.logprob.to_bits());
        assert_eq!(t.stats.score_calls.load(Ordering::SeqCst), 1);
        assert!(matches!(c.score(&msgs, "", None), Err(ChatError::Precondition(_))));
    }

    #[test]
    fn backoff_schedule_within_jitter() {
        let p = RetryPolicy::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for k in 0..4 {
            let nominal = 2f64.powi(k as i32);
            for _ in 0..50 {
                let d = p.delay(k, &mut rng).as_secs_f64();
                assert!(d >= nominal * 0.8 - 1e-9 && d <= nominal * 1.2 + 1e-9);
            }
        }
    }

    #[test]
    fn in_flight_bound_holds() {
        let mut desc = mock_descriptor("m", MockPolicy::Echo);
        desc.max_in_flight = 3;
        let faults = MockFaults { latency_ms: 15, ..Default::default() };
        let t = Arc::new(MockTransport::new("m", MockPolicy::Echo, faults));
        let c = ChatClient::with_transport(desc, t.clone(), None).unwrap();
        std::thread::scope(|s| {
            for i in 0..16 {
                let c = &c;
                s.spawn(move || c.generate(&[ChatMessage::user_text(format!("q{i}"))], None).unwrap());
            }
        });
        assert_eq!(t.stats.total_calls(), 16);
        assert!(t.stats.max_in_flight.load(Ordering::SeqCst) <= 3);
        assert!(t.stats.max_in_flight.load(Ordering::SeqCst) >= 2);
    }

    #[test]
    fn sliding_window_rate_bound() {
        let mut desc = mock_descriptor("m", MockPolicy::Echo);
        desc.rate_limit = 4;
        let window = Duration::from_millis(150);
        let t = Arc::new(MockTransport::new("m", MockPolicy::Echo, MockFaults::default()));
        let c = ChatClient::with_transport(desc, t.clone(), None).unwrap().with_rate_window(window);
        std::thread::scope(|s| {
            for i in 0..10 {
                let c = &c;
                s.spawn(move || c.generate(&[ChatMessage::user_text(format!("q{i}"))], None).unwrap());
            }
        });
        let mut starts = t.stats.call_starts();
        starts.sort();
        for (i, a) in starts.iter().enumerate() {
            // small slack: the mock stamps its start slightly after the limiter does
            let in_window = starts[i..].iter().filter(|b| b.duration_since(*a) + Duration::from_millis(10) < window).count();
            assert!(in_window <= 4, "{in_window} calls inside one window");
        }
    }
}
