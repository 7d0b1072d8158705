//! Chat-completion backends with retries, client-side rate limiting and
//! bounded parallel batches.

mod http;
mod mock;

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{MockBackend, MockDefect};

use crate::promptkit::PromptBundle;
use crate::rng::sha256_hex;

pub const DEFAULT_TOP_P: f64 = 1.0;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub top_p: f64,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { top_p: DEFAULT_TOP_P, temperature: DEFAULT_TEMPERATURE, max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS }
    }
}

/// One backend reply.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Completion {
    pub text: String,
    pub finish_reason: Option<String>,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    /// Worth retrying: rate limits, 5xx, connection resets.
    #[error("transient: {0}")]
    Transient(String),
    #[error("transport: {0}")]
    Fatal(String),
    #[error("provider_rejected")]
    Rejected { payload: String },
    #[error("prompt_too_long: {0}")]
    PromptTooLong(String),
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("transport error after {attempts} attempt(s): {last}")]
    Transport { attempts: u32, last: String },
    #[error("provider_rejected")]
    ProviderRejected { payload: String },
    #[error("prompt_too_long: {0}")]
    PromptTooLong(String),
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::Transport { .. } => "transport",
            GatewayError::ProviderRejected { .. } => "provider_rejected",
            GatewayError::PromptTooLong(_) => "prompt_too_long",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderMetadata {
    pub backend: String,
    pub model: Option<String>,
    pub latency_ms: u64,
    pub attempts: u32,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub finish_reason: Option<String>,
}

/// A completion bound to the prompt that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTranscript {
    pub text: String,
    pub prompt_fingerprint: String,
    /// Generation hit the output-length limit.
    pub truncated: bool,
    pub metadata: ProviderMetadata,
}

/// Time source for backoff and rate limiting; swapped out in tests.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Virtual time: `sleep` advances the clock instantly and records the call.
#[derive(Debug, Default)]
pub struct ManualClock {
    nanos: AtomicU64,
    sleeps: Mutex<Vec<Duration>>,
}

impl ManualClock {
    pub fn sleeps(&self) -> Vec<Duration> {
        self.sleeps.lock().unwrap().clone()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }
    fn sleep(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
        self.sleeps.lock().unwrap().push(d);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 5, base_delay: Duration::from_secs(1), factor: 2 }
    }
}

impl RetryPolicy {
    /// Wait before attempt `attempt + 1`, given `attempt` failures so far.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay * self.factor.pow(attempt.saturating_sub(1))
    }
}

/// Token bucket refilled at `rpm / 60` tokens per second, holding at most
/// one second's worth (never less than one token).
pub struct RateLimiter {
    per_second: f64,
    capacity: f64,
    state: Mutex<(f64, Duration)>,
}

impl RateLimiter {
    pub fn new(rpm: u32, clock: &dyn Clock) -> Self {
        let per_second = rpm as f64 / 60.0;
        let capacity = per_second.max(1.0);
        RateLimiter { per_second, capacity, state: Mutex::new((capacity, clock.now())) }
    }

    pub fn acquire(&self, clock: &dyn Clock) {
        loop {
            let wait = {
                let mut st = self.state.lock().unwrap();
                let now = clock.now();
                let elapsed = now.saturating_sub(st.1).as_secs_f64();
                st.0 = (st.0 + elapsed * self.per_second).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / self.per_second)
            };
            clock.sleep(wait);
        }
    }
}

#[derive(Debug, Serialize)]
struct AuditRecord<'a> {
    prompt_fingerprint: &'a str,
    backend: &'a str,
    outcome: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metadata: Option<&'a ProviderMetadata>,
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
}

/// `generation_log.jsonl`: one line per request with the prompt and the
/// response or error. Credentials never reach it.
pub struct AuditLog {
    out: Mutex<Box<dyn Write + Send>>,
}

/// In-memory audit sink, for callers that persist the log themselves.
#[derive(Debug, Clone, Default)]
pub struct SharedBuffer(Arc<Mutex<Vec<u8>>>);

impl SharedBuffer {
    pub fn contents(&self) -> Vec<u8> {
        self.0.lock().unwrap().clone()
    }
}

impl Write for SharedBuffer {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl AuditLog {
    pub fn append_to(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog { out: Mutex::new(Box::new(BufWriter::new(file))) })
    }

    pub fn in_memory() -> (Self, SharedBuffer) {
        let buf = SharedBuffer::default();
        (AuditLog { out: Mutex::new(Box::new(buf.clone())) }, buf)
    }

    fn record(&self, backend: &str, bundle: &PromptBundle, result: &Result<RawTranscript, GatewayError>) {
        let fingerprint = bundle.fingerprint();
        let rec = match result {
            Ok(t) => AuditRecord {
                prompt_fingerprint: &fingerprint,
                backend,
                outcome: "ok",
                error: None,
                metadata: Some(&t.metadata),
                prompt: &bundle.system_text,
                response: Some(&t.text),
            },
            Err(e) => AuditRecord {
                prompt_fingerprint: &fingerprint,
                backend,
                outcome: e.code(),
                error: Some(e.to_string()),
                metadata: None,
                prompt: &bundle.system_text,
                response: match e {
                    GatewayError::ProviderRejected { payload } => Some(payload),
                    _ => None,
                },
            },
        };
        let line = serde_json::to_string(&rec).expect("audit records serialise");
        let mut out = self.out.lock().unwrap();
        if let Err(e) = writeln!(out, "{line}") {
            warn!(error = %e, "failed to write generation log");
        }
    }

    pub fn flush(&self) -> std::io::Result<()> {
        self.out.lock().unwrap().flush()
    }
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    params: SamplingParams,
    retry: RetryPolicy,
    clock: Arc<dyn Clock>,
    limiter: Option<RateLimiter>,
    audit: Option<AuditLog>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, params: SamplingParams) -> Self {
        Gateway {
            backend,
            params,
            retry: RetryPolicy::default(),
            clock: Arc::new(SystemClock::default()),
            limiter: None,
            audit: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Replaces the clock; call before [`with_rate_limit`](Self::with_rate_limit).
    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_rate_limit(mut self, rpm: Option<u32>) -> Self {
        self.limiter = rpm.filter(|&r| r > 0).map(|r| RateLimiter::new(r, self.clock.as_ref()));
        self
    }

    pub fn with_audit(mut self, audit: AuditLog) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    fn generate_unlogged(&self, bundle: &PromptBundle) -> Result<RawTranscript, GatewayError> {
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                limiter.acquire(self.clock.as_ref());
            }
            match self.backend.complete(&bundle.system_text, &self.params) {
                Ok(c) => {
                    let truncated = c.finish_reason.as_deref() == Some("length");
                    return Ok(RawTranscript {
                        prompt_fingerprint: sha256_hex(&bundle.system_text),
                        truncated,
                        metadata: ProviderMetadata {
                            backend: self.backend.name().to_string(),
                            model: c.model,
                            latency_ms: started.elapsed().as_millis() as u64,
                            attempts: attempt,
                            prompt_tokens: c.prompt_tokens,
                            completion_tokens: c.completion_tokens,
                            finish_reason: c.finish_reason,
                        },
                        text: c.text,
                    });
                }
                Err(BackendError::Transient(msg)) if attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay_after(attempt);
                    debug!(attempt, ?delay, %msg, "retrying");
                    self.clock.sleep(delay);
                }
                Err(BackendError::Transient(last) | BackendError::Fatal(last)) => {
                    return Err(GatewayError::Transport { attempts: attempt, last })
                }
                Err(BackendError::Rejected { payload }) => return Err(GatewayError::ProviderRejected { payload }),
                Err(BackendError::PromptTooLong(m)) => return Err(GatewayError::PromptTooLong(m)),
            }
        }
    }

    /// Send one prompt verbatim, retrying transient failures.
    pub fn generate(&self, bundle: &PromptBundle) -> Result<RawTranscript, GatewayError> {
        let result = self.generate_unlogged(bundle);
        if let Some(audit) = &self.audit {
            audit.record(self.backend.name(), bundle, &result);
        }
        result
    }

    /// At most `max_inflight` requests at once; results (and audit lines)
    /// come back in submission order.
    pub fn generate_batch(
        &self,
        bundles: &[PromptBundle],
        max_inflight: usize,
    ) -> Vec<Result<RawTranscript, GatewayError>> {
        let results = run_bounded(bundles, max_inflight, |b| self.generate_unlogged(b));
        if let Some(audit) = &self.audit {
            for (bundle, result) in bundles.iter().zip(&results) {
                audit.record(self.backend.name(), bundle, result);
            }
            if let Err(e) = audit.flush() {
                warn!(error = %e, "failed to flush generation log");
            }
        }
        results
    }
}

/// Apply `f` to every item on up to `limit` worker threads, keeping input order.
pub fn run_bounded<T: Sync, R: Send>(items: &[T], limit: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = limit.max(1).min(items.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::ImageGroup;
    use crate::corpus::CaptionedImage;
    use crate::promptkit::{build_bootstrap_prompt, PromptTemplate};

    pub(crate) fn bundle(captions: &[&str]) -> PromptBundle {
        let group = ImageGroup {
            cluster_id: 0,
            images: captions.iter().enumerate().map(|(i, c)| CaptionedImage::new(format!("http://x/{i}"), *c)).collect(),
        };
        build_bootstrap_prompt(&PromptTemplate::builtin(), &group).unwrap()
    }

    struct Flaky {
        failures: AtomicUsize,
        calls: AtomicUsize,
        error: BackendError,
    }

    impl ChatBackend for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn complete(&self, prompt: &str, _: &SamplingParams) -> Result<Completion, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.failures.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok() {
                return Err(self.error.clone());
            }
            Ok(Completion { text: format!("echo {}", prompt.len()), ..Completion::default() })
        }
    }

    fn flaky(failures: usize, error: BackendError) -> Arc<Flaky> {
        Arc::new(Flaky { failures: AtomicUsize::new(failures), calls: AtomicUsize::new(0), error })
    }

    #[test]
    fn backoff_schedule() {
        let clock = Arc::new(ManualClock::default());
        let backend = flaky(3, BackendError::Transient("503".into()));
        let gw = Gateway::new(backend.clone(), SamplingParams::default()).with_clock(clock.clone());
        let t = gw.generate(&bundle(&["a", "b"])).unwrap();
        assert_eq!(t.metadata.attempts, 4);
        assert_eq!(clock.sleeps(), [1, 2, 4].map(Duration::from_secs));
    }

    #[test]
    fn retries_exhaust_after_five_attempts() {
        let clock = Arc::new(ManualClock::default());
        let backend = flaky(usize::MAX, BackendError::Transient("429".into()));
        let gw = Gateway::new(backend.clone(), SamplingParams::default()).with_clock(clock.clone());
        match gw.generate(&bundle(&["a", "b"])) {
            Err(GatewayError::Transport { attempts: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(backend.calls.load(Ordering::SeqCst), 5);
        assert_eq!(clock.sleeps(), [1, 2, 4, 8].map(Duration::from_secs));
    }

    #[test]
    fn permanent_errors_are_not_retried() {
        for (err, code) in [
            (BackendError::Rejected { payload: "{\"finish_reason\":\"content_filter\"}".into() }, "provider_rejected"),
            (BackendError::PromptTooLong("context_length_exceeded".into()), "prompt_too_long"),
            (BackendError::Fatal("401".into()), "transport"),
        ] {
            let backend = flaky(1, err);
            let gw = Gateway::new(backend.clone(), SamplingParams::default()).with_clock(Arc::new(ManualClock::default()));
            let e = gw.generate(&bundle(&["a", "b"])).unwrap_err();
            assert_eq!(e.code(), code);
            assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        }
    }

    #[test]
    fn token_bucket_paces_requests() {
        let clock = ManualClock::default();
        let limiter = RateLimiter::new(120, &clock);
        for _ in 0..10 {
            limiter.acquire(&clock);
        }
        // two tokens up front, then one every half second
        let waited: Duration = clock.sleeps().iter().sum();
        assert!((waited.as_secs_f64() - 4.0).abs() < 1e-6, "{waited:?}");
    }

    #[test]
    fn bounded_run_keeps_order_and_limit() {
        let current = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let items: Vec<usize> = (0..50).collect();
        let out = run_bounded(&items, 8, |&i| {
            let now = current.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            current.fetch_sub(1, Ordering::SeqCst);
            i * 2
        });
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
        assert!(peak.load(Ordering::SeqCst) <= 8);
    }

    #[test]
    fn prompt_is_sent_verbatim() {
        let b = bundle(&["a dog", "a cat"]);
        let gw = Gateway::new(flaky(0, BackendError::Fatal(String::new())), SamplingParams::default());
        let t = gw.generate(&b).unwrap();
        assert_eq!(t.prompt_fingerprint, b.fingerprint());
        assert_eq!(t.text, format!("echo {}", b.system_text.len()));
    }
}
