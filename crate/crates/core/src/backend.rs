//! Generation backend abstraction plus deterministic in-process stubs.
//!
//! A [`GenerationBackend`] turns one prompt into one sampled completion.
//! Remote chat-completion endpoints and the toy policy both implement it, so
//! the rollout, evaluation, and judging code paths never care where text
//! comes from. The stubs here are deterministic: given the same prompt and
//! sampling seed they return the same bytes, which is what makes pipeline
//! runs reproducible in tests.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendIdentity {
    pub name: String,
    pub model: String,
}

impl fmt::Display for BackendIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.name, self.model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendCaps {
    /// Largest number of in-flight `generate` calls the backend tolerates.
    pub max_concurrency: usize,
    /// Whether generations carry a sequence log-probability.
    pub supports_logprobs: bool,
}

/// System and user text for one generation call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptInputs {
    pub system: String,
    pub user: String,
}

/// Sampling controls forwarded to the backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Per-call seed; deterministic backends key their output on it.
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 1024,
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed: Some(seed),
            ..self.clone()
        }
    }
}

/// One sampled completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    /// Completion token count as reported by the backend, when it reports
    /// one.
    pub completion_tokens: Option<u32>,
    /// Sequence log-probability, for backends that expose it.
    pub logprob: Option<f64>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend returned status {status}")]
    Status { status: u16 },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("backend gave up after {attempts} attempts: {source}")]
    RetriesExhausted {
        attempts: u32,
        #[source]
        source: Box<BackendError>,
    },
}

impl BackendError {
    /// Transient errors are worth retrying; protocol errors are not.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status } => *status == 408 || *status == 429 || *status >= 500,
            BackendError::MalformedResponse(_) => false,
            BackendError::RetriesExhausted { .. } => false,
        }
    }
}

pub trait GenerationBackend: Send + Sync {
    fn identity(&self) -> BackendIdentity;
    fn capabilities(&self) -> BackendCaps;
    fn generate(&self, prompt: &PromptInputs, params: &SamplingParams)
        -> Result<Generation, BackendError>;
}

/// Retry schedule for transient backend failures: fixed attempt budget with
/// exponential backoff between attempts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
    pub backoff_multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff_ms: 500,
            backoff_multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    /// A policy that never sleeps, for tests.
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            initial_backoff_ms: 0,
            backoff_multiplier: 1.0,
        }
    }

    /// Run `op`, retrying transient failures until the attempt budget is
    /// spent. Non-transient failures propagate immediately.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let attempts = self.attempts.max(1);
        let mut backoff = self.initial_backoff_ms as f64;
        let mut last = None;
        for attempt in 0..attempts {
            match op() {
                Ok(value) => return Ok(value),
                Err(err) if err.is_transient() => {
                    log::debug!("transient backend failure (attempt {}): {err}", attempt + 1);
                    last = Some(err);
                    if attempt + 1 < attempts && backoff > 0.0 {
                        std::thread::sleep(Duration::from_millis(backoff as u64));
                        backoff *= self.backoff_multiplier;
                    }
                }
                Err(err) => return Err(err),
            }
        }
        Err(BackendError::RetriesExhausted {
            attempts,
            source: Box::new(last.expect("at least one attempt ran")),
        })
    }
}

/// Map `f` over `0..n` with at most `max_concurrency` worker threads,
/// returning results in index order regardless of completion order.
pub fn bounded_map<T, F>(n: usize, max_concurrency: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if n == 0 {
        return Vec::new();
    }
    let workers = max_concurrency.max(1).min(n);
    if workers == 1 {
        return (0..n).map(f).collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= n {
                    break;
                }
                let value = f(index);
                *slots[index].lock().expect("result slot poisoned") = Some(value);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result slot poisoned")
                .expect("worker filled every slot")
        })
        .collect()
}

/// Stub backend that serves a fixed list of responses.
///
/// Selection is keyed on the sampling seed when one is provided
/// (`responses[seed % len]`), so concurrent callers get deterministic
/// responses; without a seed a shared cursor cycles through the list.
pub struct ScriptedBackend {
    responses: Vec<String>,
    cursor: Mutex<usize>,
    report_tokens: bool,
}

impl ScriptedBackend {
    pub fn new(responses: Vec<String>) -> Self {
        assert!(!responses.is_empty(), "scripted backend needs responses");
        Self {
            responses,
            cursor: Mutex::new(0),
            report_tokens: true,
        }
    }

    /// Same stub, but omitting token usage so callers exercise their
    /// whitespace fallback.
    pub fn without_token_counts(mut self) -> Self {
        self.report_tokens = false;
        self
    }
}

impl GenerationBackend for ScriptedBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: "stub".to_string(),
            model: "scripted".to_string(),
        }
    }

    fn capabilities(&self) -> BackendCaps {
        BackendCaps {
            max_concurrency: usize::MAX,
            supports_logprobs: false,
        }
    }

    fn generate(
        &self,
        _prompt: &PromptInputs,
        params: &SamplingParams,
    ) -> Result<Generation, BackendError> {
        let index = match params.seed {
            Some(seed) => (seed % self.responses.len() as u64) as usize,
            None => {
                let mut cursor = self.cursor.lock().expect("cursor poisoned");
                let index = *cursor % self.responses.len();
                *cursor += 1;
                index
            }
        };
        let text = self.responses[index].clone();
        let completion_tokens = self
            .report_tokens
            .then(|| text.split_whitespace().count() as u32);
        Ok(Generation {
            text,
            completion_tokens,
            logprob: None,
        })
    }
}

/// Stub backend that answers by user-prompt lookup: the first entry whose
/// key is a substring of the user text wins.
pub struct KeyedBackend {
    entries: Vec<(String, String)>,
}

impl KeyedBackend {
    pub fn new(entries: Vec<(String, String)>) -> Self {
        Self { entries }
    }
}

impl GenerationBackend for KeyedBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: "stub".to_string(),
            model: "keyed".to_string(),
        }
    }

    fn capabilities(&self) -> BackendCaps {
        BackendCaps {
            max_concurrency: usize::MAX,
            supports_logprobs: false,
        }
    }

    fn generate(
        &self,
        prompt: &PromptInputs,
        _params: &SamplingParams,
    ) -> Result<Generation, BackendError> {
        let text = self
            .entries
            .iter()
            .find(|(key, _)| prompt.user.contains(key))
            .map(|(_, response)| response.clone())
            .ok_or_else(|| {
                BackendError::MalformedResponse(format!(
                    "no scripted entry matches prompt {:?}",
                    prompt.user
                ))
            })?;
        let completion_tokens = Some(text.split_whitespace().count() as u32);
        Ok(Generation {
            text,
            completion_tokens,
            logprob: None,
        })
    }
}

/// Wrapper that fails the first `fail_first` calls for each distinct prompt
/// with a transient error, then delegates. For retry-path tests.
pub struct FlakyBackend<B> {
    inner: B,
    fail_first: u32,
    seen: Mutex<HashMap<String, u32>>,
}

impl<B> FlakyBackend<B> {
    pub fn new(inner: B, fail_first: u32) -> Self {
        Self {
            inner,
            fail_first,
            seen: Mutex::new(HashMap::new()),
        }
    }
}

impl<B: GenerationBackend> GenerationBackend for FlakyBackend<B> {
    fn identity(&self) -> BackendIdentity {
        self.inner.identity()
    }

    fn capabilities(&self) -> BackendCaps {
        self.inner.capabilities()
    }

    fn generate(
        &self,
        prompt: &PromptInputs,
        params: &SamplingParams,
    ) -> Result<Generation, BackendError> {
        let key = format!("{}\u{0}{}\u{0}{:?}", prompt.system, prompt.user, params.seed);
        {
            let mut seen = self.seen.lock().expect("seen map poisoned");
            let count = seen.entry(key).or_insert(0);
            if *count < self.fail_first {
                *count += 1;
                return Err(BackendError::Transport("injected failure".to_string()));
            }
        }
        self.inner.generate(prompt, params)
    }
}

/// Wrapper that records the high-water mark of concurrent `generate` calls.
pub struct ConcurrencyProbe<B> {
    inner: B,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
    hold: Duration,
}

impl<B> ConcurrencyProbe<B> {
    pub fn new(inner: B, hold: Duration) -> Self {
        Self {
            inner,
            in_flight: AtomicUsize::new(0),
            high_water: AtomicUsize::new(0),
            hold,
        }
    }

    pub fn high_water(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }
}

impl<B: GenerationBackend> GenerationBackend for ConcurrencyProbe<B> {
    fn identity(&self) -> BackendIdentity {
        self.inner.identity()
    }

    fn capabilities(&self) -> BackendCaps {
        self.inner.capabilities()
    }

    fn generate(
        &self,
        prompt: &PromptInputs,
        params: &SamplingParams,
    ) -> Result<Generation, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.high_water.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(self.hold);
        let result = self.inner.generate(prompt, params);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}

/// Derive a stable per-purpose seed from a base seed and a label such as a
/// query id. Distinct labels give independent seeds.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(user: &str) -> PromptInputs {
        PromptInputs {
            system: "sys".to_string(),
            user: user.to_string(),
        }
    }

    #[test]
    fn retry_policy_retries_transient_and_gives_up() {
        let policy = RetryPolicy::immediate(3);
        let calls = std::cell::Cell::new(0);
        let result: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(BackendError::Transport("down".to_string()))
        });
        assert_eq!(calls.get(), 3);
        match result {
            Err(BackendError::RetriesExhausted { attempts: 3, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn retry_policy_does_not_retry_protocol_errors() {
        let policy = RetryPolicy::immediate(5);
        let calls = std::cell::Cell::new(0);
        let result: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(BackendError::MalformedResponse("bad json".to_string()))
        });
        assert_eq!(calls.get(), 1);
        assert!(matches!(result, Err(BackendError::MalformedResponse(_))));
    }

    #[test]
    fn retry_policy_recovers_after_transient_failure() {
        let policy = RetryPolicy::immediate(3);
        let calls = std::cell::Cell::new(0);
        let result = policy.run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(BackendError::Status { status: 503 })
            } else {
                Ok(7)
            }
        });
        assert_eq!(result.unwrap(), 7);
    }

    #[test]
    fn scripted_backend_is_seed_keyed() {
        let backend = ScriptedBackend::new(vec!["a".to_string(), "b".to_string()]);
        let params = SamplingParams::default();
        let a = backend.generate(&prompt("q"), &params.with_seed(4)).unwrap();
        let b = backend.generate(&prompt("q"), &params.with_seed(5)).unwrap();
        let a2 = backend.generate(&prompt("q"), &params.with_seed(4)).unwrap();
        assert_eq!(a.text, "a");
        assert_eq!(b.text, "b");
        assert_eq!(a2.text, "a");
    }

    #[test]
    fn keyed_backend_matches_substring() {
        let backend = KeyedBackend::new(vec![("apple".to_string(), "fruit".to_string())]);
        let out = backend
            .generate(&prompt("what is an apple?"), &SamplingParams::default())
            .unwrap();
        assert_eq!(out.text, "fruit");
        assert!(backend
            .generate(&prompt("what is a pear?"), &SamplingParams::default())
            .is_err());
    }

    #[test]
    fn flaky_backend_fails_then_recovers_per_prompt() {
        let backend = FlakyBackend::new(ScriptedBackend::new(vec!["ok".to_string()]), 2);
        let params = SamplingParams::default().with_seed(0);
        assert!(backend.generate(&prompt("q"), &params).is_err());
        assert!(backend.generate(&prompt("q"), &params).is_err());
        assert_eq!(backend.generate(&prompt("q"), &params).unwrap().text, "ok");
    }

    #[test]
    fn bounded_map_preserves_index_order() {
        let out = bounded_map(100, 7, |i| i * 2);
        assert_eq!(out, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }

    #[test]
    fn bounded_map_respects_concurrency_limit() {
        let probe = ConcurrencyProbe::new(
            ScriptedBackend::new(vec!["x".to_string()]),
            Duration::from_millis(5),
        );
        let params = SamplingParams::default().with_seed(0);
        bounded_map(12, 3, |_| probe.generate(&prompt("q"), &params).unwrap());
        assert!(probe.high_water() <= 3, "high water {}", probe.high_water());
        assert!(probe.high_water() >= 2, "high water {}", probe.high_water());
    }

    #[test]
    fn derive_seed_is_stable_and_label_sensitive() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }
}
