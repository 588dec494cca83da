//! Chat-completion access with journaling, retries and rate limiting.

mod extract;
mod fixture;
mod http;
mod journal;
pub mod mock;
mod ratelimit;

pub use extract::{
    extract_code_block, extract_json_block, extract_tag, extract_tagged_blocks, split_think_answer, TaggedBlocks,
};
pub use fixture::{FixtureBackend, PromptKind};
pub use http::HttpBackend;
pub use journal::{Journal, JournalEntry};
pub use ratelimit::RateLimiter;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::model::content_hash;
use crate::tokens::TokenEstimator;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub name: String,
    pub base_url: String,
    /// Environment variable holding the API key; empty for keyless servers.
    #[serde(default)]
    pub api_key_env: String,
    pub max_context: usize,
    /// Provider-side model id; defaults to `name`.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
}

impl ModelEndpoint {
    pub fn new(name: impl Into<String>, base_url: impl Into<String>, max_context: usize) -> Self {
        ModelEndpoint {
            name: name.into(),
            base_url: base_url.into(),
            api_key_env: String::new(),
            max_context,
            model: None,
            requests_per_minute: None,
        }
    }

    pub fn model_id(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl SamplingParams {
    pub fn new(temperature: f64, top_p: f64, max_tokens: u32) -> Result<Self> {
        let p = SamplingParams {
            temperature,
            top_p,
            max_tokens,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature {} < 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Hindsight CoT teacher sampling.
    pub fn teacher() -> Self {
        SamplingParams {
            temperature: 0.999,
            top_p: 0.95,
            max_tokens: 32768,
        }
    }

    /// Candidate generation is greedy.
    pub fn candidates() -> Self {
        SamplingParams {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 8192,
        }
    }

    /// World-model evaluation sampling.
    pub fn evaluation() -> Self {
        SamplingParams {
            temperature: 0.6,
            top_p: 0.95,
            max_tokens: 16384,
        }
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.7,
            top_p: 0.95,
            max_tokens: 8192,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackendError {
    pub transient: bool,
    pub message: String,
}

impl BackendError {
    pub fn transient(message: impl Into<String>) -> Self {
        BackendError {
            transient: true,
            message: message.into(),
        }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        BackendError {
            transient: false,
            message: message.into(),
        }
    }
}

/// Something that can answer one chat-completion sample.
pub trait ChatBackend: Send + Sync {
    fn chat(
        &self,
        endpoint: &ModelEndpoint,
        messages: &[Message],
        params: &SamplingParams,
        sample_index: u32,
    ) -> std::result::Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_attempts: 1,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.min(16));
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

struct Route {
    endpoint: ModelEndpoint,
    backend: Arc<dyn ChatBackend>,
    limiter: Option<RateLimiter>,
}

/// Per-invocation call accounting.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStats {
    /// Completions fetched from a backend.
    pub backend_calls: u64,
    /// Completions served from the journal.
    pub replayed: u64,
    pub per_endpoint: BTreeMap<String, u64>,
}

/// Entry point for every model call in the crate.
pub struct Gateway {
    routes: BTreeMap<String, Route>,
    journal: Option<Journal>,
    retry: RetryPolicy,
    estimator: TokenEstimator,
    backend_calls: AtomicU64,
    replayed: AtomicU64,
    per_endpoint: Mutex<BTreeMap<String, u64>>,
    /// One lock per journal key being fetched, so concurrent identical
    /// requests make a single backend call.
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Gateway {
    pub fn new(journal: Option<Journal>) -> Self {
        Gateway {
            routes: BTreeMap::new(),
            journal,
            retry: RetryPolicy::default(),
            estimator: TokenEstimator::default(),
            backend_calls: AtomicU64::new(0),
            replayed: AtomicU64::new(0),
            per_endpoint: Mutex::new(BTreeMap::new()),
            inflight: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_estimator(mut self, estimator: TokenEstimator) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn register(&mut self, endpoint: ModelEndpoint, backend: Arc<dyn ChatBackend>) -> Result<()> {
        if self.routes.contains_key(&endpoint.name) {
            return Err(Error::Config(format!("duplicate endpoint name `{}`", endpoint.name)));
        }
        let limiter = endpoint.requests_per_minute.map(RateLimiter::per_minute);
        self.routes.insert(
            endpoint.name.clone(),
            Route {
                endpoint,
                backend,
                limiter,
            },
        );
        Ok(())
    }

    pub fn endpoint(&self, name: &str) -> Result<&ModelEndpoint> {
        self.routes
            .get(name)
            .map(|r| &r.endpoint)
            .ok_or_else(|| Error::Config(format!("no endpoint named `{name}`")))
    }

    pub fn endpoint_names(&self) -> impl Iterator<Item = &str> {
        self.routes.keys().map(String::as_str)
    }

    pub fn stats(&self) -> CallStats {
        CallStats {
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
            replayed: self.replayed.load(Ordering::SeqCst),
            per_endpoint: self.per_endpoint.lock().unwrap().clone(),
        }
    }

    /// Journal key of one sample.
    pub fn cache_key(
        endpoint: &ModelEndpoint,
        messages: &[Message],
        params: &SamplingParams,
        sample_index: u32,
    ) -> String {
        let material = serde_json::json!({
            "endpoint": endpoint.name,
            "model": endpoint.model_id(),
            "messages": messages,
            "params": params,
            "sample": sample_index,
        });
        content_hash(material.to_string())
    }

    /// `n_samples` completions, sample indices `0..n_samples`.
    pub fn complete(
        &self,
        endpoint: &str,
        messages: &[Message],
        params: &SamplingParams,
        n_samples: u32,
    ) -> Result<Vec<String>> {
        if n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        (0..n_samples)
            .map(|i| self.complete_sample(endpoint, messages, params, i))
            .collect()
    }

    /// One completion at a given sample index. Re-samples of a malformed
    /// generation use increasing indices so each attempt is journaled.
    pub fn complete_sample(
        &self,
        endpoint: &str,
        messages: &[Message],
        params: &SamplingParams,
        sample_index: u32,
    ) -> Result<String> {
        if messages.is_empty() {
            return Err(Error::Config("messages must not be empty".into()));
        }
        params.validate()?;
        let route = self
            .routes
            .get(endpoint)
            .ok_or_else(|| Error::Config(format!("no endpoint named `{endpoint}`")))?;
        let ep = &route.endpoint;

        let prompt_tokens: usize = messages.iter().map(|m| self.estimator.estimate(&m.content)).sum();
        if prompt_tokens > ep.max_context {
            return Err(Error::ContextOverflow {
                endpoint: ep.name.clone(),
                tokens: prompt_tokens,
                max_context: ep.max_context,
            });
        }

        let key = Self::cache_key(ep, messages, params, sample_index);
        let Some(journal) = &self.journal else {
            return self.fetch(route, messages, params, sample_index);
        };
        let slot = self.inflight.lock().unwrap().entry(key.clone()).or_default().clone();
        let result = {
            let _held = slot.lock().unwrap_or_else(|e| e.into_inner());
            match journal.get(&key) {
                Ok(Some(entry)) => {
                    self.replayed.fetch_add(1, Ordering::SeqCst);
                    Ok(entry.response)
                }
                Ok(None) => self.fetch(route, messages, params, sample_index).and_then(|response| {
                    journal.put(&JournalEntry {
                        key: key.clone(),
                        endpoint: ep.name.clone(),
                        model: ep.model_id().to_owned(),
                        messages: messages.to_vec(),
                        params: *params,
                        sample_index,
                        response: response.clone(),
                    })?;
                    Ok(response)
                }),
                Err(e) => Err(e),
            }
        };
        let mut inflight = self.inflight.lock().unwrap();
        if Arc::strong_count(&slot) == 2 {
            inflight.remove(&key);
        }
        result
    }

    /// Backend call with retries and accounting, no journal.
    fn fetch(&self, route: &Route, messages: &[Message], params: &SamplingParams, sample_index: u32) -> Result<String> {
        let ep = &route.endpoint;
        let response = self.call_with_retry(route, messages, params, sample_index)?;
        self.backend_calls.fetch_add(1, Ordering::SeqCst);
        *self.per_endpoint.lock().unwrap().entry(ep.name.clone()).or_default() += 1;
        Ok(response)
    }

    fn call_with_retry(
        &self,
        route: &Route,
        messages: &[Message],
        params: &SamplingParams,
        sample_index: u32,
    ) -> Result<String> {
        let mut attempt = 0;
        loop {
            if let Some(limiter) = &route.limiter {
                limiter.acquire();
            }
            match route.backend.chat(&route.endpoint, messages, params, sample_index) {
                Ok(text) => return Ok(text),
                Err(e) if e.transient && attempt + 1 < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempt);
                    log::warn!(
                        "{}: transient failure ({}), retrying in {:?}",
                        route.endpoint.name,
                        e.message,
                        delay
                    );
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(Error::endpoint(&route.endpoint.name, e.message)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::mock::ScriptedBackend;
    use super::*;

    fn gateway_with(backend: Arc<ScriptedBackend>, dir: Option<&std::path::Path>) -> Gateway {
        let journal = dir.map(|d| Journal::open(d).unwrap());
        let mut gw = Gateway::new(journal).with_retry(RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        });
        gw.register(ModelEndpoint::new("mock", "mock://", 100_000), backend)
            .unwrap();
        gw
    }

    #[test]
    fn mock_identity_and_journal_entry() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(ScriptedBackend::new(|_, _| Ok("fixture text".into())));
        let gw = gateway_with(backend.clone(), Some(dir.path()));
        let out = gw
            .complete("mock", &[Message::user("hi")], &SamplingParams::default(), 1)
            .unwrap();
        assert_eq!(out, vec!["fixture text".to_owned()]);
        assert_eq!(Journal::open(dir.path()).unwrap().len().unwrap(), 1);
    }

    #[test]
    fn repeated_call_is_replayed() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(ScriptedBackend::new(|_, i| Ok(format!("sample {i}"))));
        let msgs = [Message::user("same prompt")];
        {
            let gw = gateway_with(backend.clone(), Some(dir.path()));
            gw.complete("mock", &msgs, &SamplingParams::default(), 2).unwrap();
        }
        let gw = gateway_with(backend.clone(), Some(dir.path()));
        let again = gw.complete("mock", &msgs, &SamplingParams::default(), 2).unwrap();
        assert_eq!(again, vec!["sample 0", "sample 1"]);
        assert_eq!(backend.calls(), 2);
        assert_eq!(gw.stats().backend_calls, 0);
        assert_eq!(gw.stats().replayed, 2);
    }

    #[test]
    fn concurrent_identical_requests_call_once() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(ScriptedBackend::new(|_, _| {
            std::thread::sleep(Duration::from_millis(20));
            Ok("same".into())
        }));
        let gw = gateway_with(backend.clone(), Some(dir.path()));
        let msgs = [Message::user("shared prompt")];
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    gw.complete_sample("mock", &msgs, &SamplingParams::default(), 0)
                        .unwrap()
                });
            }
        });
        assert_eq!(backend.calls(), 1);
        assert_eq!(gw.stats().replayed, 7);
        assert!(gw.inflight.lock().unwrap().is_empty());
    }

    #[test]
    fn sixteen_samples_are_sixteen_entries() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Arc::new(ScriptedBackend::new(|_, i| Ok(format!("s{i}"))));
        let gw = gateway_with(backend, Some(dir.path()));
        let out = gw
            .complete("mock", &[Message::user("p")], &SamplingParams::evaluation(), 16)
            .unwrap();
        assert_eq!(out.len(), 16);
        assert_eq!(Journal::open(dir.path()).unwrap().len().unwrap(), 16);
    }

    #[test]
    fn transient_failures_are_retried() {
        let backend = Arc::new(ScriptedBackend::new(|_, _| Ok("ok".into())).failing_first(2));
        let gw = gateway_with(backend.clone(), None);
        assert_eq!(
            gw.complete_sample("mock", &[Message::user("x")], &SamplingParams::default(), 0)
                .unwrap(),
            "ok"
        );
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn retry_exhaustion_is_endpoint_error() {
        let backend = Arc::new(ScriptedBackend::new(|_, _| Ok("ok".into())).failing_first(10));
        let gw = gateway_with(backend, None);
        let err = gw
            .complete_sample("mock", &[Message::user("x")], &SamplingParams::default(), 0)
            .unwrap_err();
        assert!(matches!(err, Error::Endpoint { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn oversized_prompt_overflows() {
        let backend = Arc::new(ScriptedBackend::new(|_, _| Ok("ok".into())));
        let mut gw = Gateway::new(None);
        gw.register(ModelEndpoint::new("tiny", "mock://", 10), backend.clone())
            .unwrap();
        let err = gw
            .complete("tiny", &[Message::user("x".repeat(100))], &SamplingParams::default(), 1)
            .unwrap_err();
        assert!(matches!(err, Error::ContextOverflow { .. }));
        assert_eq!(backend.calls(), 0);
    }

    #[test]
    fn empty_messages_and_bad_params_rejected() {
        let backend = Arc::new(ScriptedBackend::new(|_, _| Ok("ok".into())));
        let gw = gateway_with(backend, None);
        assert!(gw.complete("mock", &[], &SamplingParams::default(), 1).is_err());
        let bad = SamplingParams {
            top_p: 0.0,
            ..SamplingParams::default()
        };
        assert!(gw.complete("mock", &[Message::user("x")], &bad, 1).is_err());
        assert!(gw
            .complete("mock", &[Message::user("x")], &SamplingParams::default(), 0)
            .is_err());
        assert!(gw
            .complete("nope", &[Message::user("x")], &SamplingParams::default(), 1)
            .is_err());
    }

    #[test]
    fn duplicate_endpoint_names_rejected() {
        let backend = Arc::new(ScriptedBackend::new(|_, _| Ok("ok".into())));
        let mut gw = Gateway::new(None);
        gw.register(ModelEndpoint::new("a", "x", 10), backend.clone()).unwrap();
        assert!(gw.register(ModelEndpoint::new("a", "y", 10), backend).is_err());
    }
}
