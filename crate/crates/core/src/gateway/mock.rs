//! Offline backends for tests and `--mock-endpoint` runs.

use std::sync::atomic::{AtomicU64, Ordering};

pub use super::fixture::{FixtureBackend, PromptKind};

use super::{BackendError, ChatBackend, Message, ModelEndpoint, SamplingParams};

type Script = dyn Fn(&[Message], u32) -> Result<String, BackendError> + Send + Sync;

/// Backend answering from a closure over `(messages, sample_index)`.
pub struct ScriptedBackend {
    script: Box<Script>,
    fail_first: u64,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(script: impl Fn(&[Message], u32) -> Result<String, BackendError> + Send + Sync + 'static) -> Self {
        ScriptedBackend {
            script: Box::new(script),
            fail_first: 0,
            calls: AtomicU64::new(0),
        }
    }

    /// The first `n` calls fail with a transient error.
    pub fn failing_first(mut self, n: u64) -> Self {
        self.fail_first = n;
        self
    }

    /// Number of times the backend was invoked, failures included.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn chat(
        &self,
        _endpoint: &ModelEndpoint,
        messages: &[Message],
        _params: &SamplingParams,
        sample_index: u32,
    ) -> Result<String, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.fail_first {
            return Err(BackendError::transient(format!("scripted failure {}", n + 1)));
        }
        (self.script)(messages, sample_index)
    }
}
