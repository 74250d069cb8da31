//! Provider abstraction for chat-completion and embedding backends.
//!
//! Two chat backends implement [`ChatProvider`]: a deterministic scripted
//! mock ([`ScriptedMock`]) keyed by `(stage tag, ordinal)` for replayable
//! tests, and an HTTP client ([`RemoteChat`]) for any chat-completions
//! compatible endpoint. Embeddings follow the same split ([`MockHashEmbedder`]
//! / [`RemoteEmbedder`]).
//!
//! Decoding defaults are fixed in [`ChatRequest::new`]: temperature 0,
//! top_p 0.7, max_new_tokens 256. Providers share a concurrent-request cap
//! (default 4) and append every completed call to a shared [`CallLog`].

mod mock;
mod parse;
mod remote;

pub use mock::{MockHashEmbedder, ScriptRecord, ScriptedMock};
pub use parse::parse_structured_block;
pub use remote::{RemoteChat, RemoteEmbedder};

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

/// Default cap on in-flight provider requests.
pub const DEFAULT_CONCURRENCY_CAP: usize = 4;

/// Errors from chat or embedding providers and reply parsing.
#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    /// Remote endpoint unreachable or persistently failing after retries.
    #[error("provider: {0}")]
    Provider(String),

    /// Mock script has no reply for the requested (tag, ordinal).
    #[error("mock script exhausted for tag `{tag}` at index {index}")]
    ScriptExhausted { tag: String, index: usize },

    /// Malformed mock script file.
    #[error("mock script line {line}: {msg}")]
    Script { line: usize, msg: String },

    /// No balanced structured block, or the block failed to parse.
    #[error("structured block at offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// Embedding input was empty after trimming.
    #[error("cannot embed empty text")]
    EmptyText,

    /// Request parameter outside its domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// A chat-completion request with the pipeline's fixed decoding contract.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
    /// Routing tag for the scripted mock; also recorded in the call log.
    pub tag: Option<String>,
}

impl ChatRequest {
    /// Build a request with the default decoding parameters
    /// (temperature 0, top_p 0.7, max_new_tokens 256).
    pub fn new(system: impl Into<String>, user: impl Into<String>) -> Self {
        let req = Self {
            system: system.into(),
            user: user.into(),
            temperature: 0.0,
            top_p: 0.7,
            max_new_tokens: 256,
            tag: None,
        };
        debug_assert!(req.temperature == 0.0 && req.top_p == 0.7 && req.max_new_tokens == 256);
        req
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    pub fn with_max_new_tokens(mut self, n: u32) -> Result<Self, LlmError> {
        if n == 0 {
            return Err(LlmError::Parameter("max_new_tokens must be >= 1".into()));
        }
        self.max_new_tokens = n;
        Ok(self)
    }

    /// Tag used for mock routing and logging; "default" when unset.
    pub fn tag_or_default(&self) -> &str {
        self.tag.as_deref().unwrap_or("default")
    }
}

/// A provider reply.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    /// True when the backend stopped at the output budget (finish reason "length").
    pub truncated: bool,
    pub latency: Duration,
}

/// Chat-completion backend. Implementations are shared across worker
/// threads and internally synchronized.
pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

/// Embedding backend. All returned vectors are L2-normalized and have
/// length [`Embedder::dimension`].
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, LlmError>;

    fn embed_one(&self, text: &str) -> Result<Vec<f32>, LlmError> {
        Ok(self.embed(&[text])?.into_iter().next().unwrap())
    }
}

/// One completed provider call.
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub tag: String,
    /// Per-tag ordinal of the call that produced the reply.
    pub ordinal: usize,
    pub system: String,
    pub user: String,
    pub reply: String,
    pub truncated: bool,
}

/// Shared append-only log of completed calls. Cloning shares the log.
#[derive(Debug, Clone, Default)]
pub struct CallLog {
    inner: Arc<Mutex<Vec<CallRecord>>>,
}

impl CallLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, record: CallRecord) {
        self.inner.lock().unwrap().push(record);
    }

    pub fn snapshot(&self) -> Vec<CallRecord> {
        self.inner.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records whose tag starts with `prefix` (stage tags are `stage/item`).
    pub fn with_tag_prefix(&self, prefix: &str) -> Vec<CallRecord> {
        self.snapshot()
            .into_iter()
            .filter(|r| r.tag == prefix || r.tag.starts_with(&format!("{prefix}/")))
            .collect()
    }
}

/// Counting semaphore bounding in-flight requests at the provider boundary.
#[derive(Debug)]
pub(crate) struct Gate {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    pub(crate) fn new(cap: usize) -> Self {
        Self {
            permits: Mutex::new(cap.max(1)),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> GateGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        GateGuard { gate: self }
    }
}

pub(crate) struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.gate.permits.lock().unwrap();
        *permits += 1;
        self.gate.cv.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_defaults_match_decoding_contract() {
        let req = ChatRequest::new("sys", "usr");
        assert_eq!(req.temperature, 0.0);
        assert_eq!(req.top_p, 0.7);
        assert_eq!(req.max_new_tokens, 256);
        assert!(req.tag.is_none());
    }

    #[test]
    fn zero_token_budget_rejected() {
        let err = ChatRequest::new("s", "u").with_max_new_tokens(0);
        assert!(matches!(err, Err(LlmError::Parameter(_))));
    }

    #[test]
    fn gate_blocks_at_cap() {
        let gate = Gate::new(2);
        let a = gate.acquire();
        let _b = gate.acquire();
        assert_eq!(*gate.permits.lock().unwrap(), 0);
        drop(a);
        let _c = gate.acquire();
        assert_eq!(*gate.permits.lock().unwrap(), 0);
    }
}
