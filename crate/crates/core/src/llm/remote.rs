//! HTTP backends for chat-completions-compatible and embeddings endpoints.
//!
//! Configuration comes from the environment: `COGRAG_LLM_URL` / `COGRAG_LLM_KEY`
//! for chat, `COGRAG_EMB_URL` for embeddings, with optional `COGRAG_LLM_MODEL`
//! and `COGRAG_EMB_MODEL` names passed through in request bodies.

use super::{
    CallLog, CallRecord, ChatProvider, ChatRequest, ChatResponse, Embedder, Gate, LlmError,
    DEFAULT_CONCURRENCY_CAP,
};
use serde::Deserialize;
use serde_json::json;
use std::sync::Mutex;
use std::time::{Duration, Instant};

const MAX_RETRIES: u32 = 2;
const BACKOFF_BASE: Duration = Duration::from_millis(200);

fn retryable(err: &ureq::Error) -> bool {
    match err {
        ureq::Error::StatusCode(code) => *code >= 500,
        ureq::Error::Io(_) | ureq::Error::Timeout(_) => true,
        _ => false,
    }
}

/// Run `attempt` with up to [`MAX_RETRIES`] retries and exponential backoff
/// on transport failures and 5xx statuses.
fn with_retries<T>(
    mut attempt: impl FnMut() -> Result<T, ureq::Error>,
) -> Result<T, LlmError> {
    let mut tries = 0;
    loop {
        match attempt() {
            Ok(v) => return Ok(v),
            Err(e) if retryable(&e) && tries < MAX_RETRIES => {
                std::thread::sleep(BACKOFF_BASE * 2u32.pow(tries));
                tries += 1;
            }
            Err(e) => return Err(LlmError::Provider(e.to_string())),
        }
    }
}

/// POST a JSON body and deserialize the JSON response.
fn post_json<T: serde::de::DeserializeOwned>(
    agent: &ureq::Agent,
    url: &str,
    key: Option<&str>,
    body: &serde_json::Value,
) -> Result<T, LlmError> {
    let payload = body.to_string();
    let text = with_retries(|| {
        let mut req = agent.post(url).header("content-type", "application/json");
        if let Some(key) = key {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        req.send(payload.as_str())?.body_mut().read_to_string()
    })?;
    serde_json::from_str(&text)
        .map_err(|e| LlmError::Provider(format!("malformed response body: {e}")))
}

#[derive(Deserialize)]
struct ChatCompletionBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

/// Chat client for any endpoint speaking the chat-completions wire format.
pub struct RemoteChat {
    url: String,
    key: Option<String>,
    model: String,
    agent: ureq::Agent,
    log: CallLog,
    gate: Gate,
    ordinals: Mutex<std::collections::HashMap<String, usize>>,
}

impl RemoteChat {
    pub fn new(url: impl Into<String>, key: Option<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            key,
            model: model.into(),
            agent: ureq::Agent::new_with_defaults(),
            log: CallLog::new(),
            gate: Gate::new(DEFAULT_CONCURRENCY_CAP),
            ordinals: Mutex::new(std::collections::HashMap::new()),
        }
    }

    /// Read `COGRAG_LLM_URL`, `COGRAG_LLM_KEY`, and `COGRAG_LLM_MODEL`.
    pub fn from_env() -> Result<Self, LlmError> {
        let url = std::env::var("COGRAG_LLM_URL")
            .map_err(|_| LlmError::Parameter("COGRAG_LLM_URL not set".into()))?;
        let key = std::env::var("COGRAG_LLM_KEY").ok();
        let model = std::env::var("COGRAG_LLM_MODEL").unwrap_or_else(|_| "default".into());
        Ok(Self::new(url, key, model))
    }

    pub fn call_log(&self) -> CallLog {
        self.log.clone()
    }
}

impl ChatProvider for RemoteChat {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let _permit = self.gate.acquire();
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_new_tokens,
        });
        let started = Instant::now();
        let parsed: ChatCompletionBody =
            post_json(&self.agent, &self.url, self.key.as_deref(), &body)?;
        let latency = started.elapsed();
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::Provider("response had no choices".into()))?;
        let truncated = choice.finish_reason.as_deref() == Some("length");
        let tag = request.tag_or_default().to_string();
        let ordinal = {
            let mut ords = self.ordinals.lock().unwrap();
            let slot = ords.entry(tag.clone()).or_insert(0);
            let n = *slot;
            *slot += 1;
            n
        };
        self.log.push(CallRecord {
            tag,
            ordinal,
            system: request.system.clone(),
            user: request.user.clone(),
            reply: choice.message.content.clone(),
            truncated,
        });
        Ok(ChatResponse {
            text: choice.message.content,
            truncated,
            latency,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingBody {
    data: Vec<EmbeddingRow>,
}

#[derive(Deserialize)]
struct EmbeddingRow {
    embedding: Vec<f32>,
}

/// Embeddings client; vectors are L2-normalized after receipt.
pub struct RemoteEmbedder {
    url: String,
    key: Option<String>,
    model: String,
    dimension: usize,
    agent: ureq::Agent,
    gate: Gate,
}

impl RemoteEmbedder {
    pub fn new(
        url: impl Into<String>,
        key: Option<String>,
        model: impl Into<String>,
        dimension: usize,
    ) -> Self {
        Self {
            url: url.into(),
            key,
            model: model.into(),
            dimension,
            agent: ureq::Agent::new_with_defaults(),
            gate: Gate::new(DEFAULT_CONCURRENCY_CAP),
        }
    }

    /// Read `COGRAG_EMB_URL`, `COGRAG_LLM_KEY`, and `COGRAG_EMB_MODEL`.
    pub fn from_env(dimension: usize) -> Result<Self, LlmError> {
        let url = std::env::var("COGRAG_EMB_URL")
            .map_err(|_| LlmError::Parameter("COGRAG_EMB_URL not set".into()))?;
        let key = std::env::var("COGRAG_LLM_KEY").ok();
        let model = std::env::var("COGRAG_EMB_MODEL").unwrap_or_else(|_| "default".into());
        Ok(Self::new(url, key, model, dimension))
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, LlmError> {
        if let Some(bad) = texts.iter().find(|t| t.trim().is_empty()) {
            let _ = bad;
            return Err(LlmError::EmptyText);
        }
        let _permit = self.gate.acquire();
        let body = json!({ "model": self.model, "input": texts });
        let parsed: EmbeddingBody =
            post_json(&self.agent, &self.url, self.key.as_deref(), &body)?;
        if parsed.data.len() != texts.len() {
            return Err(LlmError::Provider(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        parsed
            .data
            .into_iter()
            .map(|row| {
                let mut v = row.embedding;
                if v.len() != self.dimension {
                    return Err(LlmError::Provider(format!(
                        "embedding dimension {} != configured {}",
                        v.len(),
                        self.dimension
                    )));
                }
                let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(LlmError::Provider("zero-norm embedding".into()));
                }
                for x in &mut v {
                    *x = (*x as f64 / norm) as f32;
                }
                Ok(v)
            })
            .collect()
    }
}
