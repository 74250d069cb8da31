//! Deterministic test doubles: a scripted chat provider and a hash embedder.

use super::{
    CallLog, CallRecord, ChatProvider, ChatRequest, ChatResponse, Embedder, Gate, LlmError,
    DEFAULT_CONCURRENCY_CAP,
};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

/// One line of a mock script file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub tag: String,
    pub index: usize,
    pub reply: String,
    #[serde(default)]
    pub truncated: bool,
}

/// Scripted chat provider keyed by `(tag, ordinal call index)`.
///
/// Each tag has its own ordinal counter: the first request carrying a tag
/// consumes index 0, the next index 1, and so on. Ordinal assignment is
/// serialized, so a fixed script and a fixed request sequence per tag replay
/// byte-identically regardless of scheduling.
pub struct ScriptedMock {
    replies: HashMap<(String, usize), (String, bool)>,
    counters: Mutex<HashMap<String, usize>>,
    log: CallLog,
    gate: Gate,
}

impl ScriptedMock {
    pub fn new(records: impl IntoIterator<Item = ScriptRecord>) -> Self {
        let replies = records
            .into_iter()
            .map(|r| ((r.tag, r.index), (r.reply, r.truncated)))
            .collect();
        Self {
            replies,
            counters: Mutex::new(HashMap::new()),
            log: CallLog::new(),
            gate: Gate::new(DEFAULT_CONCURRENCY_CAP),
        }
    }

    /// Load a line-delimited script file (fields `tag`, `index`, `reply`,
    /// optional `truncated`).
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let file = std::fs::File::open(path.as_ref()).map_err(|e| LlmError::Script {
            line: 0,
            msg: format!("{}: {e}", path.as_ref().display()),
        })?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, LlmError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| LlmError::Script {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScriptRecord = serde_json::from_str(&line).map_err(|e| LlmError::Script {
                line: i + 1,
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(Self::new(records))
    }

    /// Convenience for tests: replies for one tag, indexed in order.
    pub fn with_tagged(tag: &str, replies: &[&str]) -> Self {
        Self::new(replies.iter().enumerate().map(|(i, r)| ScriptRecord {
            tag: tag.to_string(),
            index: i,
            reply: r.to_string(),
            truncated: false,
        }))
    }

    pub fn call_log(&self) -> CallLog {
        self.log.clone()
    }
}

impl ChatProvider for ScriptedMock {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let _permit = self.gate.acquire();
        let tag = request.tag_or_default().to_string();
        let ordinal = {
            let mut counters = self.counters.lock().unwrap();
            let slot = counters.entry(tag.clone()).or_insert(0);
            let n = *slot;
            *slot += 1;
            n
        };
        let (reply, truncated) =
            self.replies
                .get(&(tag.clone(), ordinal))
                .cloned()
                .ok_or(LlmError::ScriptExhausted {
                    tag: tag.clone(),
                    index: ordinal,
                })?;
        self.log.push(CallRecord {
            tag,
            ordinal,
            system: request.system.clone(),
            user: request.user.clone(),
            reply: reply.clone(),
            truncated,
        });
        Ok(ChatResponse {
            text: reply,
            truncated,
            latency: Duration::ZERO,
        })
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Avalanche finalizer; without it, per-coordinate hashes stay affine in
/// the text hash and distinct texts can end up with strongly correlated
/// vectors.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic embedder deriving each coordinate from a seeded FNV-1a hash
/// of the input text. Identical text always yields identical unit vectors,
/// across processes and platforms.
#[derive(Debug, Clone)]
pub struct MockHashEmbedder {
    dimension: usize,
    seed: u64,
}

impl MockHashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, seed }
    }
}

impl Embedder for MockHashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, LlmError> {
        texts
            .iter()
            .map(|text| {
                if text.trim().is_empty() {
                    return Err(LlmError::EmptyText);
                }
                let base = fnv1a(FNV_OFFSET ^ self.seed, text.as_bytes());
                let mut v: Vec<f32> = (0..self.dimension)
                    .map(|j| {
                        let h = mix(base ^ (j as u64).wrapping_mul(GOLDEN));
                        // Top 53 bits -> [0,1) -> [-1,1).
                        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
                        (unit * 2.0 - 1.0) as f32
                    })
                    .collect();
                let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for x in &mut v {
                        *x = (*x as f64 / norm) as f32;
                    }
                } else {
                    v[0] = 1.0;
                }
                Ok(v)
            })
            .collect()
    }
}
