//! Sparse, dense, hybrid, and tag-constrained retrieval, plus evidence
//! formatting under a token budget.
//!
//! All searches are exact (no approximation) and pure functions over an
//! immutable [`KnowledgeBase`]; identical inputs produce identical output.
//! Ties are always broken by ascending entry id.

use crate::kb::{tokenize, KnowledgeBase, Tag};
use crate::llm::{Embedder, LlmError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

/// Okapi BM25 parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// RRF rank constant.
pub const DEFAULT_RRF_K: u32 = 60;

/// Snippets retained per query.
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("query dimension {got} does not match corpus dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("corpus has no embeddings; run embed_corpus first")]
    NoEmbeddings,

    #[error(transparent)]
    Embed(#[from] LlmError),
}

/// How a ranked list was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalMethod {
    #[serde(rename = "BM25")]
    Bm25,
    #[serde(rename = "DENSE")]
    Dense,
    #[serde(rename = "HYBRID")]
    Hybrid,
    #[serde(rename = "TAG_DENSE")]
    TagDense,
}

/// Scored entry ids, scores non-increasing, ids unique, length <= requested K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub method: RetrievalMethod,
    pub items: Vec<(u64, f64)>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<u64> {
        self.items.iter().map(|(id, _)| *id).collect()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Sort scored candidates: score descending, id ascending; keep top `k`.
fn rank(mut scored: Vec<(u64, f64)>, k: usize, method: RetrievalMethod) -> RankedList {
    scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    RankedList {
        method,
        items: scored,
    }
}

/// Top-K entries by Okapi BM25 over whitespace/punctuation-tokenized,
/// lowercased text. Only documents containing at least one query term are
/// scored; an empty query yields an empty list.
pub fn bm25_search(
    kb: &KnowledgeBase,
    query: &str,
    k: usize,
    params: Bm25Params,
) -> RankedList {
    let terms = tokenize(query);
    if terms.is_empty() || kb.is_empty() {
        return RankedList {
            method: RetrievalMethod::Bm25,
            items: Vec::new(),
        };
    }
    let lex = kb.lex();
    let n = kb.len() as f64;
    let avg_len = lex.avg_len();

    let mut seen = BTreeSet::new();
    let mut scores: HashMap<usize, f64> = HashMap::new();
    for term in &terms {
        if !seen.insert(term.as_str()) {
            continue; // score each distinct query term once
        }
        let Some(postings) = lex.postings(term) else {
            continue;
        };
        let df = postings.len() as f64;
        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
        for &(pos, tf) in postings {
            let tf = tf as f64;
            let dl = lex.doc_len(pos) as f64;
            let norm = tf * (params.k1 + 1.0)
                / (tf + params.k1 * (1.0 - params.b + params.b * dl / avg_len));
            *scores.entry(pos).or_insert(0.0) += idf * norm;
        }
    }

    let scored = scores
        .into_iter()
        .map(|(pos, score)| (kb.entries()[pos].id, score))
        .collect();
    rank(scored, k, RetrievalMethod::Bm25)
}

/// Exact top-K by inner product over the full corpus or a candidate pool.
pub fn dense_search(
    kb: &KnowledgeBase,
    query_vec: &[f32],
    pool: Option<&BTreeSet<u64>>,
    k: usize,
) -> Result<RankedList, RetrievalError> {
    let matrix = kb.embeddings();
    if matrix.dim() == 0 || matrix.rows() != kb.len() {
        if kb.is_empty() {
            return Ok(RankedList {
                method: RetrievalMethod::Dense,
                items: Vec::new(),
            });
        }
        return Err(RetrievalError::NoEmbeddings);
    }
    if query_vec.len() != matrix.dim() {
        return Err(RetrievalError::DimensionMismatch {
            expected: matrix.dim(),
            got: query_vec.len(),
        });
    }

    let score_at = |pos: usize| -> f64 {
        let row = matrix.row(pos);
        row.iter().zip(query_vec).map(|(a, b)| a * b).sum::<f32>() as f64
    };

    let scored: Vec<(u64, f64)> = match pool {
        Some(ids) => ids
            .iter()
            .filter_map(|&id| kb.pos_of(id).map(|pos| (id, score_at(pos))))
            .collect(),
        None => kb
            .entries()
            .iter()
            .enumerate()
            .map(|(pos, e)| (e.id, score_at(pos)))
            .collect(),
    };
    Ok(rank(scored, k, RetrievalMethod::Dense))
}

/// Reciprocal rank fusion: fused score is the sum of `1 / (k + rank)` over
/// input lists with 1-based ranks; documents absent from a list contribute 0.
pub fn rrf_fuse(lists: &[&RankedList], k: u32, top_k: usize) -> RankedList {
    let mut fused: HashMap<u64, f64> = HashMap::new();
    for list in lists {
        for (rank0, (id, _)) in list.items.iter().enumerate() {
            *fused.entry(*id).or_insert(0.0) += 1.0 / (k as f64 + (rank0 + 1) as f64);
        }
    }
    rank(fused.into_iter().collect(), top_k, RetrievalMethod::Hybrid)
}

/// Dense search restricted to the union of documents carrying `tags`.
/// An empty pool yields an empty list so callers may widen the tag set.
pub fn tag_constrained_search(
    kb: &KnowledgeBase,
    query: &str,
    tags: &BTreeSet<Tag>,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<RankedList, RetrievalError> {
    let pool = kb.candidate_pool(tags);
    if pool.is_empty() {
        return Ok(RankedList {
            method: RetrievalMethod::TagDense,
            items: Vec::new(),
        });
    }
    let query_vec = embedder.embed_one(query)?;
    let mut list = dense_search(kb, &query_vec, Some(&pool), k)?;
    list.method = RetrievalMethod::TagDense;
    Ok(list)
}

/// Full-corpus BM25 and dense runs merged with RRF.
pub fn hybrid_search(
    kb: &KnowledgeBase,
    query: &str,
    k: usize,
    params: Bm25Params,
    rrf_k: u32,
    embedder: &dyn Embedder,
) -> Result<RankedList, RetrievalError> {
    let sparse = bm25_search(kb, query, k, params);
    let query_vec = embedder.embed_one(query)?;
    let dense = dense_search(kb, &query_vec, None, k)?;
    Ok(rrf_fuse(&[&sparse, &dense], rrf_k, k))
}

/// Token counter used for evidence budgeting; whitespace tokens by default.
pub type TokenCounter = fn(&str) -> usize;

/// Default token accounting: whitespace-separated tokens.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Evidence snippets fitted to a token budget; snippet order follows the
/// source ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBlock {
    /// (entry id, rendered snippet text), in rank order.
    pub snippets: Vec<(u64, String)>,
    pub token_count: usize,
    pub budget: usize,
}

impl EvidenceBlock {
    pub fn empty(budget: usize) -> Self {
        Self {
            snippets: Vec::new(),
            token_count: 0,
            budget,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.snippets.iter().map(|(id, _)| *id).collect()
    }

    /// Rendered text for prompt composition.
    pub fn render(&self) -> String {
        self.snippets
            .iter()
            .map(|(_, text)| text.as_str())
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

fn render_snippet(kb: &KnowledgeBase, id: u64) -> Option<String> {
    let entry = kb.entry_by_id(id)?;
    Some(format!("Q: {}\nA: {}", entry.question, entry.answer))
}

/// Split on sentence terminators (runs of `.`, `!`, `?`) and newlines.
fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(ch) = chars.next() {
        if ch == '\n' {
            let piece = current.trim();
            if !piece.is_empty() {
                sentences.push(piece.to_string());
            }
            current.clear();
        } else {
            current.push(ch);
            if matches!(ch, '.' | '!' | '?') {
                let run_continues = matches!(chars.peek(), Some('.' | '!' | '?'));
                if !run_continues {
                    let piece = current.trim();
                    if !piece.is_empty() {
                        sentences.push(piece.to_string());
                    }
                    current.clear();
                }
            }
        }
    }
    let piece = current.trim();
    if !piece.is_empty() {
        sentences.push(piece.to_string());
    }
    sentences
}

/// Fit snippets for `ids` into `budget` with two-level truncation: whole
/// snippets are appended in order while the total stays within budget; the
/// first snippet that would overflow is cut at the last sentence boundary
/// that fits (dropped entirely if no sentence fits) and everything after it
/// is dropped.
pub(crate) fn format_snippets(
    ids: &[u64],
    kb: &KnowledgeBase,
    budget: usize,
    counter: TokenCounter,
) -> EvidenceBlock {
    let mut block = EvidenceBlock::empty(budget);
    for &id in ids {
        let Some(text) = render_snippet(kb, id) else {
            continue;
        };
        let cost = counter(&text);
        if block.token_count + cost <= budget {
            block.token_count += cost;
            block.snippets.push((id, text));
            continue;
        }
        // Level 2: sentence-boundary truncation of the first overflowing
        // snippet, then stop.
        let remaining = budget - block.token_count;
        let mut kept = String::new();
        for sentence in split_sentences(&text) {
            let candidate = if kept.is_empty() {
                sentence.clone()
            } else {
                format!("{kept} {sentence}")
            };
            if counter(&candidate) <= remaining {
                kept = candidate;
            } else {
                break;
            }
        }
        if !kept.is_empty() {
            block.token_count += counter(&kept);
            block.snippets.push((id, kept));
        }
        break;
    }
    debug_assert!(block.token_count <= budget);
    block
}

/// Fit a ranked list's snippets into `budget` tokens (whitespace counting).
pub fn format_evidence(ranked: &RankedList, kb: &KnowledgeBase, budget: usize) -> EvidenceBlock {
    format_evidence_with(ranked, kb, budget, whitespace_tokens)
}

/// [`format_evidence`] with a caller-supplied token counter.
pub fn format_evidence_with(
    ranked: &RankedList,
    kb: &KnowledgeBase,
    budget: usize,
    counter: TokenCounter,
) -> EvidenceBlock {
    format_snippets(&ranked.ids(), kb, budget, counter)
}
