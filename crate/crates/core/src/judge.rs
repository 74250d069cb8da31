//! Evidence auditing and reinforced retrieval.
//!
//! A judge scores the evidence block (relevance 0-100, per-option support,
//! CORRECT/INCORRECT target). Remediation fires when relevance falls below
//! alpha or the top-two support margin falls below beta. LOW-routed items
//! take a broad fact-centric query path, HIGH-routed items an option-centric
//! path over the two leading candidates; new snippets are merged after the
//! originals, redundancy-filtered by embedding cosine, and re-budgeted.

use crate::cogpred::{options_block, RoutingCategory};
use crate::kb::{KnowledgeBase, Tag};
use crate::llm::{parse_structured_block, ChatProvider, ChatRequest, LlmError};
use crate::prompts::{PromptError, PromptRegistry};
use crate::reason::Letter;
use crate::retrieval::{format_snippets, tag_constrained_search, whitespace_tokens, EvidenceBlock, RetrievalError};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeSet;

/// Default relevance threshold (alpha).
pub const DEFAULT_ALPHA: u8 = 50;
/// Default top-two margin threshold (beta).
pub const DEFAULT_BETA: u8 = 35;
/// Snippets retrieved per remediation query.
pub const REMEDIATION_TOP_K: usize = 3;
/// Cosine at or above which a later snippet counts as redundant.
pub const REDUNDANCY_COSINE: f64 = 0.90;

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("judge reply unparseable: {0}")]
    Unparseable(String),

    #[error("no usable remediation queries")]
    NoQueries,

    #[error(transparent)]
    Llm(#[from] LlmError),

    #[error(transparent)]
    Prompt(#[from] PromptError),

    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Whether the question seeks the correct statement or the exception.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "CORRECT")]
    Correct,
    #[serde(rename = "INCORRECT")]
    Incorrect,
}

/// Judge output: relevance, per-option support (A,B,C,D order), target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub rel: u8,
    pub support: [u8; 4],
    pub target: Target,
    /// Set when the reply omitted `target` and CORRECT was assumed.
    #[serde(default)]
    pub target_defaulted: bool,
}

/// Top-two candidates in effective-score space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopTwo {
    pub s1: u8,
    pub s2: u8,
    pub margin: u8,
    pub letters: (Letter, Letter),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerReason {
    #[serde(rename = "RELEVANCE")]
    Relevance,
    #[serde(rename = "MARGIN")]
    Margin,
    #[serde(rename = "NONE")]
    None,
}

/// Outcome of the remediation gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerDecision {
    pub triggered: bool,
    pub reason: TriggerReason,
    pub top_two: TopTwo,
}

fn clamp_score(value: &Value) -> Option<u8> {
    let n = match value {
        Value::Number(n) => n.as_f64()?,
        Value::String(s) => s.trim().parse::<f64>().ok()?,
        _ => return None,
    };
    Some(n.round().clamp(0.0, 100.0) as u8)
}

fn parse_verdict(text: &str) -> Result<JudgeVerdict, JudgeError> {
    let map =
        parse_structured_block(text).map_err(|e| JudgeError::Unparseable(e.to_string()))?;
    let rel = map
        .get("rel")
        .and_then(clamp_score)
        .ok_or_else(|| JudgeError::Unparseable("missing or invalid `rel`".into()))?;
    let support_raw = map
        .get("support")
        .and_then(Value::as_array)
        .ok_or_else(|| JudgeError::Unparseable("missing `support`".into()))?;
    if support_raw.len() != 4 {
        return Err(JudgeError::Unparseable(format!(
            "`support` must have 4 values, got {}",
            support_raw.len()
        )));
    }
    let mut support = [0u8; 4];
    for (i, v) in support_raw.iter().enumerate() {
        support[i] = clamp_score(v)
            .ok_or_else(|| JudgeError::Unparseable(format!("invalid support[{i}]")))?;
    }
    let (target, target_defaulted) = match map.get("target") {
        None | Some(Value::Null) => (Target::Correct, true),
        Some(Value::String(s)) => match s.trim().to_ascii_uppercase().as_str() {
            "CORRECT" => (Target::Correct, false),
            "INCORRECT" => (Target::Incorrect, false),
            other => {
                return Err(JudgeError::Unparseable(format!("invalid target `{other}`")))
            }
        },
        Some(other) => {
            return Err(JudgeError::Unparseable(format!(
                "invalid target `{other}`"
            )))
        }
    };
    Ok(JudgeVerdict {
        rel,
        support,
        target,
        target_defaulted,
    })
}

/// Score the evidence block against the question. One retry on an
/// unparseable reply, then an error (callers treat that as a forced
/// trigger).
pub fn judge(
    stem: &str,
    options: &[String; 4],
    evidence: &EvidenceBlock,
    provider: &dyn ChatProvider,
    registry: &PromptRegistry,
    tag: &str,
) -> Result<JudgeVerdict, JudgeError> {
    let user = registry.render(
        "judge_rubric",
        &[
            ("stem", stem),
            ("options_block", &options_block(options)),
            ("evidence", &evidence.render()),
        ],
    )?;
    let request = ChatRequest::new(registry.get("sys_base")?, user).with_tag(tag);
    let mut last_err = None;
    for _ in 0..2 {
        let reply = provider.complete(&request)?;
        match parse_verdict(&reply.text) {
            Ok(verdict) => return Ok(verdict),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or(JudgeError::Unparseable("no reply".into())))
}

/// Rank the four options by effective score and report the top two.
///
/// Effective score is the raw support under target CORRECT and `100 -
/// support` under target INCORRECT, so the margin always measures how
/// decisively the evidence separates the two leading candidates for the
/// question as asked. Letter ties break alphabetically.
pub fn top_two_margin(verdict: &JudgeVerdict) -> TopTwo {
    let mut ranked: Vec<(Letter, u8)> = Letter::ALL
        .into_iter()
        .zip(verdict.support)
        .map(|(letter, s)| {
            let eff = match verdict.target {
                Target::Correct => s,
                Target::Incorrect => 100 - s,
            };
            (letter, eff)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let (l1, s1) = ranked[0];
    let (l2, s2) = ranked[1];
    TopTwo {
        s1,
        s2,
        margin: s1 - s2,
        letters: (l1, l2),
    }
}

/// Remediation gate: fire when `rel < alpha` or the top-two margin is below
/// `beta`. Relevance is checked first for reason reporting.
pub fn should_trigger(verdict: &JudgeVerdict, alpha: u8, beta: u8) -> TriggerDecision {
    let top_two = top_two_margin(verdict);
    let (triggered, reason) = if verdict.rel < alpha {
        (true, TriggerReason::Relevance)
    } else if top_two.margin < beta {
        (true, TriggerReason::Margin)
    } else {
        (false, TriggerReason::None)
    };
    TriggerDecision {
        triggered,
        reason,
        top_two,
    }
}

/// Parse a numbered-list reply ("1. ...", "2) ...") into trimmed items.
fn parse_numbered(text: &str) -> Vec<String> {
    let mut items = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim_start();
        let digits = trimmed.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits == 0 {
            continue;
        }
        let rest = &trimmed[digits..];
        let Some(body) = rest
            .strip_prefix('.')
            .or_else(|| rest.strip_prefix(')'))
            .or_else(|| rest.strip_prefix(':'))
        else {
            continue;
        };
        let query = body.trim();
        if !query.is_empty() {
            items.push(query.to_string());
        }
    }
    items
}

fn dedup_case_insensitive(items: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items
        .into_iter()
        .filter(|q| seen.insert(q.to_lowercase()))
        .collect()
}

/// Broad fact-centric remediation queries for LOW-routed questions: up to 3
/// parsed from a numbered-list reply, case-insensitively deduplicated.
/// Fewer than 3 is acceptable; zero after one retry is an error.
pub fn fact_centric_queries(
    stem: &str,
    options: &[String; 4],
    provider: &dyn ChatProvider,
    registry: &PromptRegistry,
    tag: &str,
) -> Result<Vec<String>, JudgeError> {
    let user = registry.render(
        "rr_low",
        &[("stem", stem), ("options_block", &options_block(options))],
    )?;
    let request = ChatRequest::new(registry.get("sys_base")?, user).with_tag(tag);
    for _ in 0..2 {
        let reply = provider.complete(&request)?;
        let mut queries = parse_numbered(&reply.text);
        queries.truncate(3);
        let queries = dedup_case_insensitive(queries);
        if !queries.is_empty() {
            return Ok(queries);
        }
    }
    Err(JudgeError::NoQueries)
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "with", "that", "this", "are", "was", "has", "have", "from", "not",
    "its", "all", "any", "can", "which",
];

fn key_terms(text: &str) -> Vec<String> {
    crate::kb::tokenize(text)
        .into_iter()
        .filter(|t| t.len() >= 3 && !STOPWORDS.contains(&t.as_str()))
        .collect()
}

/// Option-centric remediation queries for HIGH-routed questions, focused on
/// the two leading candidates: 2-4 queries, each mentioning a key term from
/// one of the candidate option texts.
pub fn option_centric_queries(
    stem: &str,
    top_two: (Letter, Letter),
    options: &[String; 4],
    provider: &dyn ChatProvider,
    registry: &PromptRegistry,
    tag: &str,
) -> Result<Vec<String>, JudgeError> {
    let (l1, l2) = top_two;
    let text1 = &options[l1.index()];
    let text2 = &options[l2.index()];
    let user = registry.render(
        "rr_high",
        &[
            ("stem", stem),
            ("top1_letter", l1.as_str()),
            ("top1_text", text1),
            ("top2_letter", l2.as_str()),
            ("top2_text", text2),
        ],
    )?;
    let request = ChatRequest::new(registry.get("sys_base")?, user).with_tag(tag);
    let mut anchors = key_terms(text1);
    anchors.extend(key_terms(text2));
    for _ in 0..2 {
        let reply = provider.complete(&request)?;
        let queries = parse_numbered(&reply.text);
        let mut queries: Vec<String> = dedup_case_insensitive(queries)
            .into_iter()
            .filter(|q| {
                let q_terms = crate::kb::tokenize(q);
                anchors.is_empty() || q_terms.iter().any(|t| anchors.contains(t))
            })
            .collect();
        queries.truncate(4);
        if !queries.is_empty() {
            return Ok(queries);
        }
    }
    Err(JudgeError::NoQueries)
}

/// Remediated evidence plus bookkeeping for the run record.
#[derive(Debug, Clone)]
pub struct ReinforcedEvidence {
    pub evidence: EvidenceBlock,
    /// Set when query generation failed and the original evidence was kept.
    pub fell_back: bool,
    pub queries: Vec<String>,
}

/// Run the cognition-routed remediation path and rebuild the evidence block.
///
/// LOW routes through [`fact_centric_queries`], HIGH through
/// [`option_centric_queries`] over the verdict's top two options. Each query
/// runs a tag-constrained search (K = [`REMEDIATION_TOP_K`]); new snippets
/// merge after the original ones, snippets whose embedding cosine with an
/// earlier kept snippet reaches [`REDUNDANCY_COSINE`] are removed, and the
/// result is re-budgeted. Query-generation failure returns the original
/// evidence flagged as a fallback.
#[allow(clippy::too_many_arguments)]
pub fn reinforce(
    stem: &str,
    options: &[String; 4],
    verdict: &JudgeVerdict,
    category: RoutingCategory,
    original: &EvidenceBlock,
    kb: &KnowledgeBase,
    tags: &BTreeSet<Tag>,
    budget: usize,
    provider: &dyn ChatProvider,
    embedder: &dyn crate::llm::Embedder,
    registry: &PromptRegistry,
    tag: &str,
) -> Result<ReinforcedEvidence, JudgeError> {
    let queries = match category {
        RoutingCategory::Low => fact_centric_queries(stem, options, provider, registry, tag),
        RoutingCategory::High => option_centric_queries(
            stem,
            top_two_margin(verdict).letters,
            options,
            provider,
            registry,
            tag,
        ),
    };
    let queries = match queries {
        Ok(q) => q,
        Err(JudgeError::NoQueries) => {
            return Ok(ReinforcedEvidence {
                evidence: original.clone(),
                fell_back: true,
                queries: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };

    let mut merged: Vec<u64> = original.ids();
    for query in &queries {
        let hits = tag_constrained_search(kb, query, tags, REMEDIATION_TOP_K, embedder)?;
        for id in hits.ids() {
            if !merged.contains(&id) {
                merged.push(id);
            }
        }
    }

    // Redundancy filter over the merged order: drop any snippet whose
    // embedding is near-duplicate of an earlier kept one.
    let mut kept: Vec<u64> = Vec::with_capacity(merged.len());
    for id in merged {
        let redundant = kb.embedding_by_id(id).is_some_and(|candidate| {
            kept.iter().any(|&prev| {
                kb.embedding_by_id(prev).is_some_and(|prev_vec| {
                    let cos: f64 = candidate
                        .iter()
                        .zip(prev_vec)
                        .map(|(a, b)| (*a as f64) * (*b as f64))
                        .sum();
                    cos >= REDUNDANCY_COSINE
                })
            })
        });
        if !redundant {
            kept.push(id);
        }
    }

    Ok(ReinforcedEvidence {
        evidence: format_snippets(&kept, kb, budget, whitespace_tokens),
        fell_back: false,
        queries,
    })
}
