//! Constrained reasoning: cognition-stratified structured proofs, schema
//! validation, answer consistency checking, and re-selection.
//!
//! LOW-routed questions use a fact-centric schema (key fact, evidence
//! points, elimination, answer); HIGH-routed questions use a rule-centric
//! schema (assumptions, 2-5 rules, application steps, per-option comparison,
//! answer). Invalid proofs never escape the parser: every structural
//! violation is either repaired through one retry or surfaces as an error.

use crate::cogpred::{options_block, select_system_prompt, RoutingCategory};
use crate::llm::{parse_structured_block, ChatProvider, ChatRequest, LlmError};
use crate::prompts::{PromptError, PromptRegistry};
use crate::retrieval::EvidenceBlock;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum ReasonError {
    /// Reply parsed but violated the proof schema (after the repair retry).
    #[error("schema: {0}")]
    Schema(String),

    /// No structured block could be extracted from the reply.
    #[error("unparseable proof reply: {0}")]
    Unparseable(String),

    /// Re-selection produced no parseable letter.
    #[error("re-selection produced no letter")]
    Reselect,

    #[error(transparent)]
    Llm(#[from] LlmError),

    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Option letter A-D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Letter {
    A,
    B,
    C,
    D,
}

impl Letter {
    pub const ALL: [Letter; 4] = [Letter::A, Letter::B, Letter::C, Letter::D];

    pub fn as_str(self) -> &'static str {
        match self {
            Letter::A => "A",
            Letter::B => "B",
            Letter::C => "C",
            Letter::D => "D",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Letter::A => 0,
            Letter::B => 1,
            Letter::C => 2,
            Letter::D => 3,
        }
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Letter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Letter::A),
            "B" => Ok(Letter::B),
            "C" => Ok(Letter::C),
            "D" => Ok(Letter::D),
            other => Err(format!("invalid option letter `{other}`")),
        }
    }
}

impl Serialize for Letter {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Letter {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// First standalone A-D token in `text`; uppercase tokens take precedence
/// over a case-insensitive fallback so prose like "a diet" never reads as
/// an answer.
pub fn extract_letter(text: &str) -> Option<Letter> {
    let tokens = || text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty());
    for token in tokens() {
        if token.len() == 1 {
            if let Ok(letter) = Letter::from_str(token) {
                if token.chars().next().unwrap().is_ascii_uppercase() {
                    return Some(letter);
                }
            }
        }
    }
    for token in tokens() {
        if token.len() == 1 {
            if let Ok(letter) = Letter::from_str(token) {
                return Some(letter);
            }
        }
    }
    None
}

/// Count sentences: runs of `.`/`!`/`?` end one sentence; a trailing
/// fragment without a terminator counts as one.
fn count_sentences(text: &str) -> usize {
    let mut count = 0;
    let mut in_terminator = false;
    let mut has_content = false;
    for ch in text.chars() {
        if matches!(ch, '.' | '!' | '?') {
            if !in_terminator {
                count += 1;
                in_terminator = true;
                has_content = false;
            }
        } else {
            in_terminator = false;
            if !ch.is_whitespace() {
                has_content = true;
            }
        }
    }
    if has_content {
        count += 1;
    }
    count
}

fn terminator_count(text: &str) -> usize {
    text.chars().filter(|c| matches!(c, '.' | '!' | '?')).count()
}

/// Fact-centric proof for LOW-routed questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowProof {
    pub key_fact: String,
    pub evidence: Vec<String>,
    pub elimination: String,
    pub answer: Letter,
}

impl LowProof {
    pub fn validate(&self) -> Result<(), ReasonError> {
        let terms = terminator_count(&self.key_fact);
        if terms != 1 {
            return Err(ReasonError::Schema(format!(
                "key_fact must contain exactly one sentence terminator, found {terms}"
            )));
        }
        if self.evidence.is_empty() || self.evidence.iter().any(|e| e.trim().is_empty()) {
            return Err(ReasonError::Schema(
                "evidence must hold at least one non-empty point".into(),
            ));
        }
        let sentences = count_sentences(&self.elimination);
        if sentences > 3 {
            return Err(ReasonError::Schema(format!(
                "elimination has {sentences} sentences, limit is 3"
            )));
        }
        Ok(())
    }
}

/// Rule-centric proof for HIGH-routed questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighProof {
    pub assumptions: Vec<String>,
    pub rules: Vec<String>,
    pub application: Vec<String>,
    pub comparison: BTreeMap<Letter, String>,
    pub answer: Letter,
}

impl HighProof {
    pub fn validate(&self) -> Result<(), ReasonError> {
        if self.assumptions.is_empty() {
            return Err(ReasonError::Schema("assumptions must be non-empty".into()));
        }
        let n = self.rules.len();
        if !(2..=5).contains(&n) {
            return Err(ReasonError::Schema(format!(
                "rules count {n} outside [2,5]"
            )));
        }
        if self.application.is_empty() {
            return Err(ReasonError::Schema("application must list at least one step".into()));
        }
        if self.comparison.len() != 4
            || Letter::ALL.iter().any(|l| !self.comparison.contains_key(l))
        {
            return Err(ReasonError::Schema(
                "comparison must cover exactly the options A, B, C, D".into(),
            ));
        }
        Ok(())
    }
}

/// A schema-valid structured proof. Serialized with a `schema` discriminant
/// ("LOW" or "HIGH") alongside the schema's own field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "schema")]
pub enum Proof {
    #[serde(rename = "LOW")]
    Low(LowProof),
    #[serde(rename = "HIGH")]
    High(HighProof),
}

impl Proof {
    pub fn answer(&self) -> Letter {
        match self {
            Proof::Low(p) => p.answer,
            Proof::High(p) => p.answer,
        }
    }

    pub fn validate(&self) -> Result<(), ReasonError> {
        match self {
            Proof::Low(p) => p.validate(),
            Proof::High(p) => p.validate(),
        }
    }

    /// Wire-format serialization used in prompts and run logs.
    pub fn to_wire(&self) -> String {
        serde_json::to_string_pretty(self).expect("proof serialization cannot fail")
    }
}

fn string_field(map: &serde_json::Map<String, Value>, key: &str) -> Result<String, ReasonError> {
    map.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ReasonError::Schema(format!("missing or non-string `{key}`")))
}

fn string_list(map: &serde_json::Map<String, Value>, key: &str) -> Result<Vec<String>, ReasonError> {
    let raw = map
        .get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| ReasonError::Schema(format!("missing or non-array `{key}`")))?;
    raw.iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| ReasonError::Schema(format!("non-string item in `{key}`")))
        })
        .collect()
}

fn letter_field(map: &serde_json::Map<String, Value>, key: &str) -> Result<Letter, ReasonError> {
    let raw = string_field(map, key)?;
    raw.parse().map_err(ReasonError::Schema)
}

/// Parse a provider reply into a typed, invariant-checked proof for the
/// requested schema. No invalid proof object ever escapes.
pub fn parse_proof(category: RoutingCategory, text: &str) -> Result<Proof, ReasonError> {
    let map = parse_structured_block(text).map_err(|e| ReasonError::Unparseable(e.to_string()))?;
    let proof = match category {
        RoutingCategory::Low => Proof::Low(LowProof {
            key_fact: string_field(&map, "key_fact")?,
            evidence: string_list(&map, "evidence")?,
            elimination: string_field(&map, "elimination")?,
            answer: letter_field(&map, "answer")?,
        }),
        RoutingCategory::High => {
            let comparison_raw = map
                .get("comparison")
                .and_then(Value::as_object)
                .ok_or_else(|| ReasonError::Schema("missing or non-object `comparison`".into()))?;
            let mut comparison = BTreeMap::new();
            for (k, v) in comparison_raw {
                let letter: Letter = k
                    .parse()
                    .map_err(|_| ReasonError::Schema(format!("comparison key `{k}` is not A-D")))?;
                let verdict = v
                    .as_str()
                    .ok_or_else(|| ReasonError::Schema(format!("comparison[{k}] not a string")))?;
                comparison.insert(letter, verdict.to_string());
            }
            Proof::High(HighProof {
                assumptions: string_list(&map, "assumptions")?,
                rules: string_list(&map, "rules")?,
                application: string_list(&map, "application")?,
                comparison,
                answer: letter_field(&map, "answer")?,
            })
        }
    };
    proof.validate()?;
    Ok(proof)
}

/// Generate a structured proof and preliminary answer for the question.
///
/// The schema follows the routing category. One repair retry re-prompts
/// with the validator's error message; a second violation is a solve error.
#[allow(clippy::too_many_arguments)]
pub fn solve(
    stem: &str,
    options: &[String; 4],
    evidence: &EvidenceBlock,
    category: RoutingCategory,
    provider: &dyn ChatProvider,
    registry: &PromptRegistry,
    tag: &str,
    max_new_tokens: u32,
) -> Result<(Proof, Letter), ReasonError> {
    let template = match category {
        RoutingCategory::Low => "solve_low",
        RoutingCategory::High => "solve_high",
    };
    let evidence_section = if evidence.is_empty() {
        String::new()
    } else {
        format!("Evidence:\n{}\n\n", evidence.render())
    };
    let user = registry.render(
        template,
        &[
            ("evidence_section", evidence_section.as_str()),
            ("stem", stem),
            ("options_block", &options_block(options)),
        ],
    )?;
    let system = select_system_prompt(category, registry)?;
    let base = ChatRequest::new(&system, &user)
        .with_tag(tag)
        .with_max_new_tokens(max_new_tokens)
        .expect("validated budget");

    let reply = provider.complete(&base)?;
    match parse_proof(category, &reply.text) {
        Ok(proof) => {
            let answer = proof.answer();
            Ok((proof, answer))
        }
        Err(first_err) => {
            let repair_user = format!(
                "{user}\n\nYour previous reply was invalid: {first_err}\nReply again with a single JSON object that follows the schema exactly."
            );
            let repair = ChatRequest::new(&system, repair_user)
                .with_tag(tag)
                .with_max_new_tokens(max_new_tokens)
                .expect("validated budget");
            let reply = provider.complete(&repair)?;
            let proof = parse_proof(category, &reply.text)?;
            let answer = proof.answer();
            Ok((proof, answer))
        }
    }
}

/// Result of the consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCheck {
    pub consistent: bool,
    pub verifier_used: bool,
    /// Set when the verifier reply parsed neither yes nor no and the
    /// deterministic tier alone decided.
    pub verifier_unparseable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VerdictClass {
    Supported,
    Unsupported,
    Neutral,
}

fn classify_verdict(text: &str) -> VerdictClass {
    let lower = text.to_lowercase();
    const NEGATIVE: &[&str] = &[
        "not supported",
        "unsupported",
        "incorrect",
        "wrong",
        "fails",
        "violates",
        "inconsistent",
        "ruled out",
        "eliminated",
        "contradict",
        "does not",
        "excluded",
    ];
    const POSITIVE: &[&str] = &[
        "supported",
        "correct",
        "consistent",
        "matches",
        "satisfies",
        "valid",
        "best",
    ];
    if NEGATIVE.iter().any(|m| lower.contains(m)) {
        return VerdictClass::Unsupported;
    }
    if POSITIVE.iter().any(|m| lower.contains(m)) {
        return VerdictClass::Supported;
    }
    VerdictClass::Neutral
}

fn find_yes_no(text: &str) -> Option<bool> {
    for token in text.split(|c: char| !c.is_alphabetic()) {
        if token.eq_ignore_ascii_case("yes") {
            return Some(true);
        }
        if token.eq_ignore_ascii_case("no") {
            return Some(false);
        }
    }
    None
}

/// Check that the proof supports the proposed answer.
///
/// Deterministic tier: fails when the proof's own answer differs, or when a
/// HIGH comparison marks exactly one other option as supported while marking
/// the answer unsupported. When a verifier provider is supplied, it is asked
/// yes/no and the overall result is the conjunction of both tiers; an
/// unparseable verifier reply leaves the deterministic tier to decide alone.
pub fn check_consistency(
    proof: &Proof,
    answer: Letter,
    verifier: Option<(&dyn ChatProvider, &str)>,
    registry: &PromptRegistry,
) -> Result<ConsistencyCheck, ReasonError> {
    let mut deterministic = proof.answer() == answer;
    if deterministic {
        if let Proof::High(high) = proof {
            let supported: Vec<Letter> = Letter::ALL
                .into_iter()
                .filter(|l| {
                    high.comparison
                        .get(l)
                        .map(|v| classify_verdict(v) == VerdictClass::Supported)
                        .unwrap_or(false)
                })
                .collect();
            let answer_unsupported = high
                .comparison
                .get(&answer)
                .map(|v| classify_verdict(v) == VerdictClass::Unsupported)
                .unwrap_or(false);
            if supported.len() == 1 && supported[0] != answer && answer_unsupported {
                deterministic = false;
            }
        }
    }

    let Some((provider, tag)) = verifier else {
        return Ok(ConsistencyCheck {
            consistent: deterministic,
            verifier_used: false,
            verifier_unparseable: false,
        });
    };
    let user = registry.render(
        "verify",
        &[("answer", answer.as_str()), ("proof", &proof.to_wire())],
    )?;
    let request = ChatRequest::new(registry.get("sys_base")?, user).with_tag(tag);
    let reply = provider.complete(&request)?;
    match find_yes_no(&reply.text) {
        Some(agrees) => Ok(ConsistencyCheck {
            consistent: deterministic && agrees,
            verifier_used: true,
            verifier_unparseable: false,
        }),
        None => Ok(ConsistencyCheck {
            consistent: deterministic,
            verifier_used: true,
            verifier_unparseable: true,
        }),
    }
}

/// Constrained re-selection: the proof is serialized verbatim into the
/// prompt and the provider must output one letter grounded in it. One retry,
/// then an error.
pub fn reselect(
    proof: &Proof,
    stem: &str,
    options: &[String; 4],
    provider: &dyn ChatProvider,
    registry: &PromptRegistry,
    tag: &str,
) -> Result<Letter, ReasonError> {
    let user = registry.render(
        "reselect",
        &[
            ("proof", &proof.to_wire()),
            ("stem", stem),
            ("options_block", &options_block(options)),
        ],
    )?;
    let request = ChatRequest::new(registry.get("sys_base")?, user).with_tag(tag);
    for _ in 0..2 {
        let reply = provider.complete(&request)?;
        if let Some(letter) = extract_letter(&reply.text) {
            return Ok(letter);
        }
    }
    Err(ReasonError::Reselect)
}

/// Final answer state for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum OutcomeStatus {
    #[serde(rename = "ANSWERED")]
    Answered { letter: Letter },
    #[serde(rename = "UNANSWERED")]
    Unanswered,
}

/// Outcome of solving one item: answered with a letter (possibly via
/// re-selection) or unanswered when no valid letter was obtained anywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    #[serde(flatten)]
    pub status: OutcomeStatus,
    pub proof: Option<Proof>,
    pub reselected: bool,
}

impl Outcome {
    pub fn letter(&self) -> Option<Letter> {
        match self.status {
            OutcomeStatus::Answered { letter } => Some(letter),
            OutcomeStatus::Unanswered => None,
        }
    }

    pub fn is_unanswered(&self) -> bool {
        matches!(self.status, OutcomeStatus::Unanswered)
    }
}

/// Combine solve/re-selection results: unanswered iff no valid letter was
/// obtained; `reselected` marks letters produced by re-selection.
pub fn classify_outcome(
    proof: Option<Proof>,
    letter: Option<Letter>,
    reselected: bool,
) -> Outcome {
    match letter {
        Some(letter) => Outcome {
            status: OutcomeStatus::Answered { letter },
            proof,
            reselected,
        },
        None => Outcome {
            status: OutcomeStatus::Unanswered,
            proof,
            reselected: false,
        },
    }
}
