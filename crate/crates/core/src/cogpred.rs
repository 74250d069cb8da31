//! Cognitive-level prediction, LOW/HIGH routing consolidation, and
//! level-conditioned prompt composition.
//!
//! Prediction is prompt-only: the provider is asked for one of the five
//! level names and the reply is scanned for the first name it contains.
//! Five-way predictions consolidate to the binary routing categories
//! (Rem/Und -> LOW, App/Ana/Eva -> HIGH); a direct two-way prediction mode
//! exists behind a flag for comparison runs.

use crate::llm::{ChatProvider, ChatRequest, LlmError};
use crate::prompts::{PromptError, PromptRegistry};
use crate::retrieval::EvidenceBlock;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum CogPredError {
    #[error(transparent)]
    Llm(#[from] LlmError),

    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// The five cognitive levels (Create never occurs in this setting).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CognitiveLevel {
    Rem,
    Und,
    App,
    Ana,
    Eva,
}

impl CognitiveLevel {
    pub const ALL: [CognitiveLevel; 5] = [
        CognitiveLevel::Rem,
        CognitiveLevel::Und,
        CognitiveLevel::App,
        CognitiveLevel::Ana,
        CognitiveLevel::Eva,
    ];

    /// Full level name, as used in prompts and replies.
    pub fn name(self) -> &'static str {
        match self {
            CognitiveLevel::Rem => "Remember",
            CognitiveLevel::Und => "Understand",
            CognitiveLevel::App => "Apply",
            CognitiveLevel::Ana => "Analyze",
            CognitiveLevel::Eva => "Evaluate",
        }
    }

    /// Abbreviated column header (report tables).
    pub fn short(self) -> &'static str {
        match self {
            CognitiveLevel::Rem => "Rem.",
            CognitiveLevel::Und => "Und.",
            CognitiveLevel::App => "App.",
            CognitiveLevel::Ana => "Ana.",
            CognitiveLevel::Eva => "Eva.",
        }
    }
}

impl fmt::Display for CognitiveLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CognitiveLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rem" | "remember" => Ok(CognitiveLevel::Rem),
            "und" | "understand" => Ok(CognitiveLevel::Und),
            "app" | "apply" => Ok(CognitiveLevel::App),
            "ana" | "analyze" => Ok(CognitiveLevel::Ana),
            "eva" | "evaluate" => Ok(CognitiveLevel::Eva),
            other => Err(format!("unknown cognitive level `{other}`")),
        }
    }
}

impl Serialize for CognitiveLevel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for CognitiveLevel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Binary routing category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoutingCategory {
    #[serde(rename = "LOW")]
    Low,
    #[serde(rename = "HIGH")]
    High,
}

impl RoutingCategory {
    pub fn name(self) -> &'static str {
        match self {
            RoutingCategory::Low => "LOW",
            RoutingCategory::High => "HIGH",
        }
    }
}

impl fmt::Display for RoutingCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Consolidate a five-way level into the binary routing category:
/// Rem/Und -> LOW, App/Ana/Eva -> HIGH. Total over all five inputs.
pub fn consolidate(level: CognitiveLevel) -> RoutingCategory {
    match level {
        CognitiveLevel::Rem | CognitiveLevel::Und => RoutingCategory::Low,
        CognitiveLevel::App | CognitiveLevel::Ana | CognitiveLevel::Eva => RoutingCategory::High,
    }
}

/// Result of a level prediction; `defaulted` marks the Und fallback after
/// two unparseable replies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelPrediction {
    pub level: CognitiveLevel,
    pub defaulted: bool,
}

/// Composed system/user prompt pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
}

/// First of the five level names found case-insensitively in `text`.
fn find_level(text: &str) -> Option<CognitiveLevel> {
    let lower = text.to_lowercase();
    CognitiveLevel::ALL
        .into_iter()
        .filter_map(|level| lower.find(&level.name().to_lowercase()).map(|at| (at, level)))
        .min_by_key(|(at, _)| *at)
        .map(|(_, level)| level)
}

/// First standalone LOW/HIGH token in `text`, case-insensitive.
fn find_category(text: &str) -> Option<RoutingCategory> {
    for token in text.split(|c: char| !c.is_alphabetic()) {
        if token.eq_ignore_ascii_case("low") {
            return Some(RoutingCategory::Low);
        }
        if token.eq_ignore_ascii_case("high") {
            return Some(RoutingCategory::High);
        }
    }
    None
}

pub fn options_block(options: &[String; 4]) -> String {
    format!(
        "A. {}\nB. {}\nC. {}\nD. {}",
        options[0], options[1], options[2], options[3]
    )
}

/// Predict the five-way cognitive level of a question.
///
/// The reply is scanned for the first level name; one retry is made when no
/// name parses, and a second failure falls back to Und with the `defaulted`
/// flag set.
pub fn predict_level(
    stem: &str,
    options: &[String; 4],
    provider: &dyn ChatProvider,
    registry: &PromptRegistry,
    few_shot: bool,
    tag: &str,
) -> Result<LevelPrediction, CogPredError> {
    let fewshot = if few_shot {
        format!("{}\n\n", registry.get("fewshot_levels")?)
    } else {
        String::new()
    };
    let user = registry.render(
        "level_fiveway",
        &[
            ("fewshot", fewshot.as_str()),
            ("stem", stem),
            ("options_block", &options_block(options)),
        ],
    )?;
    let request = ChatRequest::new(registry.get("sys_base")?, user).with_tag(tag);
    for _ in 0..2 {
        let reply = provider.complete(&request)?;
        if let Some(level) = find_level(&reply.text) {
            return Ok(LevelPrediction {
                level,
                defaulted: false,
            });
        }
    }
    Ok(LevelPrediction {
        level: CognitiveLevel::Und,
        defaulted: true,
    })
}

/// Direct two-way LOW/HIGH prediction (comparison mode). Falls back to LOW
/// with `defaulted` when no category parses after one retry.
pub fn predict_binary(
    stem: &str,
    options: &[String; 4],
    provider: &dyn ChatProvider,
    registry: &PromptRegistry,
    few_shot: bool,
    tag: &str,
) -> Result<(RoutingCategory, bool), CogPredError> {
    let fewshot = if few_shot {
        format!("{}\n\n", registry.get("fewshot_levels")?)
    } else {
        String::new()
    };
    let user = registry.render(
        "level_binary",
        &[
            ("fewshot", fewshot.as_str()),
            ("stem", stem),
            ("options_block", &options_block(options)),
        ],
    )?;
    let request = ChatRequest::new(registry.get("sys_base")?, user).with_tag(tag);
    for _ in 0..2 {
        let reply = provider.complete(&request)?;
        if let Some(category) = find_category(&reply.text) {
            return Ok((category, false));
        }
    }
    Ok((RoutingCategory::Low, true))
}

/// Fixed LOW or HIGH system template, verbatim from the registry.
pub fn select_system_prompt(
    category: RoutingCategory,
    registry: &PromptRegistry,
) -> Result<String, PromptError> {
    let name = match category {
        RoutingCategory::Low => "sys_low",
        RoutingCategory::High => "sys_high",
    };
    Ok(registry.get(name)?.to_string())
}

/// Compose the level-conditioned prompt pair. The user prompt carries, in
/// order: the cognitive-level tag line, the evidence section (omitted when
/// empty), the stem, the options labeled A-D, and the answer-format
/// instruction.
pub fn compose_prompts(
    category: RoutingCategory,
    level: CognitiveLevel,
    stem: &str,
    options: &[String; 4],
    evidence: &EvidenceBlock,
    registry: &PromptRegistry,
) -> Result<PromptPair, PromptError> {
    let level_line = format!("Cognitive Level: {}\n\n", level.name());
    let evidence_section = if evidence.is_empty() {
        String::new()
    } else {
        format!("Evidence:\n{}\n\n", evidence.render())
    };
    let user = registry.render(
        "user_main",
        &[
            ("level_line", level_line.as_str()),
            ("evidence_section", evidence_section.as_str()),
            ("stem", stem),
            ("options_block", &options_block(options)),
        ],
    )?;
    Ok(PromptPair {
        system: select_system_prompt(category, registry)?,
        user,
    })
}

/// Prompt pair for methods without cognitive routing (baseline and plain
/// retrieval); `level_line` is injected only when requested.
pub fn compose_direct(
    stem: &str,
    options: &[String; 4],
    evidence: Option<&EvidenceBlock>,
    injected_level: Option<CognitiveLevel>,
    registry: &PromptRegistry,
) -> Result<PromptPair, PromptError> {
    let level_line = match injected_level {
        Some(level) => format!("Cognitive Level: {}\n\n", level.name()),
        None => String::new(),
    };
    let evidence_section = match evidence {
        Some(block) if !block.is_empty() => format!("Evidence:\n{}\n\n", block.render()),
        _ => String::new(),
    };
    let user = registry.render(
        "user_main",
        &[
            ("level_line", level_line.as_str()),
            ("evidence_section", evidence_section.as_str()),
            ("stem", stem),
            ("options_block", &options_block(options)),
        ],
    )?;
    Ok(PromptPair {
        system: registry.get("sys_base")?.to_string(),
        user,
    })
}
