//! Exam loading, end-to-end pipeline orchestration for every method
//! variant, metric computation, and report emission.
//!
//! Items are independent work units processed by a bounded worker pool;
//! aggregation folds completed records in item order, so a fixed config,
//! knowledge base, and mock script always produce byte-identical machine
//! reports. Per-item requests carry `stage/item_id` tags, which keeps mock
//! script routing independent of worker scheduling.

use crate::cogpred::{
    compose_direct, compose_prompts, consolidate, predict_binary, predict_level, CognitiveLevel,
    LevelPrediction, PromptPair, RoutingCategory,
};
use crate::judge::{judge, should_trigger, JudgeError, JudgeVerdict, Target, TriggerDecision, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::kb::{KnowledgeBase, Tag};
use crate::llm::{ChatProvider, ChatRequest, Embedder, LlmError};
use crate::prompts::PromptRegistry;
use crate::reason::{
    check_consistency, classify_outcome, extract_letter, reselect, solve, ConsistencyCheck,
    Letter, Outcome, ReasonError,
};
use crate::retrieval::{
    bm25_search, dense_search, format_evidence, hybrid_search, tag_constrained_search,
    Bm25Params, EvidenceBlock, RankedList, DEFAULT_RRF_K, DEFAULT_TOP_K,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::str::FromStr;
use std::sync::Mutex;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("line {line}: {msg}")]
    Load { line: usize, msg: String },

    #[error("no records to evaluate")]
    Empty,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Stage names used for call tags (`stage/item_id`) and stage accounting.
pub mod stage {
    pub const PREDICT: &str = "predict";
    pub const TAGS: &str = "tags";
    pub const JUDGE: &str = "judge";
    pub const RR_LOW: &str = "rr_low";
    pub const RR_HIGH: &str = "rr_high";
    pub const SOLVE: &str = "solve";
    pub const VERIFY: &str = "verify";
    pub const RESELECT: &str = "reselect";
    pub const ANSWER: &str = "answer";
    pub const COT: &str = "cot";

    pub fn tag(stage: &str, item_id: &str) -> String {
        format!("{stage}/{item_id}")
    }
}

/// Exam question format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExamMode {
    Single,
    Scenario,
}

impl FromStr for ExamMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" => Ok(ExamMode::Single),
            "scenario" => Ok(ExamMode::Scenario),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// One exam question with its gold answer and annotated cognitive level.
/// Scenario sub-questions already carry the shared case description in
/// their stem after loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamItem {
    pub id: String,
    pub mode: ExamMode,
    pub stem: String,
    pub options: [String; 4],
    pub gold: Letter,
    pub level: CognitiveLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario_group: Option<String>,
}

#[derive(Deserialize)]
struct RawExamRecord {
    id: serde_json::Value,
    mode: String,
    stem: String,
    options: Vec<String>,
    gold: String,
    level: String,
    #[serde(default)]
    scenario_group: Option<String>,
    #[serde(default)]
    case_text: Option<String>,
}

/// Load a line-delimited exam file, validating every field and prepending
/// each scenario group's shared case description to its sub-question stems.
pub fn load_exam(
    reader: impl BufRead,
    mode_filter: Option<ExamMode>,
) -> Result<Vec<ExamItem>, EvalError> {
    let mut raws: Vec<(usize, RawExamRecord)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| EvalError::Load {
            line: line_no,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExamRecord = serde_json::from_str(&line).map_err(|e| EvalError::Load {
            line: line_no,
            msg: e.to_string(),
        })?;
        raws.push((line_no, raw));
    }

    // Shared case description per scenario group: first non-empty wins.
    let mut group_case: BTreeMap<String, String> = BTreeMap::new();
    for (_, raw) in &raws {
        if let (Some(group), Some(case)) = (&raw.scenario_group, &raw.case_text) {
            if !case.trim().is_empty() {
                group_case.entry(group.clone()).or_insert_with(|| case.clone());
            }
        }
    }

    let mut items = Vec::new();
    for (line_no, raw) in raws {
        let fail = |msg: String| EvalError::Load { line: line_no, msg };
        let mode: ExamMode = raw.mode.parse().map_err(fail)?;
        let gold: Letter = raw
            .gold
            .parse()
            .map_err(|e: String| fail(format!("gold: {e}")))?;
        let level: CognitiveLevel = raw
            .level
            .parse()
            .map_err(|e: String| fail(format!("level: {e}")))?;
        let options: [String; 4] = raw
            .options
            .try_into()
            .map_err(|v: Vec<String>| fail(format!("expected 4 options, got {}", v.len())))?;
        let id = match raw.id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(fail(format!("invalid id {other}"))),
        };
        let case = raw
            .scenario_group
            .as_ref()
            .and_then(|g| group_case.get(g).cloned())
            .or(raw.case_text);
        let stem = match case {
            Some(case) if !case.trim().is_empty() => format!("{}\n\n{}", case.trim(), raw.stem),
            _ => raw.stem,
        };
        if mode_filter.is_none_or(|m| m == mode) {
            items.push(ExamItem {
                id,
                mode,
                stem,
                options,
                gold,
                level,
                scenario_group: raw.scenario_group,
            });
        }
    }
    Ok(items)
}

/// Pipeline variant under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "BASELINE")]
    Baseline,
    #[serde(rename = "BM25")]
    Bm25,
    #[serde(rename = "DENSE")]
    Dense,
    #[serde(rename = "HYBRID")]
    Hybrid,
    #[serde(rename = "COGRAG")]
    CogRag,
    #[serde(rename = "COGRAG_PLUS")]
    CogRagPlus,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "baseline" => Ok(Method::Baseline),
            "bm25" => Ok(Method::Bm25),
            "dense" => Ok(Method::Dense),
            "hybrid" => Ok(Method::Hybrid),
            "cograg" => Ok(Method::CogRag),
            "cograg_plus" | "cograg+" => Ok(Method::CogRagPlus),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Ablation switches. Defaults depend on the method; see [`RunConfig::new`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    /// Judge + reinforced retrieval stage.
    pub rr_enabled: bool,
    /// Constrained reasoning (structured proofs + consistency + re-selection).
    pub cr_enabled: bool,
    /// Replace constrained reasoning with free-form chain-of-thought.
    pub standard_cot: bool,
    /// Inject the predicted cognitive level into non-routed prompts.
    pub cog_injection: bool,
    /// Few-shot exemplars in the level-prediction prompt.
    pub few_shot_level: bool,
    /// Predict LOW/HIGH directly instead of the five-way mapping.
    pub direct_binary: bool,
    /// LLM verifier tier in the consistency check.
    pub verifier: bool,
}

/// Full evaluation configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub alpha: u8,
    pub beta: u8,
    pub top_k: usize,
    pub budget: usize,
    pub proof_max_tokens: u32,
    pub flags: Flags,
    pub workers: usize,
}

impl RunConfig {
    /// Defaults for a method: alpha 50, beta 35, top-k 5, budget 1024.
    /// COGRAG_PLUS enables reinforced retrieval, constrained reasoning, and
    /// the verifier; flags may be overridden afterwards for ablations.
    pub fn new(method: Method) -> Self {
        let plus = method == Method::CogRagPlus;
        Self {
            method,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            top_k: DEFAULT_TOP_K,
            budget: 1024,
            proof_max_tokens: 256,
            flags: Flags {
                rr_enabled: plus,
                cr_enabled: plus,
                standard_cot: false,
                cog_injection: false,
                few_shot_level: true,
                direct_binary: false,
                verifier: plus,
            },
            workers: 4,
        }
    }
}

/// Everything recorded for one evaluated item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub mode: ExamMode,
    pub gold: Letter,
    pub gold_level: CognitiveLevel,
    pub predicted_level: Option<LevelPrediction>,
    pub category: Option<RoutingCategory>,
    pub category_defaulted: bool,
    pub tags_used: Option<BTreeSet<Tag>>,
    pub tags_defaulted: bool,
    pub retrieved: Option<Vec<u64>>,
    pub verdict: Option<JudgeVerdict>,
    pub judge_failed: bool,
    pub trigger: Option<TriggerDecision>,
    pub remediation_queries: Vec<String>,
    pub remediation_fell_back: bool,
    pub final_evidence: Option<Vec<u64>>,
    pub consistency: Option<ConsistencyCheck>,
    pub outcome: Outcome,
    pub correct: bool,
    /// Stage names invoked for this item, in order; retrieval invocations
    /// appear as `retrieve:<kind>`.
    pub stages: Vec<String>,
    pub errors: Vec<String>,
}

impl ItemRecord {
    fn new(item: &ExamItem) -> Self {
        Self {
            item_id: item.id.clone(),
            mode: item.mode,
            gold: item.gold,
            gold_level: item.level,
            predicted_level: None,
            category: None,
            category_defaulted: false,
            tags_used: None,
            tags_defaulted: false,
            retrieved: None,
            verdict: None,
            judge_failed: false,
            trigger: None,
            remediation_queries: Vec::new(),
            remediation_fell_back: false,
            final_evidence: None,
            consistency: None,
            outcome: classify_outcome(None, None, false),
            correct: false,
            stages: Vec::new(),
            errors: Vec::new(),
        }
    }

    fn finish(mut self, outcome: Outcome, gold: Letter) -> Self {
        self.correct = outcome.letter() == Some(gold);
        self.outcome = outcome;
        self
    }
}

/// Ask the provider for a bare letter; retries once unless the reply was
/// truncated (truncated replies without a letter classify as unanswered).
fn answer_via_prompt(
    pair: &PromptPair,
    provider: &dyn ChatProvider,
    tag: &str,
) -> Result<Option<Letter>, LlmError> {
    let request = ChatRequest::new(&pair.system, &pair.user).with_tag(tag);
    for _ in 0..2 {
        let reply = provider.complete(&request)?;
        if let Some(letter) = extract_letter(&reply.text) {
            return Ok(Some(letter));
        }
        if reply.truncated {
            return Ok(None);
        }
    }
    Ok(None)
}

/// Predict the topic tags to search. The reply is scanned for T1-T6 codes;
/// an empty parse after one retry falls back to the full taxonomy (flagged).
fn predict_tags(
    item: &ExamItem,
    provider: &dyn ChatProvider,
    registry: &PromptRegistry,
    tag: &str,
) -> Result<(BTreeSet<Tag>, bool), LlmError> {
    let user = registry
        .render(
            "tag_predict",
            &[
                ("stem", item.stem.as_str()),
                ("options_block", &crate::cogpred::options_block(&item.options)),
            ],
        )
        .map_err(|e| LlmError::Parameter(e.to_string()))?;
    let system = registry
        .get("sys_base")
        .map_err(|e| LlmError::Parameter(e.to_string()))?;
    let request = ChatRequest::new(system, user).with_tag(tag);
    for _ in 0..2 {
        let reply = provider.complete(&request)?;
        let mut tags = BTreeSet::new();
        for token in reply.text.split(|c: char| !c.is_alphanumeric()) {
            if let Ok(t) = token.parse::<Tag>() {
                tags.insert(t);
            }
        }
        if !tags.is_empty() {
            return Ok((tags, false));
        }
    }
    Ok((Tag::ALL.into_iter().collect(), true))
}

fn forced_trigger_verdict() -> JudgeVerdict {
    JudgeVerdict {
        rel: 0,
        support: [0, 0, 0, 0],
        target: Target::Correct,
        target_defaulted: true,
    }
}

/// Execute one item under the configured method. Stage errors are recorded
/// and classify the item as unanswered; they never abort the run.
pub fn run_item(
    item: &ExamItem,
    config: &RunConfig,
    kb: &KnowledgeBase,
    provider: &dyn ChatProvider,
    embedder: &dyn Embedder,
    registry: &PromptRegistry,
) -> ItemRecord {
    let mut rec = ItemRecord::new(item);
    match run_item_inner(item, config, kb, provider, embedder, registry, &mut rec) {
        Ok(outcome) => rec.finish(outcome, item.gold),
        Err(msg) => {
            rec.errors.push(msg);
            rec.finish(classify_outcome(None, None, false), item.gold)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_item_inner(
    item: &ExamItem,
    config: &RunConfig,
    kb: &KnowledgeBase,
    provider: &dyn ChatProvider,
    embedder: &dyn Embedder,
    registry: &PromptRegistry,
    rec: &mut ItemRecord,
) -> Result<Outcome, String> {
    let id = &item.id;
    let prompt_err = |e: crate::prompts::PromptError| format!("prompt: {e}");

    match config.method {
        Method::Baseline | Method::Bm25 | Method::Dense | Method::Hybrid => {
            let injected_level = if config.flags.cog_injection {
                rec.stages.push(stage::PREDICT.into());
                let pred = predict_level(
                    &item.stem,
                    &item.options,
                    provider,
                    registry,
                    config.flags.few_shot_level,
                    &stage::tag(stage::PREDICT, id),
                )
                .map_err(|e| format!("predict: {e}"))?;
                rec.predicted_level = Some(pred);
                Some(pred.level)
            } else {
                None
            };

            let evidence = match config.method {
                Method::Baseline => None,
                Method::Bm25 => {
                    rec.stages.push("retrieve:bm25".into());
                    let ranked =
                        bm25_search(kb, &item.stem, config.top_k, Bm25Params::default());
                    Some(self::budgeted(&ranked, kb, config, rec))
                }
                Method::Dense => {
                    rec.stages.push("retrieve:dense".into());
                    let qv = embedder
                        .embed_one(&item.stem)
                        .map_err(|e| format!("embed: {e}"))?;
                    let ranked = dense_search(kb, &qv, None, config.top_k)
                        .map_err(|e| format!("dense: {e}"))?;
                    Some(self::budgeted(&ranked, kb, config, rec))
                }
                Method::Hybrid => {
                    rec.stages.push("retrieve:hybrid".into());
                    let ranked = hybrid_search(
                        kb,
                        &item.stem,
                        config.top_k,
                        Bm25Params::default(),
                        DEFAULT_RRF_K,
                        embedder,
                    )
                    .map_err(|e| format!("hybrid: {e}"))?;
                    Some(self::budgeted(&ranked, kb, config, rec))
                }
                _ => unreachable!(),
            };

            let pair = compose_direct(
                &item.stem,
                &item.options,
                evidence.as_ref(),
                injected_level,
                registry,
            )
            .map_err(prompt_err)?;
            rec.stages.push(stage::ANSWER.into());
            let letter = answer_via_prompt(&pair, provider, &stage::tag(stage::ANSWER, id))
                .map_err(|e| format!("answer: {e}"))?;
            Ok(classify_outcome(None, letter, false))
        }

        Method::CogRag | Method::CogRagPlus => {
            // Stage A: cognitive routing.
            rec.stages.push(stage::PREDICT.into());
            let (category, level_for_prompt) = if config.flags.direct_binary {
                let (category, defaulted) = predict_binary(
                    &item.stem,
                    &item.options,
                    provider,
                    registry,
                    config.flags.few_shot_level,
                    &stage::tag(stage::PREDICT, id),
                )
                .map_err(|e| format!("predict: {e}"))?;
                rec.category_defaulted = defaulted;
                let level = match category {
                    RoutingCategory::Low => CognitiveLevel::Und,
                    RoutingCategory::High => CognitiveLevel::App,
                };
                (category, level)
            } else {
                let pred = predict_level(
                    &item.stem,
                    &item.options,
                    provider,
                    registry,
                    config.flags.few_shot_level,
                    &stage::tag(stage::PREDICT, id),
                )
                .map_err(|e| format!("predict: {e}"))?;
                rec.predicted_level = Some(pred);
                (consolidate(pred.level), pred.level)
            };
            rec.category = Some(category);

            // Stage B: tag-constrained retrieval.
            rec.stages.push(stage::TAGS.into());
            let (tags, tags_defaulted) =
                predict_tags(item, provider, registry, &stage::tag(stage::TAGS, id))
                    .map_err(|e| format!("tags: {e}"))?;
            rec.tags_used = Some(tags.clone());
            rec.tags_defaulted = tags_defaulted;

            rec.stages.push("retrieve:tag_dense".into());
            let ranked = tag_constrained_search(kb, &item.stem, &tags, config.top_k, embedder)
                .map_err(|e| format!("retrieve: {e}"))?;
            let mut evidence = self::budgeted(&ranked, kb, config, rec);

            // Stage B': judge-gated reinforced retrieval.
            if config.method == Method::CogRagPlus && config.flags.rr_enabled {
                rec.stages.push(stage::JUDGE.into());
                let verdict = match judge(
                    &item.stem,
                    &item.options,
                    &evidence,
                    provider,
                    registry,
                    &stage::tag(stage::JUDGE, id),
                ) {
                    Ok(v) => v,
                    Err(JudgeError::Unparseable(msg)) => {
                        // A failed audit forces remediation (treated as rel = 0).
                        rec.judge_failed = true;
                        rec.errors.push(format!("judge: {msg}"));
                        forced_trigger_verdict()
                    }
                    Err(e) => return Err(format!("judge: {e}")),
                };
                rec.verdict = Some(verdict.clone());
                let decision = should_trigger(&verdict, config.alpha, config.beta);
                rec.trigger = Some(decision);

                if decision.triggered {
                    let rr_stage = match category {
                        RoutingCategory::Low => stage::RR_LOW,
                        RoutingCategory::High => stage::RR_HIGH,
                    };
                    rec.stages.push(rr_stage.into());
                    let reinforced = crate::judge::reinforce(
                        &item.stem,
                        &item.options,
                        &verdict,
                        category,
                        &evidence,
                        kb,
                        &tags,
                        config.budget,
                        provider,
                        embedder,
                        registry,
                        &stage::tag(rr_stage, id),
                    )
                    .map_err(|e| format!("reinforce: {e}"))?;
                    rec.remediation_queries = reinforced.queries;
                    rec.remediation_fell_back = reinforced.fell_back;
                    evidence = reinforced.evidence;
                }
            }
            rec.final_evidence = Some(evidence.ids());

            // Stage C: answer generation.
            if config.method == Method::CogRagPlus
                && config.flags.cr_enabled
                && !config.flags.standard_cot
            {
                rec.stages.push(stage::SOLVE.into());
                match solve(
                    &item.stem,
                    &item.options,
                    &evidence,
                    category,
                    provider,
                    registry,
                    &stage::tag(stage::SOLVE, id),
                    config.proof_max_tokens,
                ) {
                    Ok((proof, mut answer)) => {
                        let verifier_tag = stage::tag(stage::VERIFY, id);
                        let verifier = if config.flags.verifier {
                            rec.stages.push(stage::VERIFY.into());
                            Some((provider, verifier_tag.as_str()))
                        } else {
                            None
                        };
                        let check = check_consistency(&proof, answer, verifier, registry)
                            .map_err(|e| format!("verify: {e}"))?;
                        rec.consistency = Some(check);
                        let mut reselected = false;
                        if !check.consistent {
                            rec.stages.push(stage::RESELECT.into());
                            match reselect(
                                &proof,
                                &item.stem,
                                &item.options,
                                provider,
                                registry,
                                &stage::tag(stage::RESELECT, id),
                            ) {
                                Ok(letter) => {
                                    answer = letter;
                                    reselected = true;
                                }
                                Err(ReasonError::Reselect) => {
                                    // Keep the solver's letter; it remains the
                                    // only grounded answer we have.
                                    rec.errors.push("reselect: no letter".into());
                                }
                                Err(e) => return Err(format!("reselect: {e}")),
                            }
                        }
                        Ok(classify_outcome(Some(proof), Some(answer), reselected))
                    }
                    Err(ReasonError::Schema(msg)) | Err(ReasonError::Unparseable(msg)) => {
                        // Schema failure after the repair retry: try to
                        // recover a bare letter through the direct prompt.
                        rec.errors.push(format!("solve: {msg}"));
                        let pair = compose_prompts(
                            category,
                            level_for_prompt,
                            &item.stem,
                            &item.options,
                            &evidence,
                            registry,
                        )
                        .map_err(prompt_err)?;
                        rec.stages.push(stage::ANSWER.into());
                        let letter =
                            answer_via_prompt(&pair, provider, &stage::tag(stage::ANSWER, id))
                                .map_err(|e| format!("answer: {e}"))?;
                        if letter.is_none() {
                            rec.errors.push("answer: no letter recovered".into());
                        }
                        Ok(classify_outcome(None, letter, false))
                    }
                    Err(e) => Err(format!("solve: {e}")),
                }
            } else if config.flags.standard_cot {
                let evidence_section = if evidence.is_empty() {
                    String::new()
                } else {
                    format!("Evidence:\n{}\n\n", evidence.render())
                };
                let user = registry
                    .render(
                        "cot",
                        &[
                            ("evidence_section", evidence_section.as_str()),
                            ("stem", item.stem.as_str()),
                            ("options_block", &crate::cogpred::options_block(&item.options)),
                        ],
                    )
                    .map_err(prompt_err)?;
                let system = crate::cogpred::select_system_prompt(category, registry)
                    .map_err(prompt_err)?;
                rec.stages.push(stage::COT.into());
                let letter = answer_via_prompt(
                    &PromptPair { system, user },
                    provider,
                    &stage::tag(stage::COT, id),
                )
                .map_err(|e| format!("cot: {e}"))?;
                Ok(classify_outcome(None, letter, false))
            } else {
                let pair = compose_prompts(
                    category,
                    level_for_prompt,
                    &item.stem,
                    &item.options,
                    &evidence,
                    registry,
                )
                .map_err(prompt_err)?;
                rec.stages.push(stage::ANSWER.into());
                let letter = answer_via_prompt(&pair, provider, &stage::tag(stage::ANSWER, id))
                    .map_err(|e| format!("answer: {e}"))?;
                Ok(classify_outcome(None, letter, false))
            }
        }
    }
}

fn budgeted(
    ranked: &RankedList,
    kb: &KnowledgeBase,
    config: &RunConfig,
    rec: &mut ItemRecord,
) -> EvidenceBlock {
    rec.retrieved = Some(ranked.ids());
    format_evidence(ranked, kb, config.budget)
}

/// Evaluate all items with a bounded worker pool; records come back in item
/// order regardless of completion order.
pub fn run_eval(
    items: &[ExamItem],
    config: &RunConfig,
    kb: &KnowledgeBase,
    provider: &dyn ChatProvider,
    embedder: &dyn Embedder,
    registry: &PromptRegistry,
) -> Vec<ItemRecord> {
    let workers = config.workers.max(1).min(items.len().max(1));
    let next = Mutex::new(0usize);
    let results: Vec<Mutex<Option<ItemRecord>>> =
        (0..items.len()).map(|_| Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = {
                    let mut guard = next.lock().unwrap();
                    let i = *guard;
                    if i >= items.len() {
                        return;
                    }
                    *guard += 1;
                    i
                };
                let record = run_item(&items[index], config, kb, provider, embedder, registry);
                *results[index].lock().unwrap() = Some(record);
            });
        }
    });

    results
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

/// Accuracy for one gold-level stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAccuracy {
    pub level: CognitiveLevel,
    pub total: usize,
    pub correct: usize,
    /// Percent; absent for an empty stratum (excluded from the macro mean).
    pub accuracy: Option<f64>,
}

/// Routing hit rates against gold binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingHitRates {
    pub overall: Option<f64>,
    pub low: Option<f64>,
    pub high: Option<f64>,
}

/// Aggregated evaluation metrics plus the per-item records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total: usize,
    pub correct: usize,
    /// Percent correct over all items; unanswered items count as incorrect.
    pub overall: f64,
    /// Unweighted mean of the per-level accuracies (non-empty strata).
    pub macro_avg: f64,
    pub per_level: Vec<LevelAccuracy>,
    /// Strata with zero items, excluded from the macro mean.
    pub empty_levels: Vec<CognitiveLevel>,
    pub unanswered: usize,
    pub unanswered_rate: f64,
    pub trigger_count: usize,
    pub trigger_rate: f64,
    /// Triggered items whose final answer is correct.
    pub corrected_after_trigger: usize,
    pub routing: RoutingHitRates,
    pub items: Vec<ItemRecord>,
}

fn percent(num: usize, den: usize) -> f64 {
    100.0 * num as f64 / den as f64
}

/// Fold per-item records into the report. Internal arithmetic stays at full
/// precision; rounding happens only at emit time.
pub fn compute_report(records: Vec<ItemRecord>) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let total = records.len();
    let correct = records.iter().filter(|r| r.correct).count();
    let unanswered = records.iter().filter(|r| r.outcome.is_unanswered()).count();

    let mut per_level = Vec::new();
    let mut empty_levels = Vec::new();
    for level in CognitiveLevel::ALL {
        let stratum: Vec<&ItemRecord> =
            records.iter().filter(|r| r.gold_level == level).collect();
        let stratum_correct = stratum.iter().filter(|r| r.correct).count();
        let accuracy = if stratum.is_empty() {
            empty_levels.push(level);
            None
        } else {
            Some(percent(stratum_correct, stratum.len()))
        };
        per_level.push(LevelAccuracy {
            level,
            total: stratum.len(),
            correct: stratum_correct,
            accuracy,
        });
    }
    let present: Vec<f64> = per_level.iter().filter_map(|l| l.accuracy).collect();
    let macro_avg = present.iter().sum::<f64>() / present.len() as f64;

    let trigger_count = records
        .iter()
        .filter(|r| r.trigger.map(|t| t.triggered).unwrap_or(false))
        .count();
    let corrected_after_trigger = records
        .iter()
        .filter(|r| r.trigger.map(|t| t.triggered).unwrap_or(false) && r.correct)
        .count();

    let routed: Vec<&ItemRecord> = records.iter().filter(|r| r.category.is_some()).collect();
    let hit = |r: &&ItemRecord| r.category == Some(consolidate(r.gold_level));
    let rate_over = |subset: Vec<&&ItemRecord>| -> Option<f64> {
        if subset.is_empty() {
            None
        } else {
            Some(percent(subset.iter().filter(|r| hit(r)).count(), subset.len()))
        }
    };
    let routing = RoutingHitRates {
        overall: rate_over(routed.iter().collect()),
        low: rate_over(
            routed
                .iter()
                .filter(|r| consolidate(r.gold_level) == RoutingCategory::Low)
                .collect(),
        ),
        high: rate_over(
            routed
                .iter()
                .filter(|r| consolidate(r.gold_level) == RoutingCategory::High)
                .collect(),
        ),
    };

    Ok(EvalReport {
        total,
        correct,
        overall: percent(correct, total),
        macro_avg,
        per_level,
        empty_levels,
        unanswered,
        unanswered_rate: percent(unanswered, total),
        trigger_count,
        trigger_rate: percent(trigger_count, total),
        corrected_after_trigger,
        routing,
        items: records,
    })
}

/// Report rendering target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Machine,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table" => Ok(ReportFormat::Table),
            "machine" | "json" => Ok(ReportFormat::Machine),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

/// Round to one decimal, half up.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

fn fmt1(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{:.1}", round1(v)),
        None => "-".to_string(),
    }
}

/// Render the report: `Table` mirrors the Overall/Macro/per-level column
/// order with one-decimal half-up rounding; `Machine` is lossless JSON.
pub fn emit_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Machine => {
            serde_json::to_string_pretty(report).expect("report serialization cannot fail")
        }
        ReportFormat::Table => {
            let mut out = String::new();
            out.push_str("Overall Macro Rem. Und. App. Ana. Eva.\n");
            let mut row = vec![fmt1(Some(report.overall)), fmt1(Some(report.macro_avg))];
            row.extend(report.per_level.iter().map(|l| fmt1(l.accuracy)));
            out.push_str(&row.join(" "));
            out.push('\n');
            out.push_str(&format!(
                "Items: {}  Correct: {}  Unanswered: {} ({}%)\n",
                report.total,
                report.correct,
                report.unanswered,
                fmt1(Some(report.unanswered_rate))
            ));
            out.push_str(&format!(
                "Triggered: {}/{} ({}%)  Corrected after trigger: {}\n",
                report.trigger_count,
                report.total,
                fmt1(Some(report.trigger_rate)),
                report.corrected_after_trigger
            ));
            if report.routing.overall.is_some() {
                out.push_str(&format!(
                    "Routing hit rate: overall {}% (low {}%, high {}%)\n",
                    fmt1(report.routing.overall),
                    fmt1(report.routing.low),
                    fmt1(report.routing.high)
                ));
            }
            if !report.empty_levels.is_empty() {
                let names: Vec<&str> =
                    report.empty_levels.iter().map(|l| l.short()).collect();
                out.push_str(&format!("Levels without items: {}\n", names.join(" ")));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests;

/// One line per provider call plus one per item outcome, grouped by item in
/// exam order so replays are stable.
pub fn write_run_log(
    path: &std::path::Path,
    records: &[ItemRecord],
    calls: &[crate::llm::CallRecord],
) -> std::io::Result<()> {
    use std::io::Write;
    let mut sorted: Vec<&crate::llm::CallRecord> = calls.iter().collect();
    let item_order: BTreeMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.item_id.as_str(), i))
        .collect();
    let call_pos = |c: &crate::llm::CallRecord| -> (usize, String, usize) {
        let item = c.tag.split_once('/').map(|(_, id)| id).unwrap_or("");
        (
            item_order.get(item).copied().unwrap_or(usize::MAX),
            c.tag.clone(),
            c.ordinal,
        )
    };
    sorted.sort_by_key(|c| call_pos(c));

    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for call in sorted {
        let line = serde_json::json!({
            "type": "call",
            "tag": call.tag,
            "ordinal": call.ordinal,
            "system": call.system,
            "user": call.user,
            "reply": call.reply,
            "truncated": call.truncated,
        });
        writeln!(w, "{line}")?;
    }
    for record in records {
        let line = serde_json::json!({
            "type": "outcome",
            "record": record,
        });
        writeln!(w, "{line}")?;
    }
    Ok(())
}
