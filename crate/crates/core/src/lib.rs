//! Cognition-routed retrieval-augmented question answering.
//!
//! The pipeline answers multiple-choice professional-exam questions in five
//! stages over a tagged QA knowledge base:
//!
//! 1. **Cognitive prediction** ([`cogpred`]) — classify each question into one
//!    of five cognitive levels and consolidate to a LOW/HIGH routing category.
//! 2. **Tag-constrained retrieval** ([`retrieval`], [`kb`]) — dense search
//!    restricted to the union of documents carrying the predicted topic tags,
//!    with BM25 / dense / hybrid-RRF baselines.
//! 3. **Evidence audit** ([`judge`]) — an LLM judge scores the evidence block;
//!    low relevance or a thin top-two support margin triggers remediation.
//! 4. **Reinforced retrieval** ([`judge`]) — fact-centric multi-query search
//!    for LOW tasks, option-centric discriminative search for HIGH tasks,
//!    merged, redundancy-filtered, and re-budgeted.
//! 5. **Constrained reasoning** ([`reason`]) — structured proofs under a
//!    LOW or HIGH schema, a consistency check, and constrained re-selection.
//!
//! [`eval`] orchestrates the methods end to end and computes overall, macro,
//! per-level, unanswered, trigger, and routing-hit metrics. [`llm`] provides
//! the provider abstraction, including a deterministic scripted mock.

pub mod cogpred;
pub mod eval;
pub mod judge;
pub mod kb;
pub mod llm;
pub mod prompts;
pub mod reason;
pub mod retrieval;

pub use cogpred::{CognitiveLevel, LevelPrediction, PromptPair, RoutingCategory};
pub use eval::{EvalReport, ExamItem, ExamMode, ItemRecord, Method, RunConfig};
pub use judge::{JudgeVerdict, Target, TriggerDecision, TriggerReason};
pub use kb::{KnowledgeBase, QAEntry, Tag};
pub use llm::{ChatProvider, ChatRequest, ChatResponse, Embedder, LlmError};
pub use reason::{HighProof, Letter, LowProof, Outcome, OutcomeStatus, Proof};
pub use retrieval::{EvidenceBlock, RankedList, RetrievalMethod};
