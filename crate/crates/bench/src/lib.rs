//! Shared corpus generation for the retrieval benchmarks.

use cograg_core::kb::{KnowledgeBase, QAEntry, Tag};
use cograg_core::llm::MockHashEmbedder;
use std::collections::BTreeSet;

const VOCAB: [&str; 32] = [
    "iron", "calcium", "vitamin", "protein", "fiber", "glucose", "sodium", "zinc", "folate",
    "iodine", "absorption", "deficiency", "intake", "diet", "menu", "portion", "energy",
    "growth", "survey", "fortification", "screening", "balance", "storage", "transport",
    "uptake", "metabolism", "mineral", "nutrient", "serving", "guideline", "planning", "risk",
];

struct XorShift(u64);

impl XorShift {
    fn next(&mut self) -> u64 {
        self.0 ^= self.0 << 13;
        self.0 ^= self.0 >> 7;
        self.0 ^= self.0 << 17;
        self.0
    }

    fn text(&mut self, words: usize) -> String {
        (0..words)
            .map(|_| VOCAB[(self.next() % VOCAB.len() as u64) as usize])
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Deterministic synthetic knowledge base with embedded rows.
pub fn synthetic_kb(entries: usize, dim: usize) -> KnowledgeBase {
    let mut rng = XorShift(0x9e3779b97f4a7c15);
    let rows: Vec<QAEntry> = (0..entries)
        .map(|i| {
            let n_tags = 1 + (rng.next() % 3) as usize;
            let tags: BTreeSet<Tag> = (0..n_tags)
                .map(|_| Tag::ALL[(rng.next() % 6) as usize])
                .collect();
            let q_words = 6 + (rng.next() % 6) as usize;
            let a_words = 8 + (rng.next() % 10) as usize;
            QAEntry {
                id: i as u64,
                question: format!("{}?", rng.text(q_words)),
                answer: format!("{}.", rng.text(a_words)),
                source: "bench".into(),
                tags,
            }
        })
        .collect();
    let mut kb = KnowledgeBase::from_entries(rows).expect("valid synthetic entries");
    kb.embed_corpus(&MockHashEmbedder::new(dim, 7)).expect("mock embed");
    kb
}
