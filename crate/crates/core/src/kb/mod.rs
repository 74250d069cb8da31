//! Tagged QA knowledge base: ingest, deduplication, tag inverted index,
//! dense embedding matrix, and binary persistence.
//!
//! Build phase is single-writer (`ingest` -> optional `deduplicate` ->
//! `embed_corpus` -> `save`). After `embed_corpus` the base is immutable and
//! safe to share across concurrent readers.

mod persist;

use crate::llm::{Embedder, LlmError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

/// Errors from knowledge-base construction and persistence.
#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("line {line}: {msg}")]
    Ingest { line: usize, msg: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("embedding entry {id}: {source}")]
    Embed { id: u64, source: LlmError },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("truncated knowledge-base file")]
    Truncated,

    #[error("version mismatch (bad magic or unsupported version)")]
    VersionMismatch,

    #[error("corrupt knowledge-base file: {0}")]
    Corrupt(String),

    #[error("{0}")]
    Invalid(String),
}

/// Topic tag from the closed six-tier taxonomy.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Tag {
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
}

impl Tag {
    pub const ALL: [Tag; 6] = [Tag::T1, Tag::T2, Tag::T3, Tag::T4, Tag::T5, Tag::T6];

    pub fn code(self) -> &'static str {
        match self {
            Tag::T1 => "T1",
            Tag::T2 => "T2",
            Tag::T3 => "T3",
            Tag::T4 => "T4",
            Tag::T5 => "T5",
            Tag::T6 => "T6",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Tag::T1 => "dietary education",
            Tag::T2 => "healthcare",
            Tag::T3 => "food and nutrition",
            Tag::T4 => "individual and group nutrition management",
            Tag::T5 => "public nutrition and nutrition education",
            Tag::T6 => "catering management",
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Tag> {
        match b {
            1 => Some(Tag::T1),
            2 => Some(Tag::T2),
            3 => Some(Tag::T3),
            4 => Some(Tag::T4),
            5 => Some(Tag::T5),
            6 => Some(Tag::T6),
        _ => None,
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Tag::T1 => 1,
            Tag::T2 => 2,
            Tag::T3 => 3,
            Tag::T4 => 4,
            Tag::T5 => 5,
            Tag::T6 => 6,
        }
    }
}

impl FromStr for Tag {
    type Err = KbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T1" => Ok(Tag::T1),
            "T2" => Ok(Tag::T2),
            "T3" => Ok(Tag::T3),
            "T4" => Ok(Tag::T4),
            "T5" => Ok(Tag::T5),
            "T6" => Ok(Tag::T6),
            other => Err(KbError::Parameter(format!("unknown tag `{other}`"))),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// One knowledge-base record: question, answer, source, tag set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAEntry {
    pub id: u64,
    pub question: String,
    pub answer: String,
    pub source: String,
    pub tags: BTreeSet<Tag>,
}

impl QAEntry {
    /// Text indexed for both sparse and dense retrieval.
    pub fn search_text(&self) -> String {
        format!("{} {}", self.question, self.answer)
    }
}

#[derive(Deserialize)]
struct RawRecord {
    question: String,
    answer: String,
    #[serde(default)]
    source: String,
    tags: Vec<String>,
}

/// Lowercased alphanumeric tokens; everything else is a boundary.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Precomputed lexical statistics for BM25 scoring.
#[derive(Debug, Clone, Default)]
pub struct LexStats {
    /// term -> (row position, term frequency), positions ascending.
    postings: HashMap<String, Vec<(usize, u32)>>,
    doc_len: Vec<u32>,
    avg_len: f64,
}

impl LexStats {
    fn build(entries: &[QAEntry]) -> Self {
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(entries.len());
        for (pos, entry) in entries.iter().enumerate() {
            let tokens = tokenize(&entry.search_text());
            doc_len.push(tokens.len() as u32);
            let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.as_str()).or_insert(0) += 1;
            }
            for (term, count) in tf {
                postings.entry(term.to_string()).or_default().push((pos, count));
            }
        }
        let avg_len = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().map(|&l| l as f64).sum::<f64>() / doc_len.len() as f64
        };
        Self {
            postings,
            doc_len,
            avg_len,
        }
    }

    pub fn postings(&self, term: &str) -> Option<&[(usize, u32)]> {
        self.postings.get(term).map(|v| v.as_slice())
    }

    pub fn doc_len(&self, pos: usize) -> u32 {
        self.doc_len[pos]
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }
}

/// Row-major matrix of unit-norm embedding rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub(crate) fn from_raw(dim: usize, data: Vec<f32>) -> Self {
        assert!(dim == 0 || data.len().is_multiple_of(dim));
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn raw(&self) -> &[f32] {
        &self.data
    }

    fn push_row(&mut self, row: &[f32]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }
}

/// The knowledge base: entries ordered by id, the tag inverted index, and
/// (after `embed_corpus`) one unit-norm embedding row per entry.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    entries: Vec<QAEntry>,
    tag_index: BTreeMap<Tag, BTreeSet<u64>>,
    embeddings: EmbeddingMatrix,
    lex: LexStats,
    id_to_pos: HashMap<u64, usize>,
}

impl KnowledgeBase {
    /// Ingest line-delimited records with fields `question`, `answer`,
    /// `source`, `tags`. Entries get sequential ids; embeddings stay empty
    /// until [`KnowledgeBase::embed_corpus`] runs.
    pub fn ingest(reader: impl BufRead) -> Result<Self, KbError> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| KbError::Ingest {
                line: line_no,
                msg: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(&line).map_err(|e| KbError::Ingest {
                line: line_no,
                msg: format!("malformed record: {e}"),
            })?;
            let mut tags = BTreeSet::new();
            for t in &raw.tags {
                let tag = Tag::from_str(t).map_err(|_| KbError::Ingest {
                    line: line_no,
                    msg: format!("unknown tag `{t}`"),
                })?;
                tags.insert(tag);
            }
            if tags.is_empty() {
                return Err(KbError::Ingest {
                    line: line_no,
                    msg: "entry has no tags".into(),
                });
            }
            if raw.question.trim().is_empty() || raw.answer.trim().is_empty() {
                return Err(KbError::Ingest {
                    line: line_no,
                    msg: "question and answer must be non-empty".into(),
                });
            }
            entries.push(QAEntry {
                id: entries.len() as u64,
                question: raw.question,
                answer: raw.answer,
                source: raw.source,
                tags,
            });
        }
        Self::from_entries(entries)
    }

    /// Build from validated entries (ids must be unique; tags non-empty).
    pub fn from_entries(mut entries: Vec<QAEntry>) -> Result<Self, KbError> {
        entries.sort_by_key(|e| e.id);
        for pair in entries.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(KbError::Invalid(format!("duplicate entry id {}", pair[0].id)));
            }
        }
        for e in &entries {
            if e.tags.is_empty() {
                return Err(KbError::Invalid(format!("entry {} has no tags", e.id)));
            }
            if e.question.trim().is_empty() || e.answer.trim().is_empty() {
                return Err(KbError::Invalid(format!(
                    "entry {} has empty question or answer",
                    e.id
                )));
            }
        }
        let mut kb = Self {
            entries,
            ..Default::default()
        };
        kb.rebuild_indices();
        Ok(kb)
    }

    fn rebuild_indices(&mut self) {
        self.tag_index.clear();
        self.id_to_pos.clear();
        for (pos, entry) in self.entries.iter().enumerate() {
            self.id_to_pos.insert(entry.id, pos);
            for &tag in &entry.tags {
                self.tag_index.entry(tag).or_default().insert(entry.id);
            }
        }
        self.lex = LexStats::build(&self.entries);
    }

    /// Embed `question + " " + answer` for every entry, L2-normalized.
    pub fn embed_corpus(&mut self, embedder: &dyn Embedder) -> Result<(), KbError> {
        let mut matrix = EmbeddingMatrix::new(embedder.dimension());
        for entry in &self.entries {
            let text = entry.search_text();
            let mut row = embedder
                .embed_one(&text)
                .map_err(|e| KbError::Embed { id: entry.id, source: e })?;
            let norm = row.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(KbError::Embed {
                    id: entry.id,
                    source: LlmError::Provider("zero-norm embedding".into()),
                });
            }
            for x in &mut row {
                *x = (*x as f64 / norm) as f32;
            }
            matrix.push_row(&row);
        }
        self.embeddings = matrix;
        Ok(())
    }

    /// Union of the inverted index over `tags` (empty tags -> empty pool).
    pub fn candidate_pool(&self, tags: &BTreeSet<Tag>) -> BTreeSet<u64> {
        let mut pool = BTreeSet::new();
        for tag in tags {
            if let Some(ids) = self.tag_index.get(tag) {
                pool.extend(ids.iter().copied());
            }
        }
        pool
    }

    pub fn entries(&self) -> &[QAEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry_by_id(&self, id: u64) -> Option<&QAEntry> {
        self.id_to_pos.get(&id).map(|&pos| &self.entries[pos])
    }

    pub fn pos_of(&self, id: u64) -> Option<usize> {
        self.id_to_pos.get(&id).copied()
    }

    pub fn tag_index(&self) -> &BTreeMap<Tag, BTreeSet<u64>> {
        &self.tag_index
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn embedding_by_id(&self, id: u64) -> Option<&[f32]> {
        let pos = self.pos_of(id)?;
        if self.embeddings.is_empty() {
            None
        } else {
            Some(self.embeddings.row(pos))
        }
    }

    pub fn lex(&self) -> &LexStats {
        &self.lex
    }

    pub(crate) fn set_embeddings(&mut self, matrix: EmbeddingMatrix) {
        self.embeddings = matrix;
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Remove semantic duplicates by question-embedding cosine similarity.
///
/// Entries whose question embeddings reach `threshold` are linked into one
/// duplicate cluster (single linkage); the lowest-id member of each cluster
/// is retained and relative order is preserved.
pub fn deduplicate(
    entries: &[QAEntry],
    threshold: f64,
    embedder: &dyn Embedder,
) -> Result<Vec<QAEntry>, KbError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(KbError::Parameter(format!(
            "dedup threshold {threshold} outside (0, 1]"
        )));
    }
    if entries.is_empty() {
        return Ok(Vec::new());
    }
    let mut vectors = Vec::with_capacity(entries.len());
    for e in entries {
        let v = embedder
            .embed_one(&e.question)
            .map_err(|err| KbError::Embed { id: e.id, source: err })?;
        vectors.push(v);
    }

    // Union-find over near-duplicate pairs.
    let mut parent: Vec<usize> = (0..entries.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..entries.len() {
        for j in (i + 1)..entries.len() {
            if dot(&vectors[i], &vectors[j]) as f64 >= threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[rj] = ri;
                }
            }
        }
    }

    // Keep the lowest-id member of each cluster.
    let mut cluster_min: HashMap<usize, u64> = HashMap::new();
    for (i, entry) in entries.iter().enumerate() {
        let root = find(&mut parent, i);
        let min = cluster_min.entry(root).or_insert(entry.id);
        if entry.id < *min {
            *min = entry.id;
        }
    }
    Ok(entries
        .iter()
        .enumerate()
        .filter(|(i, e)| cluster_min[&find(&mut parent, *i)] == e.id)
        .map(|(_, e)| e.clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockHashEmbedder;
    use std::io::Cursor;

    pub(crate) fn record(q: &str, a: &str, tags: &[&str]) -> String {
        serde_json::to_string(&serde_json::json!({
            "question": q, "answer": a, "source": "test", "tags": tags
        }))
        .unwrap()
    }

    fn kb_from(lines: &[String]) -> Result<KnowledgeBase, KbError> {
        KnowledgeBase::ingest(Cursor::new(lines.join("\n")))
    }

    #[test]
    fn ingest_builds_tag_index() {
        let kb = kb_from(&[
            record("q0", "a0", &["T1"]),
            record("q1", "a1", &["T3"]),
            record("q2", "a2", &["T1", "T3"]),
        ])
        .unwrap();
        assert_eq!(kb.len(), 3);
        assert_eq!(
            kb.tag_index()[&Tag::T1],
            BTreeSet::from([0u64, 2]),
            "T1 entries"
        );
        assert_eq!(kb.tag_index()[&Tag::T3], BTreeSet::from([1u64, 2]));
        assert!(!kb.tag_index().contains_key(&Tag::T2));
    }

    #[test]
    fn unknown_tag_is_rejected_with_line_number() {
        let err = kb_from(&[record("q", "a", &["T1"]), record("q2", "a2", &["T9"])])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
        assert!(msg.contains("unknown tag"), "{msg}");
    }

    #[test]
    fn malformed_record_names_line() {
        let err = kb_from(&[record("q", "a", &["T1"]), "{broken".to_string()]).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn empty_question_rejected() {
        let err = kb_from(&[record("  ", "a", &["T1"])]).unwrap_err();
        assert!(err.to_string().contains("non-empty"));
    }

    #[test]
    fn candidate_pool_is_tag_union() {
        let kb = kb_from(&[
            record("q0", "a", &["T1"]),
            record("q1", "a", &["T1", "T3"]),
            record("q2", "a", &["T3"]),
        ])
        .unwrap();
        // tag_index {T1: {0,1}, T3: {1,2}}
        let pool = kb.candidate_pool(&BTreeSet::from([Tag::T1, Tag::T3]));
        assert_eq!(pool, BTreeSet::from([0u64, 1, 2]));
        assert!(kb.candidate_pool(&BTreeSet::new()).is_empty());
        assert!(kb.candidate_pool(&BTreeSet::from([Tag::T2])).is_empty());
    }

    #[test]
    fn embed_corpus_produces_unit_rows() {
        let mut kb = kb_from(&[record("q0", "a0", &["T1"]), record("q1", "a1", &["T2"])]).unwrap();
        let embedder = MockHashEmbedder::new(24, 3);
        kb.embed_corpus(&embedder).unwrap();
        assert_eq!(kb.embeddings().rows(), 2);
        for i in 0..2 {
            let norm: f64 = kb
                .embeddings()
                .row(i)
                .iter()
                .map(|x| (*x as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn embed_corpus_empty_kb_is_empty_matrix() {
        let mut kb = KnowledgeBase::from_entries(Vec::new()).unwrap();
        kb.embed_corpus(&MockHashEmbedder::new(8, 0)).unwrap();
        assert_eq!(kb.embeddings().rows(), 0);
    }

    #[test]
    fn embed_corpus_deterministic_across_runs() {
        let lines = [record("fixed text", "same answer", &["T4"])];
        let embedder = MockHashEmbedder::new(16, 9);
        let mut kb1 = kb_from(&lines).unwrap();
        kb1.embed_corpus(&embedder).unwrap();
        let mut kb2 = kb_from(&lines).unwrap();
        kb2.embed_corpus(&embedder).unwrap();
        assert_eq!(kb1.embeddings().row(0), kb2.embeddings().row(0));
    }

    /// Test embedder with hand-placed vectors so pair cosines are exact.
    struct FixedEmbedder {
        map: HashMap<String, Vec<f32>>,
    }

    impl Embedder for FixedEmbedder {
        fn dimension(&self) -> usize {
            2
        }

        fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>, LlmError> {
            texts
                .iter()
                .map(|t| {
                    self.map
                        .get(*t)
                        .cloned()
                        .ok_or_else(|| LlmError::Provider(format!("no vector for {t}")))
                })
                .collect()
        }
    }

    fn entry(id: u64, q: &str) -> QAEntry {
        QAEntry {
            id,
            question: q.into(),
            answer: "a".into(),
            source: "s".into(),
            tags: BTreeSet::from([Tag::T1]),
        }
    }

    #[test]
    fn dedup_drops_pair_above_threshold_keeps_pair_below() {
        // Unit vectors at angles giving cosines 0.95 and 0.80 exactly by dot
        // product; the oracle below recomputes them independently.
        let c95 = (0.95f64, (1.0f64 - 0.95 * 0.95).sqrt());
        let c80 = (0.80f64, (1.0f64 - 0.80 * 0.80).sqrt());
        let map = HashMap::from([
            ("near a".to_string(), vec![1.0, 0.0]),
            ("near b".to_string(), vec![c95.0 as f32, c95.1 as f32]),
            ("far a".to_string(), vec![0.0, 1.0]),
            ("far b".to_string(), vec![c80.1 as f32, c80.0 as f32]),
        ]);
        let embedder = FixedEmbedder { map: map.clone() };

        // Independent exact dot-product oracle on the same embedder outputs.
        let cos = |a: &str, b: &str| -> f64 {
            map[a].iter().zip(&map[b]).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
        };
        assert!(cos("near a", "near b") >= 0.92);
        assert!(cos("far a", "far b") < 0.92);

        let near = vec![entry(0, "near a"), entry(1, "near b")];
        let kept = deduplicate(&near, 0.92, &embedder).unwrap();
        assert_eq!(kept.iter().map(|e| e.id).collect::<Vec<_>>(), vec![0]);

        let far = vec![entry(0, "far a"), entry(1, "far b")];
        let kept = deduplicate(&far, 0.92, &embedder).unwrap();
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn dedup_identical_questions_keeps_lowest_id() {
        let entries = vec![entry(0, "same question"), entry(1, "same question")];
        let kept = deduplicate(&entries, 0.99, &MockHashEmbedder::new(16, 0)).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, 0);
    }

    #[test]
    fn dedup_is_idempotent() {
        let entries = vec![
            entry(0, "alpha"),
            entry(1, "alpha"),
            entry(2, "beta"),
            entry(3, "gamma"),
        ];
        let embedder = MockHashEmbedder::new(16, 1);
        let once = deduplicate(&entries, 0.9, &embedder).unwrap();
        let twice = deduplicate(&once, 0.9, &embedder).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn dedup_threshold_domain_checked() {
        let entries = vec![entry(0, "q")];
        let embedder = MockHashEmbedder::new(8, 0);
        assert!(matches!(
            deduplicate(&entries, 0.0, &embedder),
            Err(KbError::Parameter(_))
        ));
        assert!(matches!(
            deduplicate(&entries, 1.5, &embedder),
            Err(KbError::Parameter(_))
        ));
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(
            tokenize("Iron-absorption, in THE gut!"),
            vec!["iron", "absorption", "in", "the", "gut"]
        );
        assert!(tokenize("  ...  ").is_empty());
    }
}
