//! Long-term agent memory: historical QA pairs and distilled knowledge
//! entries, retrieved by bag-of-words cosine similarity.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{KnowledgeKey, ProductId};
use crate::token::Token;

pub const HASH_BUCKETS: u32 = 4096;
/// Entries scoring below this are never returned.
pub const DEFAULT_RETRIEVAL_FLOOR: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("similarity of an empty token sequence")]
    EmptySequence,
    #[error("memory invariant violated: {0}")]
    InvariantViolation(String),
    #[error("malformed memory dump at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Bucket for a token id. Multiplication by an odd constant is a bijection
/// modulo 2^12, so ids below [`HASH_BUCKETS`] never collide.
fn bucket(token: Token) -> u32 {
    token.0.wrapping_mul(0x9E37_79B1) & (HASH_BUCKETS - 1)
}

/// Sparse hashed token-count vector over the content tokens of a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BagOfWords {
    counts: Vec<(u32, u64)>,
    norm2: u64,
}

impl BagOfWords {
    pub fn new(tokens: &[Token]) -> Result<Self, MemoryError> {
        let mut buckets: Vec<u32> = tokens
            .iter()
            .filter(|t| t.is_content())
            .map(|&t| bucket(t))
            .collect();
        if buckets.is_empty() {
            return Err(MemoryError::EmptySequence);
        }
        buckets.sort_unstable();
        let mut counts: Vec<(u32, u64)> = Vec::new();
        for b in buckets {
            match counts.last_mut() {
                Some((last, c)) if *last == b => *c += 1,
                _ => counts.push((b, 1)),
            }
        }
        let norm2 = counts.iter().map(|(_, c)| c * c).sum();
        Ok(Self { counts, norm2 })
    }

    pub fn cosine(&self, other: &BagOfWords) -> f64 {
        let (mut i, mut j, mut dot) = (0, 0, 0u64);
        while i < self.counts.len() && j < other.counts.len() {
            match self.counts[i].0.cmp(&other.counts[j].0) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => {
                    dot += self.counts[i].1 * other.counts[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        // Single sqrt of an integer product: identical bags give exactly 1.0.
        let denom = ((self.norm2 as f64) * (other.norm2 as f64)).sqrt();
        (dot as f64 / denom).clamp(0.0, 1.0)
    }
}

/// Cosine similarity of hashed content-token counts, in `[0, 1]`.
pub fn similarity(a: &[Token], b: &[Token]) -> Result<f64, MemoryError> {
    Ok(BagOfWords::new(a)?.cosine(&BagOfWords::new(b)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPairEntry {
    pub product_id: ProductId,
    pub question_text: Vec<Token>,
    pub short_answer: Vec<Token>,
    pub long_answer: Vec<Token>,
    pub session_written: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub text: Vec<Token>,
    pub topic_key: Option<KnowledgeKey>,
    pub session_written: u64,
}

/// A retrieved entry with its store index and similarity to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored<'a, T> {
    pub index: usize,
    pub similarity: f64,
    pub entry: &'a T,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Retrieval<'a> {
    pub qa: Option<Scored<'a, QAPairEntry>>,
    pub knowledge: Option<Scored<'a, KnowledgeEntry>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalConfig {
    pub floor: f64,
    pub top_k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            floor: DEFAULT_RETRIEVAL_FLOOR,
            top_k: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DumpRecord {
    Qa {
        product_id: ProductId,
        question: Vec<Token>,
        short: Vec<Token>,
        long: Vec<Token>,
        session: u64,
    },
    Knowledge {
        topic: Option<KnowledgeKey>,
        text: Vec<Token>,
        session: u64,
    },
}

/// Append-only store. `session_written` never decreases in insertion order
/// across both entry lists.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryStore {
    qa_entries: Vec<QAPairEntry>,
    knowledge_entries: Vec<KnowledgeEntry>,
    qa_bags: Vec<BagOfWords>,
    knowledge_bags: Vec<BagOfWords>,
    last_session: u64,
    // (is_qa, index) in insertion order, for dumps.
    order: Vec<(bool, usize)>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.qa_entries.len() + self.knowledge_entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn qa_entries(&self) -> &[QAPairEntry] {
        &self.qa_entries
    }

    pub fn knowledge_entries(&self) -> &[KnowledgeEntry] {
        &self.knowledge_entries
    }

    fn check_session(&self, session: u64) -> Result<(), MemoryError> {
        if session < self.last_session {
            return Err(MemoryError::InvariantViolation(format!(
                "session_written {session} precedes last write at {}",
                self.last_session
            )));
        }
        Ok(())
    }

    pub fn insert_qa(&mut self, entry: QAPairEntry) -> Result<(), MemoryError> {
        self.check_session(entry.session_written)?;
        let bag = BagOfWords::new(&entry.question_text).map_err(|_| {
            MemoryError::InvariantViolation("QA entry with empty question text".into())
        })?;
        if entry.short_answer.is_empty() {
            return Err(MemoryError::InvariantViolation(
                "QA entry with empty short answer".into(),
            ));
        }
        self.last_session = entry.session_written;
        self.order.push((true, self.qa_entries.len()));
        self.qa_entries.push(entry);
        self.qa_bags.push(bag);
        Ok(())
    }

    pub fn insert_knowledge(&mut self, entry: KnowledgeEntry) -> Result<(), MemoryError> {
        self.check_session(entry.session_written)?;
        let bag = BagOfWords::new(&entry.text).map_err(|_| {
            MemoryError::InvariantViolation("knowledge entry with empty text".into())
        })?;
        self.last_session = entry.session_written;
        self.order.push((false, self.knowledge_entries.len()));
        self.knowledge_entries.push(entry);
        self.knowledge_bags.push(bag);
        Ok(())
    }

    /// Best QA pair for `product` and best knowledge entry overall.
    pub fn retrieve(
        &self,
        query: &[Token],
        product: ProductId,
        floor: f64,
    ) -> Result<Retrieval<'_>, MemoryError> {
        let cfg = RetrievalConfig { floor, top_k: 1 };
        let (qa, kn) = self.retrieve_top_k(query, product, cfg)?;
        Ok(Retrieval {
            qa: qa.into_iter().next(),
            knowledge: kn.into_iter().next(),
        })
    }

    /// Ranked candidates at or above the floor, best first. Ties go to the
    /// most recent `session_written`, then the lowest insertion index.
    #[allow(clippy::type_complexity)]
    pub fn retrieve_top_k(
        &self,
        query: &[Token],
        product: ProductId,
        cfg: RetrievalConfig,
    ) -> Result<(Vec<Scored<'_, QAPairEntry>>, Vec<Scored<'_, KnowledgeEntry>>), MemoryError> {
        let q = BagOfWords::new(query)?;
        let qa = rank(
            self.qa_entries
                .iter()
                .zip(&self.qa_bags)
                .enumerate()
                .filter(|(_, (e, _))| e.product_id == product)
                .map(|(i, (e, bag))| (i, e, q.cosine(bag), e.session_written)),
            cfg,
        );
        let kn = rank(
            self.knowledge_entries
                .iter()
                .zip(&self.knowledge_bags)
                .enumerate()
                .map(|(i, (e, bag))| (i, e, q.cosine(bag), e.session_written)),
            cfg,
        );
        Ok((qa, kn))
    }

    /// Number of QA entries (any product) whose question scores at least
    /// `threshold` against `query`.
    pub fn count_similar_questions(&self, query: &[Token], threshold: f64) -> usize {
        let Ok(q) = BagOfWords::new(query) else {
            return 0;
        };
        self.qa_bags
            .iter()
            .filter(|b| q.cosine(b) >= threshold)
            .count()
    }

    pub fn dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for &(is_qa, i) in &self.order {
            let rec = if is_qa {
                let e = &self.qa_entries[i];
                DumpRecord::Qa {
                    product_id: e.product_id,
                    question: e.question_text.clone(),
                    short: e.short_answer.clone(),
                    long: e.long_answer.clone(),
                    session: e.session_written,
                }
            } else {
                let e = &self.knowledge_entries[i];
                DumpRecord::Knowledge {
                    topic: e.topic_key,
                    text: e.text.clone(),
                    session: e.session_written,
                }
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self, MemoryError> {
        let mut store = Self::new();
        for (n, line) in r.lines().enumerate() {
            let malformed = |reason: String| MemoryError::Malformed {
                line: n + 1,
                reason,
            };
            let line = line.map_err(|e| malformed(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DumpRecord =
                serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            match rec {
                DumpRecord::Qa {
                    product_id,
                    question,
                    short,
                    long,
                    session,
                } => store.insert_qa(QAPairEntry {
                    product_id,
                    question_text: question,
                    short_answer: short,
                    long_answer: long,
                    session_written: session,
                })?,
                DumpRecord::Knowledge {
                    topic,
                    text,
                    session,
                } => store.insert_knowledge(KnowledgeEntry {
                    text,
                    topic_key: topic,
                    session_written: session,
                })?,
            }
        }
        Ok(store)
    }
}

fn rank<'a, T, I>(candidates: I, cfg: RetrievalConfig) -> Vec<Scored<'a, T>>
where
    I: Iterator<Item = (usize, &'a T, f64, u64)>,
{
    let mut scored: Vec<(Scored<'a, T>, u64)> = candidates
        .filter(|&(_, _, s, _)| s >= cfg.floor)
        .map(|(index, entry, similarity, session)| {
            (
                Scored {
                    index,
                    similarity,
                    entry,
                },
                session,
            )
        })
        .collect();
    scored.sort_by(|(a, sa), (b, sb)| {
        b.similarity
            .total_cmp(&a.similarity)
            .then(sb.cmp(sa))
            .then(a.index.cmp(&b.index))
    });
    scored.truncate(cfg.top_k);
    scored.into_iter().map(|(s, _)| s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(ids: &[u32]) -> Vec<Token> {
        ids.iter().map(|&i| Token(100 + i)).collect()
    }

    fn qa(product: u32, q: &[u32], session: u64) -> QAPairEntry {
        QAPairEntry {
            product_id: ProductId(product),
            question_text: t(q),
            short_answer: t(&[99]),
            long_answer: t(&[99]),
            session_written: session,
        }
    }

    fn kn(text: &[u32], session: u64) -> KnowledgeEntry {
        KnowledgeEntry {
            text: t(text),
            topic_key: None,
            session_written: session,
        }
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&t(&[1, 2, 3]), &t(&[1, 2, 3])).unwrap(), 1.0);
        assert_eq!(similarity(&t(&[1, 2]), &t(&[3, 4])).unwrap(), 0.0);
        // (1,1,0)·(1,0,1) / (√2·√2)
        assert_eq!(similarity(&t(&[1, 2]), &t(&[1, 3])).unwrap(), 0.5);
        assert_eq!(
            similarity(&[], &t(&[1])),
            Err(MemoryError::EmptySequence)
        );
    }

    #[test]
    fn similarity_ignores_order_but_not_multiplicity() {
        assert_eq!(similarity(&t(&[1, 2, 2]), &t(&[2, 1, 2])).unwrap(), 1.0);
        assert!(similarity(&t(&[1, 2]), &t(&[1, 2, 2])).unwrap() < 1.0);
    }

    #[test]
    fn empty_store_retrieves_nothing() {
        let store = MemoryStore::new();
        let r = store.retrieve(&t(&[1]), ProductId(0), 0.1).unwrap();
        assert!(r.qa.is_none() && r.knowledge.is_none());
    }

    #[test]
    fn qa_retrieval_is_restricted_to_the_queried_product() {
        let mut store = MemoryStore::new();
        store.insert_qa(qa(1, &[1, 2], 0)).unwrap();
        store.insert_knowledge(kn(&[1, 7], 0)).unwrap();
        let r = store.retrieve(&t(&[1, 2]), ProductId(2), 0.1).unwrap();
        assert!(r.qa.is_none());
        assert_eq!(r.knowledge.unwrap().index, 0);
        let r = store.retrieve(&t(&[1, 2]), ProductId(1), 0.1).unwrap();
        assert_eq!(r.qa.unwrap().similarity, 1.0);
    }

    #[test]
    fn knowledge_argmax_over_two_entries() {
        let mut store = MemoryStore::new();
        // cos([1..=10], [1..=9,20]) = 0.9 ; cos([1..=10], [1..=4, 21..=28]) ≈ 0.365
        store.insert_knowledge(kn(&[1, 2, 3, 4, 21, 22, 23, 24, 25, 26, 27, 28], 0)).unwrap();
        store.insert_knowledge(kn(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 20], 0)).unwrap();
        let q = t(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);
        let r = store.retrieve(&q, ProductId(0), 0.1).unwrap();
        let best = r.knowledge.unwrap();
        assert_eq!(best.index, 1);
        assert!((best.similarity - 0.9).abs() < 1e-12);
    }

    #[test]
    fn floor_makes_weak_matches_absent() {
        let mut store = MemoryStore::new();
        store.insert_knowledge(kn(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11], 0)).unwrap();
        // one shared token out of 11 and 1: 1/√11 ≈ 0.30 passes, 1/√121 fails.
        assert!(store.retrieve(&t(&[1]), ProductId(0), 0.1).unwrap().knowledge.is_some());
        assert!(store
            .retrieve(&t(&[1, 30, 31, 32, 33, 34, 35, 36, 37, 38, 39]), ProductId(0), 0.1)
            .unwrap()
            .knowledge
            .is_none());
    }

    #[test]
    fn ties_prefer_recent_then_first_inserted() {
        let mut store = MemoryStore::new();
        store.insert_knowledge(kn(&[1], 0)).unwrap();
        store.insert_knowledge(kn(&[1], 3)).unwrap();
        store.insert_knowledge(kn(&[1], 3)).unwrap();
        let r = store.retrieve(&t(&[1]), ProductId(0), 0.1).unwrap();
        assert_eq!(r.knowledge.unwrap().index, 1);
    }

    #[test]
    fn insert_then_retrieve_round_trip_and_cardinality() {
        let mut store = MemoryStore::new();
        for k in 0..5 {
            store.insert_qa(qa(0, &[k, 50], k as u64)).unwrap();
        }
        assert_eq!(store.len(), 5);
        let r = store.retrieve(&t(&[3, 50]), ProductId(0), 0.1).unwrap();
        assert_eq!(r.qa.as_ref().unwrap().index, 3);
        assert_eq!(r.qa.as_ref().unwrap().similarity, 1.0);
    }

    #[test]
    fn session_written_must_not_decrease() {
        let mut store = MemoryStore::new();
        store.insert_qa(qa(0, &[1], 4)).unwrap();
        assert!(matches!(
            store.insert_knowledge(kn(&[1], 3)),
            Err(MemoryError::InvariantViolation(_))
        ));
        assert!(matches!(
            store.insert_knowledge(kn(&[], 5)),
            Err(MemoryError::InvariantViolation(_))
        ));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn top_k_returns_ranked_candidates() {
        let mut store = MemoryStore::new();
        store.insert_knowledge(kn(&[1, 2], 0)).unwrap();
        store.insert_knowledge(kn(&[1], 0)).unwrap();
        store.insert_knowledge(kn(&[5], 0)).unwrap();
        let (_, kn) = store
            .retrieve_top_k(&t(&[1]), ProductId(0), RetrievalConfig { floor: 0.1, top_k: 3 })
            .unwrap();
        let idx: Vec<usize> = kn.iter().map(|s| s.index).collect();
        assert_eq!(idx, vec![1, 0]);
    }

    #[test]
    fn dump_load_round_trip() {
        let mut store = MemoryStore::new();
        store.insert_qa(qa(2, &[1, 2], 0)).unwrap();
        store.insert_knowledge(kn(&[3], 1)).unwrap();
        store.insert_qa(qa(1, &[4], 1)).unwrap();
        let mut buf = Vec::new();
        store.dump(&mut buf).unwrap();
        let back = MemoryStore::load(buf.as_slice()).unwrap();
        assert_eq!(back, store);
    }

    fn brute_force_best<'a, T>(
        items: impl Iterator<Item = (usize, &'a T, &'a [Token], u64)>,
        query: &[Token],
        floor: f64,
    ) -> Option<usize>
    where
        T: 'a,
    {
        let mut best: Option<(usize, f64, u64)> = None;
        for (i, _, text, session) in items {
            let s = similarity(query, text).unwrap();
            if s < floor {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bs, bsess)) => s > bs || (s == bs && session > bsess),
            };
            if better {
                best = Some((i, s, session));
            }
        }
        best.map(|b| b.0)
    }

    proptest! {
        #[test]
        fn similarity_symmetric_and_bounded(
            a in proptest::collection::vec(32u32..200, 1..20),
            b in proptest::collection::vec(32u32..200, 1..20),
        ) {
            let a: Vec<Token> = a.into_iter().map(Token).collect();
            let b: Vec<Token> = b.into_iter().map(Token).collect();
            let ab = similarity(&a, &b).unwrap();
            let ba = similarity(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn retrieval_matches_linear_scan(
            qas in proptest::collection::vec((0u32..3, proptest::collection::vec(0u32..12, 1..5)), 0..40),
            kns in proptest::collection::vec(proptest::collection::vec(0u32..12, 1..5), 0..40),
            query in proptest::collection::vec(0u32..12, 1..5),
            product in 0u32..3,
        ) {
            let mut store = MemoryStore::new();
            for (i, (p, q)) in qas.iter().enumerate() {
                store.insert_qa(qa(*p, q, (i / 4) as u64)).unwrap();
            }
            let base = store.qa_entries().len() as u64;
            for (i, k) in kns.iter().enumerate() {
                store.insert_knowledge(kn(k, base + (i / 3) as u64)).unwrap();
            }
            let query = t(&query);
            let r = store.retrieve(&query, ProductId(product), DEFAULT_RETRIEVAL_FLOOR).unwrap();
            let expect_qa = brute_force_best(
                store.qa_entries().iter().enumerate()
                    .filter(|(_, e)| e.product_id == ProductId(product))
                    .map(|(i, e)| (i, e, e.question_text.as_slice(), e.session_written)),
                &query, DEFAULT_RETRIEVAL_FLOOR);
            let expect_kn = brute_force_best(
                store.knowledge_entries().iter().enumerate()
                    .map(|(i, e)| (i, e, e.text.as_slice(), e.session_written)),
                &query, DEFAULT_RETRIEVAL_FLOOR);
            prop_assert_eq!(r.qa.as_ref().map(|s| s.index), expect_qa);
            prop_assert_eq!(r.knowledge.as_ref().map(|s| s.index), expect_kn);
            if let Some(s) = r.qa {
                prop_assert_eq!(s.entry.product_id, ProductId(product));
            }
        }
    }
}
