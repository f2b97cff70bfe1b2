//! Pseudo-query generation: seeded contiguous spans of a document with
//! optional term dropout. Plays the role of a doc2query model as input proxy
//! for identifier prediction.

use rand::Rng;

use super::{Corpus, Document, Query};
use crate::error::{Error, Result};
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoQueryConfig {
    pub min_span: usize,
    pub max_span: usize,
    /// Per-token drop probability inside a span (at least one token is kept).
    pub dropout: f64,
}

impl Default for PseudoQueryConfig {
    fn default() -> Self {
        PseudoQueryConfig {
            min_span: 4,
            max_span: 12,
            dropout: 0.1,
        }
    }
}

/// Generates `n` pseudo queries for `doc`. Output depends only on
/// `(doc, n, seed)` and the config.
pub fn generate_pseudo_queries(
    doc: &Document,
    n: usize,
    seed: u64,
    cfg: &PseudoQueryConfig,
) -> Result<Vec<Query>> {
    if n == 0 {
        return Err(Error::Config("pseudo-query count must be >= 1".into()));
    }
    if cfg.min_span == 0 || cfg.min_span > cfg.max_span {
        return Err(Error::Config("invalid pseudo-query span bounds".into()));
    }
    let words: Vec<&str> = doc.raw.split_whitespace().collect();
    let len = doc.text.len();
    debug_assert_eq!(words.len(), len);
    let mut rng = rng_for(seed, &doc.doc_id);
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let (text, raw) = if len <= cfg.min_span {
            (doc.text.clone(), doc.raw.clone())
        } else {
            let span = rng.gen_range(cfg.min_span..=cfg.max_span.min(len));
            let start = rng.gen_range(0..=len - span);
            let mut keep: Vec<usize> = (start..start + span)
                .filter(|_| !rng.gen_bool(cfg.dropout))
                .collect();
            if keep.is_empty() {
                keep.push(start + rng.gen_range(0..span));
            }
            let text = keep.iter().map(|&i| doc.text[i]).collect();
            let raw = keep.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ");
            (text, raw)
        };
        out.push(Query {
            query_id: format!("{}#pq{j}", doc.doc_id),
            text,
            raw,
        });
    }
    Ok(out)
}

/// Pseudo queries grouped by source document, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoQuerySet {
    entries: Vec<(String, Query)>,
}

impl PseudoQuerySet {
    pub fn generate(corpus: &Corpus, n: usize, seed: u64, cfg: &PseudoQueryConfig) -> Result<Self> {
        let mut set = PseudoQuerySet::default();
        for doc in corpus.docs() {
            for q in generate_pseudo_queries(doc, n, seed, cfg)? {
                set.push(doc.doc_id.clone(), q);
            }
        }
        Ok(set)
    }

    pub fn push(&mut self, doc_id: String, q: Query) {
        self.entries.push((doc_id, q));
    }

    pub fn count_for(&self, doc_id: &str) -> usize {
        self.entries.iter().filter(|(d, _)| d == doc_id).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Query)> {
        self.entries.iter().map(|(d, q)| (d, q))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
