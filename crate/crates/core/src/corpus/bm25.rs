//! Okapi BM25 over an inverted index of the corpus.
//!
//! score(q, d) = sum over query tokens t of
//!     idf(t) * tf(t, d) * (k1 + 1) / (tf(t, d) + k1 * (1 - b + b * |d| / avgdl))
//! with idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5)).

use std::collections::HashMap;

use super::{Corpus, Query, UNK};
use crate::util::rank_order;

pub const BM25_K1: f64 = 0.9;
pub const BM25_B: f64 = 0.4;

/// Precomputed corpus statistics and postings.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    doc_ids: Vec<String>,
    doc_len: Vec<f64>,
    avgdl: f64,
    postings: HashMap<u32, Vec<(usize, u32)>>,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    pub fn new(corpus: &Corpus) -> Self {
        Self::with_params(corpus, BM25_K1, BM25_B)
    }

    pub fn with_params(corpus: &Corpus, k1: f64, b: f64) -> Self {
        let mut postings: HashMap<u32, Vec<(usize, u32)>> = HashMap::new();
        let mut doc_len = Vec::with_capacity(corpus.len());
        for (i, d) in corpus.docs().iter().enumerate() {
            doc_len.push(d.text.len() as f64);
            let mut tf: HashMap<u32, u32> = HashMap::new();
            for &t in &d.text {
                *tf.entry(t).or_default() += 1;
            }
            for (t, c) in tf {
                postings.entry(t).or_default().push((i, c));
            }
        }
        for p in postings.values_mut() {
            p.sort_unstable();
        }
        let avgdl = if doc_len.is_empty() {
            0.0
        } else {
            doc_len.iter().sum::<f64>() / doc_len.len() as f64
        };
        Bm25Index {
            doc_ids: corpus.docs().iter().map(|d| d.doc_id.clone()).collect(),
            doc_len,
            avgdl,
            postings,
            k1,
            b,
        }
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores for every document (zero where no query term occurs). `None`
    /// when the query has no in-vocabulary terms.
    pub fn scores(&self, query: &Query) -> Option<Vec<f64>> {
        let mut scores = vec![0.0; self.doc_ids.len()];
        let mut matched = false;
        for &t in &query.text {
            if t == UNK {
                continue;
            }
            let Some(post) = self.postings.get(&t) else {
                continue;
            };
            matched = true;
            let idf = self.idf(post.len());
            for &(doc, tf) in post {
                let tf = tf as f64;
                let norm = 1.0 - self.b + self.b * self.doc_len[doc] / self.avgdl;
                scores[doc] += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        matched.then_some(scores)
    }

    /// Top-k documents by BM25, sorted by (score desc, doc_id asc).
    pub fn rank(&self, query: &Query, k: usize) -> Vec<(String, f64)> {
        let Some(scores) = self.scores(query) else {
            return Vec::new();
        };
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            rank_order((&self.doc_ids[a], scores[a]), (&self.doc_ids[b], scores[b]))
        });
        order
            .into_iter()
            .take(k)
            .map(|i| (self.doc_ids[i].clone(), scores[i]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Corpus {
        Corpus::from_raw(vec![
            ("d0".into(), "apple banana apple".into()),
            ("d1".into(), "banana cherry".into()),
            ("d2".into(), "cherry date elder fig".into()),
        ])
        .unwrap()
    }

    #[test]
    fn exact_document_ranks_first() {
        let c = corpus();
        let idx = Bm25Index::new(&c);
        let q = c.make_query("q", "cherry date elder fig").unwrap();
        assert_eq!(idx.rank(&q, 1)[0].0, "d2");
    }

    #[test]
    fn k_larger_than_corpus() {
        let c = corpus();
        let idx = Bm25Index::new(&c);
        let q = c.make_query("q", "banana").unwrap();
        let r = idx.rank(&q, 50);
        assert_eq!(r.len(), 3);
        assert_eq!(r[2], ("d2".to_string(), 0.0));
    }

    #[test]
    fn out_of_vocabulary_query_is_empty() {
        let c = corpus();
        let q = c.make_query("q", "zebra yak").unwrap();
        assert!(Bm25Index::new(&c).rank(&q, 10).is_empty());
    }

    #[test]
    fn ties_break_by_doc_id() {
        let c =
            Corpus::from_raw(vec![("b".into(), "x y".into()), ("a".into(), "x y".into())]).unwrap();
        let q = c.make_query("q", "x").unwrap();
        let r = Bm25Index::new(&c).rank(&q, 2);
        assert_eq!(r[0].0, "a");
        assert_eq!(r[0].1, r[1].1);
    }
}
