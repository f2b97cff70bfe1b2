//! Negative mining and training-triple files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{Bm25Index, Corpus, OracleTeacher, Qrels, Query};
use crate::decoder::{beam_search, PrefixTrie};
use crate::error::{Error, Result};
use crate::model::{dense_representation, fit, Params};
use crate::util::{atomic_write, rank_order, rng_for};

/// A query, a judged positive, a negative and the golden margin between them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriple {
    pub query_id: String,
    pub pos: String,
    pub neg: String,
    pub margin: f64,
}

/// Candidate negatives (with margins) per (query, positive) pair, in the
/// order they were retrieved.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NegativePool {
    pairs: BTreeMap<(String, String), Vec<(String, f64)>>,
}

impl NegativePool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a candidate unless it is already present for the pair.
    pub fn insert(&mut self, query_id: &str, pos: &str, neg: &str, margin: f64) {
        let list = self
            .pairs
            .entry((query_id.to_string(), pos.to_string()))
            .or_default();
        if !list.iter().any(|(n, _)| n == neg) {
            list.push((neg.to_string(), margin));
        }
    }

    pub fn union(&self, other: &NegativePool) -> NegativePool {
        let mut out = self.clone();
        for ((q, p), negs) in &other.pairs {
            for (n, m) in negs {
                out.insert(q, p, n, *m);
            }
        }
        out
    }

    /// Number of (query, positive) pairs with at least one candidate.
    pub fn n_pairs(&self) -> usize {
        self.pairs.values().filter(|v| !v.is_empty()).count()
    }

    pub fn n_candidates(&self) -> usize {
        self.pairs.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_candidates() == 0
    }

    pub fn candidates(&self, query_id: &str, pos: &str) -> &[(String, f64)] {
        self.pairs
            .get(&(query_id.to_string(), pos.to_string()))
            .map_or(&[], Vec::as_slice)
    }

    /// Every candidate as a triple, pairs in sorted order.
    pub fn triples(&self) -> Vec<TrainingTriple> {
        self.pairs
            .iter()
            .flat_map(|((q, p), negs)| {
                negs.iter().map(move |(n, m)| TrainingTriple {
                    query_id: q.clone(),
                    pos: p.clone(),
                    neg: n.clone(),
                    margin: *m,
                })
            })
            .collect()
    }

    pub fn from_triples(triples: &[TrainingTriple]) -> Self {
        let mut pool = Self::new();
        for t in triples {
            pool.insert(&t.query_id, &t.pos, &t.neg, t.margin);
        }
        pool
    }

    /// One uniformly drawn negative per pair, in shuffled order.
    pub fn sample_epoch(&self, seed: u64, label: &str, epoch: usize) -> Vec<TrainingTriple> {
        let mut rng = rng_for(seed, &format!("{label}/epoch{epoch}"));
        let mut out: Vec<TrainingTriple> = self
            .pairs
            .iter()
            .filter(|(_, negs)| !negs.is_empty())
            .map(|((q, p), negs)| {
                let (n, m) = &negs[rng.gen_range(0..negs.len())];
                TrainingTriple {
                    query_id: q.clone(),
                    pos: p.clone(),
                    neg: n.clone(),
                    margin: *m,
                }
            })
            .collect();
        out.shuffle(&mut rng);
        out
    }
}

/// Queries skipped for lack of judged positives, and pairs produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MiningReport {
    pub queries_without_positives: usize,
    pub pairs: usize,
}

/// Retrieval runs in parallel across queries; the pool is filled in query
/// order so the result does not depend on scheduling.
fn fill_pool(
    queries: &[Query],
    qrels: &Qrels,
    teacher: &OracleTeacher,
    ranked: impl Fn(&Query) -> Result<Vec<String>> + Sync,
) -> Result<(NegativePool, MiningReport)> {
    let judged_of = |q: &Query| {
        qrels
            .get(&q.query_id)
            .filter(|m| m.values().any(|&r| r >= 1))
    };
    let candidates: Vec<Option<Vec<String>>> = queries
        .par_iter()
        .map(|q| judged_of(q).map(|_| ranked(q)).transpose())
        .collect::<Result<_>>()?;
    let mut pool = NegativePool::new();
    let mut report = MiningReport::default();
    for (q, cands) in queries.iter().zip(candidates) {
        let (Some(judged), Some(cands)) = (judged_of(q), cands) else {
            report.queries_without_positives += 1;
            continue;
        };
        let negs: Vec<String> = cands
            .into_iter()
            .filter(|d| judged.get(d).is_none_or(|&r| r == 0))
            .collect();
        for (pos, _) in judged.iter().filter(|(_, &r)| r >= 1) {
            for n in &negs {
                pool.insert(&q.query_id, pos, n, teacher.margin(&q.query_id, pos, n)?);
            }
            report.pairs += 1;
        }
    }
    if report.queries_without_positives > 0 {
        warn!(
            "{} queries without judged positives were skipped",
            report.queries_without_positives
        );
    }
    Ok((pool, report))
}

/// Top-`k` lexical candidates, judged positives removed.
pub fn mine_negatives_bm25(
    corpus: &Corpus,
    queries: &[Query],
    qrels: &Qrels,
    teacher: &OracleTeacher,
    k: usize,
) -> Result<(NegativePool, MiningReport)> {
    let index = Bm25Index::new(corpus);
    fill_pool(queries, qrels, teacher, |q| {
        Ok(index.rank(q, k).into_iter().map(|(d, _)| d).collect())
    })
}

/// Dense representation of every document, one row each in corpus order.
pub fn embed_corpus(p: &Params, corpus: &Corpus) -> Result<Array2<f64>> {
    let d = p.config().d_model;
    let vecs = corpus
        .docs()
        .par_iter()
        .map(|doc| dense_representation(p, &fit(p.config().max_seq_len, &doc.text)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((corpus.len(), d));
    for (mut row, v) in out.rows_mut().into_iter().zip(vecs) {
        row.assign(&v);
    }
    Ok(out)
}

/// Exact top-`k` documents by dense dot product, ties by document id.
pub fn dense_top_k(
    p: &Params,
    doc_vecs: &Array2<f64>,
    corpus: &Corpus,
    query: &[u32],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let q = dense_representation(p, &fit(p.config().max_seq_len, query))?;
    let scores = doc_vecs.dot(&q);
    let mut ranked: Vec<(&str, f64)> = corpus
        .docs()
        .iter()
        .zip(scores.iter())
        .map(|(d, &s)| (d.doc_id.as_str(), s))
        .collect();
    ranked.sort_by(|a, b| rank_order((&a.0, a.1), (&b.0, b.1)));
    ranked.truncate(k);
    Ok(ranked
        .into_iter()
        .map(|(d, s)| (d.to_string(), s))
        .collect())
}

/// Top-`k` candidates by dense retrieval with `p`, judged positives removed.
pub fn mine_negatives_dense(
    p: &Params,
    corpus: &Corpus,
    queries: &[Query],
    qrels: &Qrels,
    teacher: &OracleTeacher,
    k: usize,
) -> Result<(NegativePool, MiningReport)> {
    let docs = embed_corpus(p, corpus)?;
    fill_pool(queries, qrels, teacher, |q| {
        Ok(dense_top_k(p, &docs, corpus, &q.text, k)?
            .into_iter()
            .map(|(d, _)| d)
            .collect())
    })
}

/// Top-`k` candidates by constrained beam search with `p`, judged positives
/// removed.
pub fn mine_negatives_beam(
    p: &Params,
    trie: &PrefixTrie,
    queries: &[Query],
    qrels: &Qrels,
    teacher: &OracleTeacher,
    k: usize,
) -> Result<(NegativePool, MiningReport)> {
    fill_pool(queries, qrels, teacher, |q| {
        Ok(
            beam_search(p, &fit(p.config().max_seq_len, &q.text), trie, k)?
                .into_iter()
                .map(|h| h.doc_id)
                .collect(),
        )
    })
}

pub fn write_triples(path: &Path, triples: &[TrainingTriple]) -> Result<()> {
    let mut out = String::new();
    for t in triples {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            t.query_id, t.pos, t.neg, t.margin
        ));
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_triples(path: &Path) -> Result<Vec<TrainingTriple>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::parse(
                path,
                i + 1,
                format!("expected 4 tab-separated fields, got {}", f.len()),
            ));
        }
        let margin: f64 = f[3]
            .parse()
            .map_err(|_| Error::parse(path, i + 1, format!("bad margin {:?}", f[3])))?;
        if !margin.is_finite() {
            return Err(Error::parse(path, i + 1, "margin must be finite"));
        }
        if f[1] == f[2] {
            return Err(Error::parse(
                path,
                i + 1,
                "positive and negative are the same document",
            ));
        }
        out.push(TrainingTriple {
            query_id: f[0].to_string(),
            pos: f[1].to_string(),
            neg: f[2].to_string(),
            margin,
        });
    }
    Ok(out)
}
