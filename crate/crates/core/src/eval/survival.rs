use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;

use super::{mrr_at_k, recall_at_k, RunEntry, RunFile};
use crate::corpus::{Qrels, Query};
use crate::decoder::{beam_search_traced, BeamTrace, Hit, PrefixTrie};
use crate::error::{Error, Result};
use crate::model::{fit, Params};
use crate::rq::{DocId, DocIdMap};

/// Full-depth beam output for one query together with every intermediate beam.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    pub query_id: String,
    pub hits: Vec<Hit>,
    pub trace: BeamTrace,
}

/// Beam search of width `k` for every query, keeping the per-depth beams.
pub fn traced_retrieval(
    p: &Params,
    trie: &PrefixTrie,
    queries: &[Query],
    k: usize,
) -> Result<Vec<QueryTrace>> {
    let max_len = p.config().max_seq_len;
    queries
        .par_iter()
        .map(|q| {
            let (beam, trace) =
                beam_search_traced(p, &fit(max_len, &q.text), trie, k, trie.depth())?;
            let hits = beam
                .into_iter()
                .map(|c| {
                    let doc = trie.document(&c.prefix).ok_or_else(|| {
                        Error::Input(format!("decoded an unassigned identifier {:?}", c.prefix))
                    })?;
                    Ok(Hit {
                        doc_id: doc.to_string(),
                        docid: DocId(c.prefix),
                        score: c.score,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(QueryTrace {
                query_id: q.query_id.clone(),
                hits,
                trace,
            })
        })
        .collect()
}

pub fn run_from_traces(traces: &[QueryTrace]) -> Result<RunFile> {
    let mut run = RunFile::default();
    for t in traces {
        run.insert_hits(t.query_id.clone(), &t.hits)?;
    }
    Ok(run)
}

/// Survival rate per prefix length.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalReport {
    pub k: usize,
    pub checkpoints: Vec<usize>,
    /// Mean over judged queries, aligned with `checkpoints`.
    pub rates: Vec<f64>,
    pub per_query: BTreeMap<String, Vec<f64>>,
}

impl SurvivalReport {
    pub fn rate_at(&self, i: usize) -> Option<f64> {
        self.checkpoints
            .iter()
            .position(|&c| c == i)
            .map(|j| self.rates[j])
    }
}

/// For each checkpoint i, the fraction of a query's relevant documents whose
/// identifier prefix of length i is in the depth-i beam, averaged over queries
/// with a judged positive. Judged queries without a trace count as 0, as do
/// relevant documents without an identifier.
pub fn survival_from_traces(
    traces: &[QueryTrace],
    map: &DocIdMap,
    qrels: &Qrels,
    k: usize,
    checkpoints: &[usize],
) -> Result<SurvivalReport> {
    let depth = map.docid_len();
    if let Some(&bad) = checkpoints.iter().find(|&&i| i == 0 || i > depth) {
        return Err(Error::OutOfRange(format!(
            "prefix length {bad} outside 1..={depth}"
        )));
    }
    let by_query: BTreeMap<&str, &BeamTrace> = traces
        .iter()
        .map(|t| (t.query_id.as_str(), &t.trace))
        .collect();
    let mut per_query = BTreeMap::new();
    for (qid, judged) in qrels.iter() {
        let relevant: Vec<&str> = judged
            .iter()
            .filter(|(_, &r)| r > 0)
            .map(|(d, _)| d.as_str())
            .collect();
        if relevant.is_empty() {
            continue;
        }
        let trace = by_query.get(qid.as_str());
        let rates = checkpoints
            .iter()
            .map(|&i| {
                let Some(level) = trace.and_then(|t| t.levels.get(i - 1)) else {
                    return 0.0;
                };
                let kept: HashSet<&[u32]> = level.iter().map(|c| c.prefix.as_slice()).collect();
                let found = relevant
                    .iter()
                    .filter(|d| map.get(d).is_some_and(|id| kept.contains(&id.codes()[..i])))
                    .count();
                found as f64 / relevant.len() as f64
            })
            .collect::<Vec<f64>>();
        per_query.insert(qid.clone(), rates);
    }
    let n = per_query.len();
    let rates = (0..checkpoints.len())
        .map(|j| {
            if n == 0 {
                0.0
            } else {
                per_query.values().map(|r| r[j]).sum::<f64>() / n as f64
            }
        })
        .collect();
    Ok(SurvivalReport {
        k,
        checkpoints: checkpoints.to_vec(),
        rates,
        per_query,
    })
}

/// Prefix survival of beam width `k` at each checkpoint.
pub fn prefix_survival(
    p: &Params,
    trie: &PrefixTrie,
    map: &DocIdMap,
    queries: &[Query],
    qrels: &Qrels,
    k: usize,
    checkpoints: &[usize],
) -> Result<SurvivalReport> {
    let traces = traced_retrieval(p, trie, queries, k)?;
    survival_from_traces(&traces, map, qrels, k, checkpoints)
}

/// Retrieval quality when identifiers are cut to a prefix length.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixPoint {
    pub prefix_len: usize,
    pub mrr10: f64,
    pub recall10: f64,
    pub survival: f64,
}

/// Metrics at each checkpoint from the beams of a traced run. At length i,
/// each depth-i beam entry stands for every document under its prefix (in
/// identifier order, sharing the prefix score); MRR@10 and Recall@10 are taken
/// over that expanded ranking.
pub fn prefix_curve(
    traces: &[QueryTrace],
    trie: &PrefixTrie,
    map: &DocIdMap,
    qrels: &Qrels,
    k: usize,
    checkpoints: &[usize],
) -> Result<Vec<PrefixPoint>> {
    let survival = survival_from_traces(traces, map, qrels, k, checkpoints)?;
    checkpoints
        .iter()
        .zip(&survival.rates)
        .map(|(&i, &surv)| {
            let mut run = RunFile::default();
            for t in traces {
                let mut entries = Vec::new();
                for c in t.trace.levels.get(i - 1).into_iter().flatten() {
                    for doc in trie.documents_under(&c.prefix) {
                        if entries.len() == 10 {
                            break;
                        }
                        entries.push(RunEntry {
                            doc_id: doc.to_string(),
                            score: c.score,
                        });
                    }
                }
                run.insert(t.query_id.clone(), entries)?;
            }
            Ok(PrefixPoint {
                prefix_len: i,
                mrr10: mrr_at_k(&run, qrels, 10)?.mean,
                recall10: recall_at_k(&run, qrels, 10)?.mean,
                survival: surv,
            })
        })
        .collect()
}
