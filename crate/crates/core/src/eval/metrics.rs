use std::collections::BTreeMap;

use serde_json::{json, Value};

use super::RunFile;
use crate::corpus::Qrels;
use crate::error::{Error, Result};

/// One metric evaluated over a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// e.g. `mrr@10`.
    pub name: String,
    pub k: usize,
    /// Arithmetic mean of `per_query`.
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
    /// Run queries with no judged positive; left out of the mean.
    pub excluded: usize,
    /// Judged queries absent from the run; scored 0.
    pub missing: usize,
}

impl MetricReport {
    pub fn n_queries(&self) -> usize {
        self.per_query.len()
    }

    pub fn to_json(&self) -> Value {
        json!({ "mean": self.mean, "per_query": self.per_query })
    }
}

/// `{metric: {mean, per_query}}` for every report.
pub fn reports_json(reports: &[MetricReport]) -> Value {
    Value::Object(
        reports
            .iter()
            .map(|r| (r.name.clone(), r.to_json()))
            .collect(),
    )
}

fn evaluate(
    name: &str,
    run: &RunFile,
    qrels: &Qrels,
    k: usize,
    per_query: impl Fn(&[String], &BTreeMap<String, u32>) -> f64,
) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::Config("metric cutoff k must be >= 1".into()));
    }
    let mut values = BTreeMap::new();
    let mut missing = 0;
    for (qid, judged) in qrels.iter() {
        if !judged.values().any(|&r| r > 0) {
            continue;
        }
        let top: Vec<String> = match run.get(qid) {
            Some(list) => list.iter().take(k).map(|e| e.doc_id.clone()).collect(),
            None => {
                missing += 1;
                Vec::new()
            }
        };
        values.insert(qid.clone(), per_query(&top, judged));
    }
    let excluded = run.query_ids().filter(|q| !values.contains_key(*q)).count();
    let mean = if values.is_empty() {
        0.0
    } else {
        values.values().sum::<f64>() / values.len() as f64
    };
    Ok(MetricReport {
        name: format!("{name}@{k}"),
        k,
        mean,
        per_query: values,
        excluded,
        missing,
    })
}

/// Reciprocal rank of the first relevant document within the top `k`.
pub fn mrr_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    evaluate("mrr", run, qrels, k, |top, judged| {
        top.iter()
            .position(|d| judged.get(d).is_some_and(|&r| r > 0))
            .map_or(0.0, |i| 1.0 / (i + 1) as f64)
    })
}

/// Fraction of the relevant documents found in the top `k`.
pub fn recall_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    evaluate("recall", run, qrels, k, |top, judged| {
        let relevant = judged.values().filter(|&&r| r > 0).count();
        let found = top
            .iter()
            .filter(|d| judged.get(*d).is_some_and(|&r| r > 0))
            .count();
        found as f64 / relevant as f64
    })
}

/// NDCG with gain 2^rel - 1 and log2(rank + 1) discount.
pub fn ndcg_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    evaluate("ndcg", run, qrels, k, |top, judged| {
        let gain = |r: u32| 2f64.powi(r as i32) - 1.0;
        let disc = |i: usize| ((i + 2) as f64).log2();
        let dcg: f64 = top
            .iter()
            .enumerate()
            .map(|(i, d)| gain(judged.get(d).copied().unwrap_or(0)) / disc(i))
            .sum();
        let mut ideal: Vec<u32> = judged.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &r)| gain(r) / disc(i))
            .sum();
        if idcg > 0.0 {
            dcg / idcg
        } else {
            0.0
        }
    })
}
