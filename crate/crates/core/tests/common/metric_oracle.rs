//! Independent metric implementations and random run/qrels pairs.

use std::collections::BTreeMap;

use genret_core::corpus::Qrels;
use genret_core::eval::{mrr_at_k, ndcg_at_k, recall_at_k, RunEntry, RunFile};
use genret_core::util::rng_for;
use rand::seq::SliceRandom;
use rand::Rng;

/// Random run and graded qrels over a small document pool. Some run queries
/// are unjudged and some judged queries are missing from the run.
pub fn random_case(trial: u64) -> (RunFile, Qrels) {
    let mut rng = rng_for(trial, "metric-oracle");
    let docs: Vec<String> = (0..rng.gen_range(3..25)).map(|i| format!("d{i}")).collect();
    let mut run = RunFile::default();
    let mut qrels = Qrels::new();
    for q in 0..rng.gen_range(1..8) {
        let qid = format!("q{q}");
        if rng.gen_bool(0.85) {
            let mut pool = docs.clone();
            pool.shuffle(&mut rng);
            pool.truncate(rng.gen_range(0..=docs.len()));
            let mut score = 10.0;
            let list = pool
                .into_iter()
                .map(|d| {
                    if rng.gen_bool(0.7) {
                        score -= rng.gen_range(0.0..1.0);
                    }
                    RunEntry { doc_id: d, score }
                })
                .collect();
            run.insert(qid.clone(), list).unwrap();
        }
        if rng.gen_bool(0.8) {
            let n = rng.gen_range(1..5);
            for d in docs.choose_multiple(&mut rng, n) {
                qrels.insert(qid.clone(), d.clone(), rng.gen_range(1..=3));
            }
        }
    }
    (run, qrels)
}

pub struct Oracle {
    pub mrr: BTreeMap<String, f64>,
    pub recall: BTreeMap<String, f64>,
    pub ndcg: BTreeMap<String, f64>,
}

pub fn oracle(run: &RunFile, qrels: &Qrels, k: usize) -> Oracle {
    let mut o = Oracle {
        mrr: BTreeMap::new(),
        recall: BTreeMap::new(),
        ndcg: BTreeMap::new(),
    };
    for (qid, judged) in qrels.iter() {
        let list = run.get(qid).unwrap_or(&[]);
        let mut rr = 0.0;
        let mut hits = 0;
        let mut dcg = 0.0;
        for rank in 1..=k.min(list.len()) {
            let rel = qrels.relevance(qid, &list[rank - 1].doc_id);
            if rel > 0 {
                if rr == 0.0 {
                    rr = 1.0 / rank as f64;
                }
                hits += 1;
            }
            dcg +=
                (2f64.powi(rel as i32) - 1.0) / ((rank + 1) as f64).ln() * std::f64::consts::LN_2;
        }
        let mut grades: Vec<u32> = judged.values().copied().collect();
        grades.sort();
        grades.reverse();
        let mut idcg = 0.0;
        for (i, g) in grades.iter().take(k).enumerate() {
            idcg += (2f64.powi(*g as i32) - 1.0) / ((i + 2) as f64).ln() * std::f64::consts::LN_2;
        }
        o.mrr.insert(qid.clone(), rr);
        o.recall
            .insert(qid.clone(), hits as f64 / judged.len() as f64);
        o.ndcg
            .insert(qid.clone(), if idcg > 0.0 { dcg / idcg } else { 0.0 });
    }
    o
}

pub fn mean(m: &BTreeMap<String, f64>) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.values().sum::<f64>() / m.len() as f64
    }
}

/// Checks every metric of the library against the oracle on one random case.
pub fn check_case(trial: u64, k: usize) {
    let (run, qrels) = random_case(trial);
    let want = oracle(&run, &qrels, k);
    let pairs = [
        (mrr_at_k(&run, &qrels, k).unwrap(), &want.mrr),
        (recall_at_k(&run, &qrels, k).unwrap(), &want.recall),
        (ndcg_at_k(&run, &qrels, k).unwrap(), &want.ndcg),
    ];
    for (got, want) in pairs {
        assert_eq!(got.per_query.len(), want.len());
        for (q, v) in want {
            let g = got.per_query[q];
            assert!(
                (g - v).abs() <= 1e-12,
                "trial {trial} {} {q}: {g} vs {v}",
                got.name
            );
            assert!((0.0..=1.0).contains(&g));
        }
        assert!((got.mean - mean(want)).abs() <= 1e-12);
        let unjudged = run.query_ids().filter(|q| qrels.get(q).is_none()).count();
        assert_eq!(got.excluded, unjudged);
        let absent = qrels.iter().filter(|(q, _)| run.get(q).is_none()).count();
        assert_eq!(got.missing, absent);
    }
}
