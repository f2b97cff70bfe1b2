mod common;

use std::collections::HashSet;

use genret_core::corpus::{Qrels, Query};
use genret_core::decoder::{build_trie, prefix_truncated_retrieval};
use genret_core::eval::{
    prefix_survival, recall_at_k, run_from_traces, survival_from_traces, traced_retrieval,
};
use genret_core::model::{ModelConfig, Params};
use genret_core::rq::{DocId, DocIdMap};
use genret_core::util::rng_for;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn metrics_agree_with_brute_force_oracle() {
    for trial in 0..150 {
        for k in [1, 3, 10, 100] {
            common::metric_oracle::check_case(trial, k);
        }
    }
}

struct Setup {
    params: Params,
    map: DocIdMap,
    queries: Vec<Query>,
    qrels: Qrels,
}

fn setup(seed: u64) -> Setup {
    let cfg = ModelConfig {
        d_model: 8,
        docid_len: 3,
        docid_vocab: 4,
        n_layers: 1,
        n_heads: 2,
        ffn_dim: 8,
        token_vocab: 16,
        max_seq_len: 8,
    };
    let params = Params::init(&cfg, seed).unwrap();
    let mut rng = rng_for(seed, "survival-setup");
    let mut all: Vec<Vec<u32>> = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                all.push(vec![a, b, c]);
            }
        }
    }
    all.shuffle(&mut rng);
    let n_docs = 30;
    let entries = all
        .into_iter()
        .take(n_docs)
        .enumerate()
        .map(|(i, c)| (format!("d{i}"), DocId(c)))
        .collect();
    let map = DocIdMap::new(entries).unwrap();
    let mut qrels = Qrels::new();
    let queries = (0..12)
        .map(|q| {
            let qid = format!("q{q}");
            for _ in 0..rng.gen_range(1..4) {
                qrels.insert(qid.clone(), format!("d{}", rng.gen_range(0..n_docs)), 1);
            }
            let text = (0..rng.gen_range(2..8))
                .map(|_| rng.gen_range(0..16))
                .collect();
            Query {
                query_id: qid,
                text,
                raw: String::new(),
            }
        })
        .collect();
    Setup {
        params,
        map,
        queries,
        qrels,
    }
}

#[test]
fn full_width_beam_keeps_everything() {
    let s = setup(0);
    let trie = build_trie(&s.map).unwrap();
    let r = prefix_survival(
        &s.params,
        &trie,
        &s.map,
        &s.queries,
        &s.qrels,
        30,
        &[1, 2, 3],
    )
    .unwrap();
    assert_eq!(r.rates, vec![1.0, 1.0, 1.0]);
}

#[test]
fn survival_at_full_length_is_recall_of_the_same_beam() {
    for seed in 0..4 {
        let s = setup(seed);
        let trie = build_trie(&s.map).unwrap();
        for k in [1, 2, 3, 5, 8] {
            let traces = traced_retrieval(&s.params, &trie, &s.queries, k).unwrap();
            let run = run_from_traces(&traces).unwrap();
            let surv = survival_from_traces(&traces, &s.map, &s.qrels, k, &[1, 2, 3]).unwrap();
            let recall = recall_at_k(&run, &s.qrels, k).unwrap();
            assert_eq!(surv.rate_at(3).unwrap(), recall.mean);
            for (q, rates) in &surv.per_query {
                assert_eq!(rates[2], recall.per_query[q]);
            }
            for w in surv.rates.windows(2) {
                assert!(w[1] <= w[0], "seed {seed} k {k}: {:?}", surv.rates);
            }
        }
    }
}

#[test]
fn survival_matches_independent_truncated_beams() {
    let s = setup(7);
    let trie = build_trie(&s.map).unwrap();
    let k = 3;
    let report = prefix_survival(
        &s.params,
        &trie,
        &s.map,
        &s.queries,
        &s.qrels,
        k,
        &[1, 2, 3],
    )
    .unwrap();
    for (j, i) in [1usize, 2, 3].into_iter().enumerate() {
        let mut total = 0.0;
        for q in &s.queries {
            let beam = prefix_truncated_retrieval(&s.params, &q.text, &trie, k, i).unwrap();
            let kept: HashSet<Vec<u32>> = beam.into_iter().map(|c| c.prefix).collect();
            let judged = s.qrels.get(&q.query_id).unwrap();
            let found = judged
                .keys()
                .filter(|d| kept.contains(&s.map.get(d).unwrap().codes()[..i]))
                .count();
            total += found as f64 / judged.len() as f64;
        }
        let want = total / s.queries.len() as f64;
        assert!((report.rates[j] - want).abs() < 1e-12, "i={i}");
    }
}

#[test]
fn bad_checkpoints_are_rejected() {
    let s = setup(1);
    let trie = build_trie(&s.map).unwrap();
    assert!(prefix_survival(&s.params, &trie, &s.map, &s.queries, &s.qrels, 2, &[0]).is_err());
    assert!(prefix_survival(&s.params, &trie, &s.map, &s.queries, &s.qrels, 2, &[4]).is_err());
}
