//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use genret_core::checkpoint::{Checkpoint, StageTag};
use genret_core::decoder::{beam_search, brute_force_rank, build_trie};
use genret_core::eval::prefix_curve;
use genret_core::eval::traced_retrieval;
use genret_core::model::{ModelConfig, Params};
use genret_core::pipeline::{
    dense_pool, evaluate, init_checkpoint, quantize, run_m0, run_m1, run_m2, run_m3, run_m4,
    run_pipeline, Dataset, Evaluation, PipelineConfig,
};
use genret_core::rq::{assign_docids, distortion, encode_greedy, train_codebooks, DocId, DocIdMap};
use genret_core::training::{AlphaSchedule, Objective, DEFAULT_BETA, DEFAULT_CHECKPOINTS};
use genret_core::util::rng_for;

type Verdict = Result<String, String>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Suite {
    failed: usize,
}

impl Suite {
    fn run(&mut self, id: u32, name: &str, f: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let verdict = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(e) => Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {tag}: {name}: {detail} [{secs:.1}s]");
    }
}

fn scaled_params(cfg: &ModelConfig, seed: u64, spread: f64) -> Params {
    let mut p = Params::init(cfg, seed).unwrap();
    let mut rng = rng_for(seed, "acceptance/params");
    for x in p.as_mut_slice() {
        *x = rng.gen_range(-spread..spread);
    }
    p
}

fn beam_exactness() -> Verdict {
    let mut compared = 0;
    for inst in 0..24u64 {
        let mut rng = rng_for(inst, "acceptance/beam");
        let l = rng.gen_range(1..=5);
        let v = rng.gen_range(2..=9usize);
        let cap = (v as u64).pow(l as u32).min(512) as usize;
        let n = rng.gen_range(1..=cap);
        let cfg = ModelConfig {
            d_model: 8 * rng.gen_range(1..=2),
            docid_len: l,
            docid_vocab: v,
            n_layers: rng.gen_range(1..=2),
            n_heads: 2,
            ffn_dim: 16,
            token_vocab: 30,
            max_seq_len: 12,
        };
        let p = scaled_params(&cfg, inst, 0.5);
        let mut codes: Vec<Vec<u32>> = Vec::new();
        while codes.len() < n {
            let c: Vec<u32> = (0..l).map(|_| rng.gen_range(0..v as u32)).collect();
            if !codes.contains(&c) {
                codes.push(c);
            }
        }
        codes.shuffle(&mut rng);
        let map = DocIdMap::new(
            codes
                .into_iter()
                .enumerate()
                .map(|(i, c)| (format!("d{i}"), DocId(c)))
                .collect(),
        )
        .unwrap();
        let trie = build_trie(&map).unwrap();
        for _ in 0..3 {
            let q: Vec<u32> = (0..rng.gen_range(1..=12))
                .map(|_| rng.gen_range(0..30))
                .collect();
            let beam = beam_search(&p, &q, &trie, n).unwrap();
            let brute = brute_force_rank(&p, &q, &map).unwrap();
            if beam.len() != brute.len() {
                return Err(format!(
                    "instance {inst}: {} vs {} results",
                    beam.len(),
                    brute.len()
                ));
            }
            for (r, (a, b)) in beam.iter().zip(&brute).enumerate() {
                if a.doc_id != b.doc_id || (a.score - b.score).abs() > 1e-9 {
                    return Err(format!(
                        "instance {inst} rank {r}: {} {} vs {} {}",
                        a.doc_id, a.score, b.doc_id, b.score
                    ));
                }
            }
            compared += 1;
        }
    }
    Ok(format!(
        "24 instances (<= 512 docs), {compared} queries identical"
    ))
}

fn gradients() -> Verdict {
    use common::grad_check::{self, SEEDS};
    for seed in SEEDS {
        grad_check::dense(seed);
        grad_check::prefix_rank(seed);
        grad_check::multi_objective(seed);
        grad_check::seq2seq(seed);
    }
    Ok(format!(
        "margin, prefix rank, multi-objective and seq2seq losses, {} seeds, every tensor rel err < {:e}",
        SEEDS.len(),
        grad_check::TOL
    ))
}

fn alpha_schedule() -> Verdict {
    let s = AlphaSchedule::new(DEFAULT_BETA, 32).unwrap();
    let z = 1.0 - DEFAULT_BETA / 32.0;
    let a: Vec<f64> = DEFAULT_CHECKPOINTS
        .iter()
        .map(|&i| s.alpha(i).unwrap())
        .collect();
    if a[3] != 1.0 {
        return Err(format!("alpha_32 = {}", a[3]));
    }
    for (&i, &got) in DEFAULT_CHECKPOINTS.iter().zip(&a) {
        let want = (1.0 - DEFAULT_BETA / i as f64) / z;
        if (got - want).abs() > 1e-12 {
            return Err(format!("alpha_{i} = {got}, closed form {want}"));
        }
    }
    let steps: Vec<f64> = a.windows(2).map(|w| w[1] - w[0]).collect();
    if !steps.windows(2).all(|d| d[0] >= d[1]) || !steps.iter().all(|&d| d > 0.0) {
        return Err(format!(
            "checkpoint increments {steps:?} not positive and non-increasing"
        ));
    }
    for i in 4..32 {
        let (lo, mid, hi) = (
            s.alpha(i - 1).unwrap(),
            s.alpha(i).unwrap(),
            s.alpha(i + 1).unwrap(),
        );
        if mid - lo < hi - mid {
            return Err(format!("concavity fails at i = {i}"));
        }
    }
    Ok(format!(
        "alpha on {{4,8,16,32}} = {a:.4?}, concave on 3..=32"
    ))
}

fn rq_distortion() -> Verdict {
    let mut rng = rng_for(0, "acceptance/rq");
    let x = Array2::from_shape_fn((1000, 32), |_| rng.sample::<f64, _>(StandardNormal));
    let mut lines = Vec::new();
    let mut last = f64::INFINITY;
    for l in [1, 2, 4, 8] {
        let cb = train_codebooks(&x, l, 32, 20, 0).unwrap();
        // plain RQ codes: 1000 points do not fit uniquely in 32 codes at L = 1
        let ids = encode_greedy(&x, &cb).unwrap();
        let mse = distortion(&x, &ids, &cb).unwrap().mse;
        if !mse.windows(2).all(|w| w[1] <= w[0]) {
            return Err(format!("L = {l}: distortion {mse:?} increases"));
        }
        if mse[l - 1] > last {
            return Err(format!(
                "L = {l}: distortion {} above the shorter configuration's {last}",
                mse[l - 1]
            ));
        }
        last = mse[l - 1];
        lines.push(format!("L={l}: {:.3}", mse[l - 1]));
    }
    for (n, v) in [(16, 16), (10, 32)] {
        let mut rng = rng_for(n as u64, "acceptance/rq-exact");
        let x = Array2::from_shape_fn((n, 32), |_| rng.sample::<f64, _>(StandardNormal));
        let cb = train_codebooks(&x, 1, v, 20, 0).unwrap();
        let ids = assign_docids(&x, &cb).unwrap();
        let mse = distortion(&x, &ids, &cb).unwrap().mse;
        if mse[0] != 0.0 {
            return Err(format!("exact fit N = {n}, V = {v}: distortion {}", mse[0]));
        }
    }
    Ok(format!(
        "non-increasing in prefix length ({}); exact fit gives 0",
        lines.join(", ")
    ))
}

fn metric_oracles() -> Verdict {
    for trial in 0..100 {
        for k in [1, 3, 10, 100] {
            common::metric_oracle::check_case(1000 + trial, k);
        }
    }
    Ok(
        "MRR, Recall, NDCG on 100 random run/qrels pairs at k in {1,3,10,100}, exact to 1e-12"
            .into(),
    )
}

const SEEDS: [u64; 3] = [0, 1, 2];
const GRID: [(usize, usize); 3] = [(4, 64), (8, 32), (16, 16)];

/// Everything the ablation criteria need from one seed.
struct SeedResult {
    seed: u64,
    /// Wall clock of the M0 to M4 chain plus its evaluation.
    chain_time: Duration,
    progressive: Evaluation,
    full_length: Evaluation,
    no_retention: Evaluation,
    /// (L, V, MRR@10) per grid configuration.
    grid: Vec<(usize, usize, f64)>,
    artifacts: Artifacts,
}

/// Byte images of one pipeline run, for the reproducibility check.
#[derive(PartialEq)]
struct Artifacts {
    checkpoints: Vec<Vec<u8>>,
    docids: Vec<u8>,
    run: String,
    report: String,
}

fn bytes(c: &Checkpoint) -> Vec<u8> {
    c.to_bytes().unwrap()
}

fn docid_bytes(map: &DocIdMap) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("docids.jsonl");
    map.write_jsonl(&path).unwrap();
    std::fs::read(path).unwrap()
}

fn report_text(p: &Params, map: &DocIdMap, ds: &Dataset, eval: &Evaluation) -> String {
    let trie = build_trie(map).unwrap();
    let dev = &ds.data.dev;
    let traces = traced_retrieval(p, &trie, &dev.queries, 10).unwrap();
    let cps: Vec<usize> = (1..=map.docid_len()).collect();
    let mut out = format!("{:?}\n", eval.survival);
    for pt in prefix_curve(&traces, &trie, map, &dev.qrels, 10, &cps).unwrap() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            pt.prefix_len, pt.mrr10, pt.recall10, pt.survival
        ));
    }
    out
}

fn eval_on_dev(cfg: &PipelineConfig, ds: &Dataset, p: &Params, map: &DocIdMap) -> Evaluation {
    let dev = &ds.data.dev;
    evaluate(
        p,
        map,
        &dev.queries,
        &dev.qrels,
        cfg.eval_beam,
        cfg.survival_beam,
    )
    .unwrap()
}

fn seed_experiments(seed: u64) -> SeedResult {
    let cfg = PipelineConfig::synthetic_default(seed);
    let start = Instant::now();
    let ds = Dataset::generate(&cfg).unwrap();
    let data = ds.train_data();
    let shape = &cfg.shape;
    let init = init_checkpoint(data.corpus, shape, seed).unwrap();
    let m0 = run_m0(cfg.stage(StageTag::M0), &data, &init).unwrap();
    let dense = dense_pool(&m0, &data, cfg.stage(StageTag::M2).k_neg).unwrap();

    let stage = |s| cfg.stage(s);
    // M1 and M2 for one identifier shape
    let head = |l: usize, v: usize| {
        let q = quantize(&m0, data.corpus, l, v, cfg.kmeans_iters, seed).unwrap();
        let m1 = run_m1(stage(StageTag::M1), &ds.pseudo, &q).unwrap();
        let m2 = run_m2(stage(StageTag::M2), &data, &dense, &q.map, &m1).unwrap();
        (q, m1, m2)
    };
    let tail = |q: &genret_core::pipeline::Quantized, m2: &Checkpoint, objective| {
        let trie = build_trie(&q.map).unwrap();
        let m3 = run_m3(
            stage(StageTag::M3),
            &data,
            &dense,
            &q.map,
            &trie,
            m2,
            objective,
        )
        .unwrap();
        let m4 = run_m4(stage(StageTag::M4), &data, &q.map, &trie, &m3, objective).unwrap();
        (m3, m4)
    };

    let (q, m1, m2) = head(shape.docid_len, shape.docid_vocab);
    let (m3, m4) = tail(&q, &m2, Objective::Progressive);
    let progressive = eval_on_dev(&cfg, &ds, &m4.params, &q.map);
    let chain_time = start.elapsed();
    let artifacts = Artifacts {
        checkpoints: [&m0, &q.checkpoint, &m1, &m2, &m3, &m4].map(bytes).to_vec(),
        docids: docid_bytes(&q.map),
        run: progressive.run.to_trec("genret"),
        report: report_text(&m4.params, &q.map, &ds, &progressive),
    };

    let (_, m4_full) = tail(&q, &m2, Objective::FullLengthOnly);
    let full_length = eval_on_dev(&cfg, &ds, &m4_full.params, &q.map);
    let (_, m4_nr) = tail(&q, &m2, Objective::ProgressiveNoRetention);
    let no_retention = eval_on_dev(&cfg, &ds, &m4_nr.params, &q.map);

    let mut grid = Vec::new();
    for (l, v) in GRID {
        let mrr = if (l, v) == (shape.docid_len, shape.docid_vocab) {
            progressive.mrr10
        } else {
            let (q, _, m2) = head(l, v);
            let (_, m4) = tail(&q, &m2, Objective::Progressive);
            eval_on_dev(&cfg, &ds, &m4.params, &q.map).mrr10
        };
        grid.push((l, v, mrr));
    }
    println!(
        "  seed {seed}: progressive MRR@10 {:.4}, full-length-only {:.4}, no-retention {:.4}; grid {:?} [{:.0}s]",
        progressive.mrr10,
        full_length.mrr10,
        no_retention.mrr10,
        grid.iter().map(|&(l, v, m)| format!("{l}x{v}: {m:.4}")).collect::<Vec<_>>(),
        start.elapsed().as_secs_f64()
    );
    SeedResult {
        seed,
        chain_time,
        progressive,
        full_length,
        no_retention,
        grid,
        artifacts,
    }
}

fn end_to_end(r: &SeedResult) -> Verdict {
    let e = &r.progressive;
    let ratio = e.mrr10 / e.brute_mrr10;
    let secs = r.chain_time.as_secs_f64();
    check(
        e.mrr10 >= 0.85 && e.recall10 >= 0.90 && ratio >= 0.98 && secs < 1800.0,
        format!(
            "MRR@10 {:.4} (>= 0.85), Recall@10 {:.4} (>= 0.90), exhaustive MRR@10 {:.4}, beam/exhaustive {:.3} (>= 0.98), chain {secs:.0}s (< 1800s)",
            e.mrr10, e.recall10, e.brute_mrr10, ratio
        ),
    )
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn prefix_ablation(rs: &[SeedResult]) -> Verdict {
    let half = PipelineConfig::synthetic_default(0).shape.docid_len / 2;
    let surv = |e: &Evaluation| e.survival.rate_at(half).unwrap();
    let per_seed: Vec<String> = rs
        .iter()
        .map(|r| {
            format!(
                "seed {}: survival@{half} {:.3} -> {:.3}, MRR@10 {:.4} -> {:.4}",
                r.seed,
                surv(&r.progressive),
                surv(&r.full_length),
                r.progressive.mrr10,
                r.full_length.mrr10
            )
        })
        .collect();
    let d_surv = mean(
        rs.iter()
            .map(|r| surv(&r.full_length) - surv(&r.progressive)),
    );
    let d_mrr = mean(rs.iter().map(|r| r.full_length.mrr10 - r.progressive.mrr10));
    check(
        d_surv < 0.0 && d_mrr <= 0.0,
        format!(
            "full-length-only vs progressive, mean over seeds: survival@{half} delta {d_surv:+.4} (< 0), MRR@10 delta {d_mrr:+.4} (<= 0); {}",
            per_seed.join("; ")
        ),
    )
}

fn retention_ablation(rs: &[SeedResult]) -> Verdict {
    let deltas: Vec<f64> = rs
        .iter()
        .map(|r| r.no_retention.mrr10 - r.progressive.mrr10)
        .collect();
    let d = mean(deltas.iter().copied());
    check(
        d <= 0.0,
        format!(
            "MRR@10 delta without retention term per seed {:?}, mean {d:+.4} (<= 0)",
            deltas
                .iter()
                .map(|x| format!("{x:+.4}"))
                .collect::<Vec<_>>()
        ),
    )
}

fn docid_grid(rs: &[SeedResult]) -> Verdict {
    let ok: Vec<bool> = rs
        .iter()
        .map(|r| r.grid.windows(2).all(|w| w[1].2 >= w[0].2))
        .collect();
    let n = ok.iter().filter(|&&b| b).count();
    let table: Vec<String> = rs
        .iter()
        .zip(&ok)
        .map(|(r, ok)| {
            let cells: Vec<String> = r
                .grid
                .iter()
                .map(|&(l, v, m)| format!("{l}x{v}x64 {m:.4}"))
                .collect();
            format!(
                "seed {}: {} ({})",
                r.seed,
                cells.join(", "),
                if *ok { "ordered" } else { "not ordered" }
            )
        })
        .collect();
    check(
        n >= 2,
        format!(
            "{n}/3 seeds with MRR@10 non-decreasing in L; {}",
            table.join("; ")
        ),
    )
}

fn reproducibility(first: &SeedResult) -> Verdict {
    let cfg = PipelineConfig::synthetic_default(first.seed);
    let ds = Dataset::generate(&cfg).unwrap();
    let out = run_pipeline(&cfg, &ds, Objective::Progressive).unwrap();
    let eval = eval_on_dev(&cfg, &ds, &out.m4.params, &out.quantized.map);
    let again = Artifacts {
        checkpoints: [
            &out.m0,
            &out.quantized.checkpoint,
            &out.m1,
            &out.m2,
            &out.m3,
            &out.m4,
        ]
        .map(bytes)
        .to_vec(),
        docids: docid_bytes(&out.quantized.map),
        run: eval.run.to_trec("genret"),
        report: report_text(&out.m4.params, &out.quantized.map, &ds, &eval),
    };
    let a = &first.artifacts;
    let names = ["m0", "m0 quantized", "m1", "m2", "m3", "m4"];
    for ((x, y), name) in a.checkpoints.iter().zip(&again.checkpoints).zip(names) {
        if x != y {
            return Err(format!("{name} checkpoint differs"));
        }
    }
    check(
        a.docids == again.docids && a.run == again.run && a.report == again.report,
        format!(
            "second seed-{} run: 6 checkpoints, identifier map, run file and report bit-identical",
            first.seed
        ),
    )
}

fn main() {
    let mut suite = Suite { failed: 0 };
    suite.run(1, "beam search exactness", beam_exactness);
    suite.run(2, "gradient correctness", gradients);
    suite.run(3, "prefix weight schedule", alpha_schedule);
    suite.run(4, "residual quantization distortion", rq_distortion);
    suite.run(9, "metric oracles", metric_oracles);

    let start = Instant::now();
    let results: Vec<SeedResult> = SEEDS.iter().map(|&s| seed_experiments(s)).collect();
    println!(
        "  synthetic experiments over {} seeds: {:.0}s",
        SEEDS.len(),
        start.elapsed().as_secs_f64()
    );
    suite.run(5, "end-to-end synthetic retrieval", || {
        end_to_end(&results[0])
    });
    suite.run(6, "prefix optimization ablation", || {
        prefix_ablation(&results)
    });
    suite.run(7, "retention term ablation", || {
        retention_ablation(&results)
    });
    suite.run(8, "identifier shape grid", || docid_grid(&results));
    suite.run(10, "reproducibility", || reproducibility(&results[0]));

    if suite.failed > 0 {
        println!("{} criteria failed", suite.failed);
        std::process::exit(1);
    }
}
