use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use log::{debug, info, warn};
use rayon::prelude::*;
use serde_json::json;

use genret_core::checkpoint::{Checkpoint, StageTag};
use genret_core::corpus::{
    generate_synthetic_corpus, load_corpus, load_pseudo_queries, load_qrels, load_queries,
    load_teacher, write_corpus, write_pseudo_queries, write_qrels, write_queries, write_teacher,
    Corpus, OracleTeacher, PseudoQuerySet, Qrels, Query, SyntheticConfig,
};
use genret_core::decoder::{beam_search, brute_force_rank, build_trie};
use genret_core::eval::{
    mrr_at_k, ndcg_at_k, prefix_curve, read_run, recall_at_k, reports_json, run_from_traces,
    traced_retrieval, write_run, RunFile,
};
use genret_core::model::fit;
use genret_core::pipeline::{init_checkpoint, quantize, ModelShape};
use genret_core::rq::DocIdMap;
use genret_core::training::{
    finetune_initial, finetune_progressive, finetune_self_negatives, mine_negatives_beam,
    mine_negatives_dense, pretrain_seq2seq, train_dense_stage, CurriculumSchedule, StageConfig,
    StageOverrides, TrainData, DEFAULT_CHECKPOINTS,
};
use genret_core::Error as CoreError;

use crate::manifest::{Entry, RunManifest};
use crate::{
    Cli, Command, EvalArgs, QuantizeArgs, ReportArgs, RetrieveArgs, StageArg, SynthArgs, TrainArgs,
};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

pub const CORPUS: &str = "corpus.tsv";
pub const TRAIN_QUERIES: &str = "queries.train.tsv";
pub const DEV_QUERIES: &str = "queries.dev.tsv";
pub const TRAIN_QRELS: &str = "qrels.train.txt";
pub const DEV_QRELS: &str = "qrels.dev.txt";
pub const TEACHER: &str = "teacher.jsonl";
pub const PSEUDO: &str = "pseudo_queries.tsv";
pub const DOCIDS: &str = "docids.jsonl";
pub const QUANTIZED: &str = "m0q.ckpt";
pub const DISTORTION: &str = "distortion.json";

/// A bad invocation that clap cannot detect.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<CoreError>() {
        Some(CoreError::Numerical(_)) => EXIT_NUMERICAL,
        Some(CoreError::Config(_)) | Some(CoreError::StageOrder { .. }) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Train(a) => train(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
    }
}

fn stage_tag(s: StageArg) -> StageTag {
    match s {
        StageArg::M0 => StageTag::M0,
        StageArg::M1 => StageTag::M1,
        StageArg::M2 => StageTag::M2,
        StageArg::M3 => StageTag::M3,
        StageArg::M4 => StageTag::M4,
    }
}

fn ckpt_name(stage: StageTag) -> String {
    format!("{stage}.ckpt")
}

/// Path as stored in the manifest: relative to `dir` when inside it.
fn rel(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).display().to_string()
}

fn or_default(dir: &Path, given: &Option<PathBuf>, name: &str) -> PathBuf {
    given.clone().unwrap_or_else(|| dir.join(name))
}

fn require_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(CoreError::Missing(format!("run directory {}", dir.display())).into());
    }
    Ok(())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(CoreError::Missing(format!("checkpoint {}", path.display())).into());
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

struct Collection {
    corpus: Corpus,
    queries: Vec<Query>,
    qrels: Qrels,
    teacher: OracleTeacher,
}

impl Collection {
    fn load_train(dir: &Path) -> Result<Self> {
        let corpus = load_corpus(&dir.join(CORPUS))?;
        let queries = load_queries(&dir.join(TRAIN_QUERIES), &corpus)?;
        let qrels = load_qrels(&dir.join(TRAIN_QRELS), &corpus)?;
        let teacher = load_teacher(&dir.join(TEACHER))?;
        Ok(Collection {
            corpus,
            queries,
            qrels,
            teacher,
        })
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            corpus: &self.corpus,
            queries: &self.queries,
            qrels: &self.qrels,
            teacher: &self.teacher,
        }
    }

    const FILES: [&'static str; 4] = [CORPUS, TRAIN_QUERIES, TRAIN_QRELS, TEACHER];
}

fn synth(a: SynthArgs) -> Result<()> {
    let start = Instant::now();
    let dir = &a.out;
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !a.force {
        return Err(UsageError(format!(
            "output directory {} is not empty (pass --force to overwrite)",
            dir.display()
        ))
        .into());
    }
    fs::create_dir_all(dir)?;
    let mut cfg = SyntheticConfig {
        n_docs: a.docs,
        n_queries: a.queries,
        n_train_queries: a.train_queries,
        n_topics: a.topics,
        dim: a.latent_dim,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    if let Some(s) = a.teacher_scale {
        cfg.teacher_scale = s;
    }
    let data = generate_synthetic_corpus(&cfg)?;
    let pseudo_cfg = Default::default();
    let pseudo = PseudoQuerySet::generate(&data.corpus, a.pseudo_per_doc, a.seed, &pseudo_cfg)?;

    write_corpus(&dir.join(CORPUS), &data.corpus)?;
    write_queries(&dir.join(TRAIN_QUERIES), &data.train.queries)?;
    write_queries(&dir.join(DEV_QUERIES), &data.dev.queries)?;
    write_qrels(&dir.join(TRAIN_QRELS), &data.train.qrels)?;
    write_qrels(&dir.join(DEV_QRELS), &data.dev.qrels)?;
    write_teacher(&dir.join(TEACHER), &data.teacher)?;
    write_pseudo_queries(&dir.join(PSEUDO), &pseudo)?;
    info!(
        "synthesized {} documents, {} train / {} held-out queries, {} pseudo queries into {}",
        data.corpus.len(),
        data.train.queries.len(),
        data.dev.queries.len(),
        pseudo.len(),
        dir.display()
    );
    RunManifest::record(
        dir,
        "synth",
        Entry {
            config: json!({
                "docs": a.docs,
                "queries": a.queries,
                "train_queries": a.train_queries,
                "topics": a.topics,
                "latent_dim": a.latent_dim,
                "pseudo_per_doc": a.pseudo_per_doc,
                "teacher_scale": cfg.teacher_scale,
            }),
            seed: a.seed,
            inputs: vec![],
            outputs: [
                CORPUS,
                TRAIN_QUERIES,
                DEV_QUERIES,
                TRAIN_QRELS,
                DEV_QRELS,
                TEACHER,
                PSEUDO,
            ]
            .map(String::from)
            .to_vec(),
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    )
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let start = Instant::now();
    let dir = &a.dir;
    require_dir(dir)?;
    let input = or_default(dir, &a.checkpoint, &ckpt_name(StageTag::M0));
    let m0 = load_ckpt(&input)?;
    let corpus = load_corpus(&dir.join(CORPUS))?;
    let q = quantize(&m0, &corpus, a.levels, a.vocab, a.kmeans_iters, a.seed)?;
    q.map.write_jsonl(&dir.join(DOCIDS))?;
    q.checkpoint.save(&dir.join(QUANTIZED))?;
    fs::write(
        dir.join(DISTORTION),
        serde_json::to_string_pretty(&q.distortion)? + "\n",
    )?;
    info!(
        "assigned {} unique identifiers (L = {}, V = {}); distortion at full length {:.6}",
        q.map.len(),
        a.levels,
        a.vocab,
        q.distortion.mse.last().copied().unwrap_or(0.0)
    );
    RunManifest::record(
        dir,
        "quantize",
        Entry {
            config: json!({"levels": a.levels, "vocab": a.vocab, "kmeans_iters": a.kmeans_iters}),
            seed: a.seed,
            inputs: vec![rel(dir, &input), CORPUS.into()],
            outputs: vec![DOCIDS.into(), QUANTIZED.into(), DISTORTION.into()],
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    )
}

/// Defaults, then the config file, then flags.
fn stage_config(stage: StageTag, a: &TrainArgs) -> Result<StageConfig> {
    let mut cfg = StageConfig::defaults(stage);
    if let Some(path) = &a.config {
        let file = StageOverrides::load(path)?;
        if let Some(s) = file.stage {
            if s != stage {
                return Err(UsageError(format!(
                    "{} configures stage {s}, not {stage}",
                    path.display()
                ))
                .into());
            }
        }
        cfg.apply(&file);
    }
    cfg.apply(&StageOverrides {
        stage: None,
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        checkpoints: a.checkpoints.clone(),
        beta: a.beta,
        k_neg: a.k_neg,
    });
    cfg.validate()?;
    Ok(cfg)
}

/// The checkpoint a stage reads by default.
fn default_input(stage: StageTag) -> String {
    match stage {
        StageTag::M1 => QUANTIZED.into(),
        s => ckpt_name(s.predecessor().expect("training stages have predecessors")),
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let start = Instant::now();
    let stage = stage_tag(a.stage);
    let dir = a.dir.clone();
    require_dir(&dir)?;
    let cfg = stage_config(stage, &a)?;
    let objective = a.objective.into();
    let mut inputs: Vec<PathBuf> = Vec::new();

    let input = if stage == StageTag::M0 && a.input.is_none() {
        None
    } else {
        let path = or_default(&dir, &a.input, &default_input(stage));
        if !path.exists() {
            let expected = match stage {
                StageTag::M1 => {
                    "a quantized m0 checkpoint (run `genret quantize` first)".to_string()
                }
                s => format!("a {} checkpoint", s.predecessor().unwrap()),
            };
            return Err(UsageError(format!(
                "stage {stage} needs {expected}; {} does not exist",
                path.display()
            ))
            .into());
        }
        let c = load_ckpt(&path)?;
        c.require_input_for(stage)?;
        inputs.push(path);
        Some(c)
    };

    let out = match stage {
        StageTag::M0 => {
            let col = Collection::load_train(&dir)?;
            let init = match input {
                Some(c) => c,
                None => {
                    let shape = ModelShape {
                        d_model: a.shape.d_model,
                        n_layers: a.shape.layers,
                        n_heads: a.shape.heads,
                        ffn_dim: a.shape.ffn_dim,
                        max_seq_len: a.shape.max_seq_len,
                        docid_len: 1,
                        docid_vocab: 1,
                    };
                    init_checkpoint(&col.corpus, &shape, cfg.seed)?
                }
            };
            inputs.extend(Collection::FILES.iter().map(|f| dir.join(f)));
            train_dense_stage(&cfg, &col.data(), &init)?
        }
        StageTag::M1 => {
            let corpus = load_corpus(&dir.join(CORPUS))?;
            let pseudo = load_pseudo_queries(&dir.join(PSEUDO), &corpus)?;
            let map = DocIdMap::load_jsonl(&dir.join(DOCIDS))?;
            inputs.extend([CORPUS, PSEUDO, DOCIDS].iter().map(|f| dir.join(f)));
            pretrain_seq2seq(&cfg, &pseudo, &map, input.as_ref().unwrap())?
        }
        StageTag::M2 | StageTag::M3 => {
            let col = Collection::load_train(&dir)?;
            let map = DocIdMap::load_jsonl(&dir.join(DOCIDS))?;
            let m0_path = dir.join(ckpt_name(StageTag::M0));
            let m0 = load_ckpt(&m0_path)?;
            inputs.push(m0_path);
            inputs.extend(
                Collection::FILES
                    .iter()
                    .chain(&[DOCIDS])
                    .map(|f| dir.join(f)),
            );
            let data = col.data();
            let (dense, report) = mine_negatives_dense(
                &m0.params,
                data.corpus,
                data.queries,
                data.qrels,
                data.teacher,
                cfg.k_neg,
            )?;
            info!("dense negatives: {report:?}");
            let prev = input.as_ref().unwrap();
            if stage == StageTag::M2 {
                finetune_initial(&cfg, &data, &dense, &map, prev)?
            } else {
                let trie = build_trie(&map)?;
                let (beam, report) = mine_negatives_beam(
                    &prev.params,
                    &trie,
                    data.queries,
                    data.qrels,
                    data.teacher,
                    cfg.k_neg,
                )?;
                info!("beam negatives: {report:?}");
                finetune_progressive(&cfg, &data, &dense.union(&beam), &map, prev, objective)?
            }
        }
        StageTag::M4 => {
            let col = Collection::load_train(&dir)?;
            let map = DocIdMap::load_jsonl(&dir.join(DOCIDS))?;
            inputs.extend(
                Collection::FILES
                    .iter()
                    .chain(&[DOCIDS])
                    .map(|f| dir.join(f)),
            );
            let data = col.data();
            let prev = input.as_ref().unwrap();
            let trie = build_trie(&map)?;
            let (pool, report) = mine_negatives_beam(
                &prev.params,
                &trie,
                data.queries,
                data.qrels,
                data.teacher,
                cfg.k_neg,
            )?;
            info!("self negatives: {report:?}");
            finetune_self_negatives(&cfg, &data, &pool, &map, prev, objective)?
        }
        StageTag::Init => unreachable!("not a training stage"),
    };

    let ckpt = dir.join(ckpt_name(stage));
    let log = dir.join(format!("{stage}.log"));
    out.checkpoint.save(&ckpt)?;
    out.log.write(&log)?;
    if let Some(l) = out.log.epoch_losses().last() {
        info!("{stage}: final epoch loss {l:.6}");
    }
    let mut config = serde_json::to_value(&cfg)?;
    config["objective"] = json!(format!("{:?}", a.objective));
    if stage == StageTag::M0 {
        config["shape"] = json!({
            "d_model": a.shape.d_model,
            "layers": a.shape.layers,
            "heads": a.shape.heads,
            "ffn_dim": a.shape.ffn_dim,
            "max_seq_len": a.shape.max_seq_len,
        });
    }
    RunManifest::record(
        &dir,
        &stage.to_string(),
        Entry {
            config,
            seed: cfg.seed,
            inputs: inputs.iter().map(|p| rel(&dir, p)).collect(),
            outputs: vec![rel(&dir, &ckpt), rel(&dir, &log)],
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    )
}

/// Model, identifier map and queries for retrieval-style commands.
fn retrieval_inputs(
    dir: &Path,
    checkpoint: &Option<PathBuf>,
    queries: &Option<PathBuf>,
) -> Result<(PathBuf, Checkpoint, DocIdMap, PathBuf, Vec<Query>)> {
    require_dir(dir)?;
    let ckpt_path = or_default(dir, checkpoint, &ckpt_name(StageTag::M4));
    let ckpt = load_ckpt(&ckpt_path)?;
    if !ckpt.quantized {
        return Err(UsageError(format!(
            "{} has no identifier tables (quantize and train it first)",
            ckpt_path.display()
        ))
        .into());
    }
    let map = DocIdMap::load_jsonl(&dir.join(DOCIDS))?;
    let corpus = load_corpus(&dir.join(CORPUS))?;
    let q_path = or_default(dir, queries, DEV_QUERIES);
    let qs = load_queries(&q_path, &corpus)?;
    Ok((ckpt_path, ckpt, map, q_path, qs))
}

fn retrieve(a: RetrieveArgs) -> Result<()> {
    let start = Instant::now();
    let dir = &a.dir;
    let (ckpt_path, ckpt, map, q_path, queries) = retrieval_inputs(dir, &a.checkpoint, &a.queries)?;
    if a.k == 0 {
        return Err(UsageError("--k must be >= 1".into()).into());
    }
    let p = &ckpt.params;
    let max_len = p.config().max_seq_len;
    let trie = build_trie(&map)?;
    let timed = queries
        .par_iter()
        .map(|q| {
            let t = Instant::now();
            let text = fit(max_len, &q.text);
            let hits = if a.brute_force {
                let mut all = brute_force_rank(p, &text, &map)?;
                all.truncate(a.k);
                all
            } else {
                beam_search(p, &text, &trie, a.k)?
            };
            Ok((hits, t.elapsed()))
        })
        .collect::<Result<Vec<_>, CoreError>>()?;
    let mut run = RunFile::default();
    let mut total = 0.0;
    let mut slowest = 0.0f64;
    for (q, (hits, took)) in queries.iter().zip(timed) {
        let secs = took.as_secs_f64();
        debug!(
            "{}: {} results in {:.3} ms",
            q.query_id,
            hits.len(),
            secs * 1e3
        );
        total += secs;
        slowest = slowest.max(secs);
        run.insert_hits(q.query_id.clone(), &hits)?;
    }
    let n = queries.len().max(1) as f64;
    info!(
        "{} queries, mean {:.3} ms, max {:.3} ms per query ({})",
        queries.len(),
        total / n * 1e3,
        slowest * 1e3,
        if a.brute_force { "exhaustive" } else { "beam" }
    );
    let default_name = if a.brute_force {
        "run.brute.trec"
    } else {
        "run.trec"
    };
    let out = or_default(dir, &a.out, default_name);
    write_run(&out, &run, &a.tag)?;
    read_run(&out).context("validating the written run")?;
    RunManifest::record(
        dir,
        "retrieve",
        Entry {
            config: json!({"k": a.k, "brute_force": a.brute_force, "tag": a.tag}),
            seed: ckpt.seed,
            inputs: vec![rel(dir, &ckpt_path), DOCIDS.into(), rel(dir, &q_path)],
            outputs: vec![rel(dir, &out)],
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    )
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = read_run(&a.run)?;
    let qrels = load_qrels_lenient(&a.qrels)?;
    let reports = [
        mrr_at_k(&run, &qrels, a.k)?,
        recall_at_k(&run, &qrels, a.k)?,
        ndcg_at_k(&run, &qrels, a.k)?,
    ];
    let r = &reports[0];
    if r.excluded > 0 || r.missing > 0 {
        warn!(
            "run/qrels mismatch: {} run queries have no judgments (excluded), {} judged queries are absent from the run (scored 0)",
            r.excluded, r.missing
        );
    }
    let text = serde_json::to_string_pretty(&reports_json(&reports))? + "\n";
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

/// Qrels without a corpus to check document ids against.
fn load_qrels_lenient(path: &Path) -> Result<Qrels> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| CoreError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.into(),
        };
        if f.len() != 4 {
            return Err(bad("expected `query_id 0 doc_id relevance`").into());
        }
        let rel: u32 = f[3]
            .parse()
            .map_err(|_| bad("relevance must be a non-negative integer"))?;
        if rel > 0 {
            qrels.insert(f[0], f[2], rel);
        }
    }
    Ok(qrels)
}

fn report(a: ReportArgs) -> Result<()> {
    let start = Instant::now();
    let dir = &a.dir;
    let (ckpt_path, ckpt, map, q_path, queries) = retrieval_inputs(dir, &a.checkpoint, &a.queries)?;
    let corpus = load_corpus(&dir.join(CORPUS))?;
    let qrels_path = or_default(dir, &a.qrels, DEV_QRELS);
    let qrels = load_qrels(&qrels_path, &corpus)?;
    let len = map.docid_len();
    let checkpoints = match &a.checkpoints {
        Some(c) => c.clone(),
        None => CurriculumSchedule::clipped(&DEFAULT_CHECKPOINTS, len)?
            .checkpoints()
            .to_vec(),
    };
    let trie = build_trie(&map)?;
    let traces = traced_retrieval(&ckpt.params, &trie, &queries, a.beam)?;
    let curve = prefix_curve(&traces, &trie, &map, &qrels, a.beam, &checkpoints)?;
    let mut csv = String::from("prefix_len,mrr@10,recall@10,survival\n");
    for pt in &curve {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            pt.prefix_len, pt.mrr10, pt.recall10, pt.survival
        ));
    }
    let out = or_default(dir, &a.out, "report.csv");
    fs::write(&out, &csv)?;
    let full = run_from_traces(&traces)?;
    info!(
        "full-length MRR@10 {:.4} over {} queries; wrote {}",
        mrr_at_k(&full, &qrels, 10)?.mean,
        queries.len(),
        out.display()
    );
    RunManifest::record(
        dir,
        "report",
        Entry {
            config: json!({"beam": a.beam, "checkpoints": checkpoints}),
            seed: ckpt.seed,
            inputs: vec![
                rel(dir, &ckpt_path),
                DOCIDS.into(),
                rel(dir, &q_path),
                rel(dir, &qrels_path),
            ],
            outputs: vec![rel(dir, &out)],
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    )
}
