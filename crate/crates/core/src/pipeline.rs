//! End-to-end orchestration: synthetic data, the five training stages,
//! quantization in between, and evaluation of the result.
//!
//! Each step is a separate function so that runs sharing a prefix of the
//! stage chain (ablations, identifier-shape grids) can reuse it.

use log::info;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, StageTag};
use crate::corpus::{
    generate_synthetic_corpus, Corpus, PseudoQueryConfig, PseudoQuerySet, Qrels, Query,
    SyntheticConfig, SyntheticData,
};
use crate::decoder::{brute_force_rank, build_trie, PrefixTrie};
use crate::error::{Error, Result};
use crate::eval::{
    mrr_at_k, recall_at_k, run_from_traces, survival_from_traces, traced_retrieval, RunFile,
    SurvivalReport,
};
use crate::model::{fit, ModelConfig, Params};
use crate::rq::{
    assign_docids, distortion, train_codebooks, Codebooks, DistortionReport, DocIdMap,
};
use crate::training::{
    embed_corpus, finetune_initial, finetune_progressive, finetune_self_negatives,
    mine_negatives_beam, mine_negatives_dense, pretrain_seq2seq, train_dense_stage, NegativePool,
    Objective, StageConfig, TrainData,
};

/// Pseudo queries generated per document for sequence-to-sequence pretraining.
pub const DEFAULT_PSEUDO_PER_DOC: usize = 10;

/// Model shape apart from the vocabulary, which comes from the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub docid_len: usize,
    pub docid_vocab: usize,
}

impl ModelShape {
    pub fn config(&self, token_vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            docid_len: self.docid_len,
            docid_vocab: self.docid_vocab,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            token_vocab,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub synth: SyntheticConfig,
    pub shape: ModelShape,
    pub seed: u64,
    pub kmeans_iters: usize,
    pub pseudo: PseudoQueryConfig,
    pub pseudo_per_doc: usize,
    /// Stage configs for M0..M4, in order.
    pub stages: [StageConfig; 5],
    /// Beam width used to produce the evaluated run.
    pub eval_beam: usize,
    /// Beam width of the prefix-survival diagnostic.
    pub survival_beam: usize,
}

impl PipelineConfig {
    /// The 1,000-document synthetic setup with L = 8, V = 32, D = 64.
    pub fn synthetic_default(seed: u64) -> Self {
        let stages = [
            StageTag::M0,
            StageTag::M1,
            StageTag::M2,
            StageTag::M3,
            StageTag::M4,
        ]
        .map(|s| {
            let mut c = StageConfig::defaults(s);
            c.seed = seed;
            c
        });
        PipelineConfig {
            synth: SyntheticConfig {
                seed,
                ..SyntheticConfig::default()
            },
            shape: ModelShape {
                d_model: 64,
                n_layers: 1,
                n_heads: 2,
                ffn_dim: 128,
                max_seq_len: 48,
                docid_len: 8,
                docid_vocab: 32,
            },
            seed,
            kmeans_iters: crate::rq::DEFAULT_KMEANS_ITERS,
            pseudo: PseudoQueryConfig::default(),
            pseudo_per_doc: DEFAULT_PSEUDO_PER_DOC,
            stages,
            eval_beam: 100,
            survival_beam: 10,
        }
    }

    pub fn stage(&self, s: StageTag) -> &StageConfig {
        &self.stages[stage_index(s)]
    }

    pub fn stage_mut(&mut self, s: StageTag) -> &mut StageConfig {
        &mut self.stages[stage_index(s)]
    }
}

fn stage_index(s: StageTag) -> usize {
    match s {
        StageTag::Init | StageTag::M0 => 0,
        StageTag::M1 => 1,
        StageTag::M2 => 2,
        StageTag::M3 => 3,
        StageTag::M4 => 4,
    }
}

/// Generated data shared by every run on the same collection.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub data: SyntheticData,
    pub pseudo: PseudoQuerySet,
}

impl Dataset {
    pub fn generate(cfg: &PipelineConfig) -> Result<Self> {
        let data = generate_synthetic_corpus(&cfg.synth)?;
        let pseudo =
            PseudoQuerySet::generate(&data.corpus, cfg.pseudo_per_doc, cfg.seed, &cfg.pseudo)?;
        Ok(Dataset { data, pseudo })
    }

    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            corpus: &self.data.corpus,
            queries: &self.data.train.queries,
            qrels: &self.data.train.qrels,
            teacher: &self.data.teacher,
        }
    }
}

/// Fresh parameters for the dense stage. Identifier tables are sized 1 x 1
/// here; [`quantize`] gives them their real shape.
pub fn init_checkpoint(corpus: &Corpus, shape: &ModelShape, seed: u64) -> Result<Checkpoint> {
    let cfg = ModelShape {
        docid_len: 1,
        docid_vocab: 1,
        ..shape.clone()
    }
    .config(corpus.vocab().len());
    Ok(Checkpoint::new(
        StageTag::Init,
        seed,
        Params::init(&cfg, seed)?,
    ))
}

pub fn run_m0(cfg: &StageConfig, data: &TrainData, init: &Checkpoint) -> Result<Checkpoint> {
    Ok(train_dense_stage(cfg, data, init)?.checkpoint)
}

#[derive(Debug, Clone)]
pub struct Quantized {
    /// The input checkpoint with identifier tables set to the codebooks.
    pub checkpoint: Checkpoint,
    pub map: DocIdMap,
    pub codebooks: Codebooks,
    pub distortion: DistortionReport,
}

/// Quantizes the dense representation of every document into identifiers of
/// `levels` codes from `vocab` and seeds the identifier embeddings with the
/// codebooks. The returned checkpoint is the input resized to that shape.
pub fn quantize(
    input: &Checkpoint,
    corpus: &Corpus,
    levels: usize,
    vocab: usize,
    kmeans_iters: usize,
    seed: u64,
) -> Result<Quantized> {
    if input.stage != StageTag::M0 {
        return Err(Error::StageOrder {
            expected: StageTag::M0.to_string(),
            found: input.stage.to_string(),
        });
    }
    let emb = embed_corpus(&input.params, corpus)?;
    let codebooks = train_codebooks(&emb, levels, vocab, kmeans_iters, seed)?;
    let ids = assign_docids(&emb, &codebooks)?;
    let report = distortion(&emb, &ids, &codebooks)?;
    let map = DocIdMap::new(
        corpus
            .docs()
            .iter()
            .map(|d| d.doc_id.clone())
            .zip(ids)
            .collect(),
    )?;
    let mut params = input.params.reshaped(levels, vocab, seed)?;
    params.set_docid_tables(&codebooks.tables)?;
    let mut checkpoint = Checkpoint::new(StageTag::M0, input.seed, params);
    checkpoint.quantized = true;
    info!("quantized: distortion by prefix length {:?}", report.mse);
    Ok(Quantized {
        checkpoint,
        map,
        codebooks,
        distortion: report,
    })
}

pub fn run_m1(cfg: &StageConfig, pseudo: &PseudoQuerySet, q: &Quantized) -> Result<Checkpoint> {
    Ok(pretrain_seq2seq(cfg, pseudo, &q.map, &q.checkpoint)?.checkpoint)
}

/// Negatives retrieved by the dense encoder of `m0`.
pub fn dense_pool(m0: &Checkpoint, t: &TrainData, k: usize) -> Result<NegativePool> {
    Ok(mine_negatives_dense(&m0.params, t.corpus, t.queries, t.qrels, t.teacher, k)?.0)
}

/// Negatives retrieved by constrained beam search with `model`.
pub fn beam_pool(
    model: &Checkpoint,
    trie: &PrefixTrie,
    t: &TrainData,
    k: usize,
) -> Result<NegativePool> {
    Ok(mine_negatives_beam(&model.params, trie, t.queries, t.qrels, t.teacher, k)?.0)
}

pub fn run_m2(
    cfg: &StageConfig,
    data: &TrainData,
    dense: &NegativePool,
    map: &DocIdMap,
    m1: &Checkpoint,
) -> Result<Checkpoint> {
    Ok(finetune_initial(cfg, data, dense, map, m1)?.checkpoint)
}

/// M3 on the union of the dense pool and negatives mined by `m2`.
pub fn run_m3(
    cfg: &StageConfig,
    data: &TrainData,
    dense: &NegativePool,
    map: &DocIdMap,
    trie: &PrefixTrie,
    m2: &Checkpoint,
    objective: Objective,
) -> Result<Checkpoint> {
    let pool = dense.union(&beam_pool(m2, trie, data, cfg.k_neg)?);
    Ok(finetune_progressive(cfg, data, &pool, map, m2, objective)?.checkpoint)
}

/// M4 on negatives mined by `m3` itself.
pub fn run_m4(
    cfg: &StageConfig,
    data: &TrainData,
    map: &DocIdMap,
    trie: &PrefixTrie,
    m3: &Checkpoint,
    objective: Objective,
) -> Result<Checkpoint> {
    let pool = beam_pool(m3, trie, data, cfg.k_neg)?;
    Ok(finetune_self_negatives(cfg, data, &pool, map, m3, objective)?.checkpoint)
}

/// Retrieval quality of one model on one query split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub run: RunFile,
    pub mrr10: f64,
    pub recall10: f64,
    /// MRR@10 of exhaustive scoring with the same model.
    pub brute_mrr10: f64,
    pub survival: SurvivalReport,
}

/// Beam run of width `beam`, exhaustive reference ranking, and prefix survival
/// of width `survival_beam` at every length 1..=L.
pub fn evaluate(
    params: &Params,
    map: &DocIdMap,
    queries: &[Query],
    qrels: &Qrels,
    beam: usize,
    survival_beam: usize,
) -> Result<Evaluation> {
    let trie = build_trie(map)?;
    let traces = traced_retrieval(params, &trie, queries, beam)?;
    let run = run_from_traces(&traces)?;
    let all: Vec<usize> = (1..=map.docid_len()).collect();
    let survival = if survival_beam == beam {
        survival_from_traces(&traces, map, qrels, beam, &all)?
    } else {
        let narrow = traced_retrieval(params, &trie, queries, survival_beam)?;
        survival_from_traces(&narrow, map, qrels, survival_beam, &all)?
    };
    let ranked = queries
        .par_iter()
        .map(|q| brute_force_rank(params, &fit(params.config().max_seq_len, &q.text), map))
        .collect::<Result<Vec<_>>>()?;
    let mut brute = RunFile::default();
    for (q, hits) in queries.iter().zip(ranked) {
        brute.insert_hits(q.query_id.clone(), &hits[..hits.len().min(10)])?;
    }
    Ok(Evaluation {
        mrr10: mrr_at_k(&run, qrels, 10)?.mean,
        recall10: recall_at_k(&run, qrels, 10)?.mean,
        brute_mrr10: mrr_at_k(&brute, qrels, 10)?.mean,
        run,
        survival,
    })
}

/// Every checkpoint of one full chain.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub m0: Checkpoint,
    pub quantized: Quantized,
    pub m1: Checkpoint,
    pub m2: Checkpoint,
    pub m3: Checkpoint,
    pub m4: Checkpoint,
}

/// M0 through M4 for one objective.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    ds: &Dataset,
    objective: Objective,
) -> Result<PipelineOutput> {
    let data = ds.train_data();
    let init = init_checkpoint(data.corpus, &cfg.shape, cfg.seed)?;
    let m0 = run_m0(cfg.stage(StageTag::M0), &data, &init)?;
    let shape = &cfg.shape;
    let quantized = quantize(
        &m0,
        data.corpus,
        shape.docid_len,
        shape.docid_vocab,
        cfg.kmeans_iters,
        cfg.seed,
    )?;
    let m1 = run_m1(cfg.stage(StageTag::M1), &ds.pseudo, &quantized)?;
    let dense = dense_pool(&m0, &data, cfg.stage(StageTag::M2).k_neg)?;
    let trie = build_trie(&quantized.map)?;
    let map = &quantized.map;
    let m2 = run_m2(cfg.stage(StageTag::M2), &data, &dense, map, &m1)?;
    let m3 = run_m3(
        cfg.stage(StageTag::M3),
        &data,
        &dense,
        map,
        &trie,
        &m2,
        objective,
    )?;
    let m4 = run_m4(cfg.stage(StageTag::M4), &data, map, &trie, &m3, objective)?;
    Ok(PipelineOutput {
        m0,
        quantized,
        m1,
        m2,
        m3,
        m4,
    })
}
