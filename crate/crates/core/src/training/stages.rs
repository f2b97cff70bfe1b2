//! The five training stages and the shared optimization loop.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;

use super::config::StageConfig;
use super::loss::{dense_margin_loss, rank_loss, rank_terms, seq2seq_ce_loss, RankTerms};
use super::mining::{mine_negatives_bm25, mine_negatives_dense, NegativePool, TrainingTriple};
use super::optim::Adam;
use super::schedule::{AlphaSchedule, CurriculumSchedule, LrSchedule};
use crate::checkpoint::{Checkpoint, StageTag};
use crate::corpus::{Corpus, OracleTeacher, PseudoQuerySet, Qrels, Query};
use crate::error::{Error, Result};
use crate::model::fit;
use crate::model::{decode_states, encode, step_logits, Grads, Params};
use crate::rq::DocIdMap;
use crate::util::{atomic_write, rng_for};

/// Training queries with their judgments and the teacher that supplies margins.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub corpus: &'a Corpus,
    pub queries: &'a [Query],
    pub qrels: &'a Qrels,
    pub teacher: &'a OracleTeacher,
}

/// How the prefix-aware stages weigh prefix lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Curriculum over the checkpoints, keeping earlier checkpoints' terms.
    Progressive,
    /// Curriculum over the checkpoints, current checkpoint only.
    ProgressiveNoRetention,
    /// Full-length loss only: the last curriculum phase alone.
    FullLengthOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogLine {
    Step {
        step: usize,
        loss: f64,
        lr: f64,
    },
    Epoch {
        phase: String,
        epoch: usize,
        mean_loss: f64,
    },
}

/// Loss trajectory of one stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub lines: Vec<LogLine>,
}

impl TrainLog {
    /// Mean loss of every finished epoch, in order.
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                LogLine::Epoch { mean_loss, .. } => Some(*mean_loss),
                _ => None,
            })
            .collect()
    }

    /// One `step loss lr` line per optimizer step and an `# epoch` summary
    /// after every epoch.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            match l {
                LogLine::Step { step, loss, lr } => writeln!(s, "{step} {loss} {lr}"),
                LogLine::Epoch {
                    phase,
                    epoch,
                    mean_loss,
                } => writeln!(s, "# epoch {phase} {epoch} mean_loss {mean_loss}"),
            }
            .unwrap();
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_text().as_bytes())
    }
}

/// A finished stage: the new checkpoint and its loss log.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

struct Trainer<'a> {
    params: Params,
    adam: Adam,
    grads: Grads,
    cfg: &'a StageConfig,
    log: TrainLog,
    step: usize,
}

impl<'a> Trainer<'a> {
    fn new(params: Params, cfg: &'a StageConfig) -> Self {
        let adam = Adam::new(params.len());
        let grads = params.zeros_like();
        Trainer {
            params,
            adam,
            grads,
            cfg,
            log: TrainLog::default(),
            step: 0,
        }
    }

    /// Runs `epochs` epochs. `examples(e)` yields the ordered examples of
    /// epoch `e`; their count must not change between epochs.
    fn run<E>(
        &mut self,
        phase: &str,
        epochs: usize,
        mut examples: impl FnMut(usize) -> Result<Vec<E>>,
        loss: impl Fn(&Params, &E, &mut Grads) -> Result<f64>,
    ) -> Result<()> {
        let bs = self.cfg.batch_size;
        let mut epoch_data = examples(0)?;
        let per_epoch = epoch_data.len().div_ceil(bs);
        let sched = LrSchedule::new(self.cfg.lr, (per_epoch * epochs).max(1));
        let mut local = 0;
        for e in 0..epochs {
            if e > 0 {
                epoch_data = examples(e)?;
            }
            let mut total = 0.0;
            for batch in epoch_data.chunks(bs) {
                self.grads.clear();
                let mut sum = 0.0;
                for ex in batch {
                    sum += loss(&self.params, ex, &mut self.grads)?;
                }
                let mean = sum / batch.len() as f64;
                if !mean.is_finite() {
                    return Err(Error::Numerical(format!(
                        "stage {} phase {phase} diverged at step {} (loss {mean})",
                        self.cfg.stage, self.step
                    )));
                }
                self.grads.scale(1.0 / batch.len() as f64);
                let lr = sched.at(local);
                self.adam.step(&mut self.params, &self.grads, lr);
                if !self.params.all_finite() {
                    return Err(Error::Numerical(format!(
                        "stage {} phase {phase}: non-finite parameters after step {}",
                        self.cfg.stage, self.step
                    )));
                }
                self.log.lines.push(LogLine::Step {
                    step: self.step,
                    loss: mean,
                    lr,
                });
                total += sum;
                self.step += 1;
                local += 1;
            }
            let mean_loss = total / epoch_data.len().max(1) as f64;
            info!(
                "stage {} {phase} epoch {e}: mean loss {mean_loss:.6}",
                self.cfg.stage
            );
            self.log.lines.push(LogLine::Epoch {
                phase: phase.to_string(),
                epoch: e,
                mean_loss,
            });
        }
        Ok(())
    }

    fn finish(self, stage: StageTag, quantized: bool) -> StageOutput {
        let mut checkpoint = Checkpoint::new(stage, self.cfg.seed, self.params);
        checkpoint.quantized = quantized;
        StageOutput {
            checkpoint,
            log: self.log,
        }
    }
}

fn check_stage(cfg: &StageConfig, stage: StageTag, input: &Checkpoint) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(Error::Config(format!(
            "config is for stage {}, not {stage}",
            cfg.stage
        )));
    }
    input.require_input_for(stage)
}

fn query_index(queries: &[Query]) -> HashMap<&str, &[u32]> {
    queries
        .iter()
        .map(|q| (q.query_id.as_str(), q.text.as_slice()))
        .collect()
}

struct DenseExample {
    query: Vec<u32>,
    pos: Vec<u32>,
    neg: Vec<u32>,
    margin: f64,
}

fn dense_examples(
    max_len: usize,
    data: &TrainData,
    triples: Vec<TrainingTriple>,
) -> Result<Vec<DenseExample>> {
    let queries = query_index(data.queries);
    let doc = |id: &str| {
        data.corpus
            .get(id)
            .map(|d| fit(max_len, &d.text))
            .ok_or_else(|| Error::Missing(format!("document {id} is not in the corpus")))
    };
    triples
        .into_iter()
        .map(|t| {
            Ok(DenseExample {
                query: fit(
                    max_len,
                    queries
                        .get(t.query_id.as_str())
                        .ok_or_else(|| Error::Missing(format!("query {}", t.query_id)))?,
                ),
                pos: doc(&t.pos)?,
                neg: doc(&t.neg)?,
                margin: t.margin,
            })
        })
        .collect()
}

/// Dense-encoder stage: margin regression on lexical negatives, then on
/// negatives retrieved by the partially trained encoder. The epoch budget is
/// split between the two halves.
pub fn train_dense_stage(
    cfg: &StageConfig,
    data: &TrainData,
    input: &Checkpoint,
) -> Result<StageOutput> {
    check_stage(cfg, StageTag::M0, input)?;
    let mut tr = Trainer::new(input.params.clone(), cfg);
    let first = cfg.epochs.div_ceil(2);
    let second = cfg.epochs - first;

    let (bm25, _) = mine_negatives_bm25(
        data.corpus,
        data.queries,
        data.qrels,
        data.teacher,
        cfg.k_neg,
    )?;
    let loss = |p: &Params, ex: &DenseExample, g: &mut Grads| {
        dense_margin_loss(p, &ex.query, &ex.pos, &ex.neg, ex.margin, Some(g))
    };
    let max_len = input.params.config().max_seq_len;
    tr.run(
        "bm25",
        first,
        |e| dense_examples(max_len, data, bm25.sample_epoch(cfg.seed, "m0/bm25", e)),
        loss,
    )?;
    if second > 0 {
        let (dense, _) = mine_negatives_dense(
            &tr.params,
            data.corpus,
            data.queries,
            data.qrels,
            data.teacher,
            cfg.k_neg,
        )?;
        tr.run(
            "dense",
            second,
            |e| dense_examples(max_len, data, dense.sample_epoch(cfg.seed, "m0/dense", e)),
            loss,
        )?;
    }
    Ok(tr.finish(StageTag::M0, false))
}

/// Sequence-to-sequence pretraining: predict each document's identifier from
/// its pseudo queries.
pub fn pretrain_seq2seq(
    cfg: &StageConfig,
    pseudo: &PseudoQuerySet,
    map: &DocIdMap,
    input: &Checkpoint,
) -> Result<StageOutput> {
    check_stage(cfg, StageTag::M1, input)?;
    let p0 = &input.params;
    let examples: Vec<(Vec<u32>, Vec<u32>)> = pseudo
        .iter()
        .map(|(doc, q)| {
            let id = map
                .get(doc)
                .ok_or_else(|| Error::Missing(format!("no identifier for document {doc}")))?;
            Ok((fit(p0.config().max_seq_len, &q.text), id.0.clone()))
        })
        .collect::<Result<_>>()?;
    if examples.is_empty() {
        return Err(Error::Input("no pseudo queries to train on".into()));
    }
    let mut tr = Trainer::new(p0.clone(), cfg);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    tr.run(
        "seq2seq",
        cfg.epochs,
        |e| {
            order.shuffle(&mut rng_for(cfg.seed, &format!("m1/epoch{e}")));
            Ok(order.clone())
        },
        |p, &i, g| seq2seq_ce_loss(p, &examples[i].0, &examples[i].1, Some(g)),
    )?;
    Ok(tr.finish(StageTag::M1, true))
}

struct RankExample {
    query: Vec<u32>,
    pos: Vec<u32>,
    neg: Vec<u32>,
    margin: f64,
}

fn rank_examples(
    max_len: usize,
    data: &TrainData,
    map: &DocIdMap,
    triples: Vec<TrainingTriple>,
) -> Result<Vec<RankExample>> {
    let queries = query_index(data.queries);
    let code = |id: &str| {
        map.get(id)
            .map(|c| c.0.clone())
            .ok_or_else(|| Error::Missing(format!("no identifier for document {id}")))
    };
    triples
        .into_iter()
        .map(|t| {
            Ok(RankExample {
                query: fit(
                    max_len,
                    queries
                        .get(t.query_id.as_str())
                        .ok_or_else(|| Error::Missing(format!("query {}", t.query_id)))?,
                ),
                pos: code(&t.pos)?,
                neg: code(&t.neg)?,
                margin: t.margin,
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_rank_phase(
    tr: &mut Trainer,
    data: &TrainData,
    map: &DocIdMap,
    pool: &NegativePool,
    label: &str,
    epochs: usize,
    terms: &RankTerms,
    epoch_offset: usize,
) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::Input(format!("{label}: no training triples")));
    }
    let max_len = tr.params.config().max_seq_len;
    let seed = tr.cfg.seed;
    let stage = tr.cfg.stage.to_string();
    tr.run(
        label,
        epochs,
        |e| {
            rank_examples(
                max_len,
                data,
                map,
                pool.sample_epoch(seed, &stage, epoch_offset + e),
            )
        },
        |p, ex, g| rank_loss(p, &ex.query, &ex.pos, &ex.neg, ex.margin, terms, Some(g)),
    )
}

fn schedules(cfg: &StageConfig, len: usize) -> Result<(CurriculumSchedule, AlphaSchedule)> {
    Ok((
        CurriculumSchedule::clipped(&cfg.checkpoints, len)?,
        AlphaSchedule::new(cfg.beta, len)?,
    ))
}

/// Full-length rank fine-tuning on negatives retrieved by the dense encoder.
pub fn finetune_initial(
    cfg: &StageConfig,
    data: &TrainData,
    dense_pool: &NegativePool,
    map: &DocIdMap,
    input: &Checkpoint,
) -> Result<StageOutput> {
    check_stage(cfg, StageTag::M2, input)?;
    let len = input.params.config().docid_len;
    let mut tr = Trainer::new(input.params.clone(), cfg);
    run_rank_phase(
        &mut tr,
        data,
        map,
        dense_pool,
        "full",
        cfg.epochs,
        &vec![(len, 1.0)],
        0,
    )?;
    Ok(tr.finish(StageTag::M2, true))
}

/// Prefix-curriculum fine-tuning: one phase of `cfg.epochs` epochs per
/// checkpoint, shortest first.
pub fn finetune_progressive(
    cfg: &StageConfig,
    data: &TrainData,
    pool: &NegativePool,
    map: &DocIdMap,
    input: &Checkpoint,
    objective: Objective,
) -> Result<StageOutput> {
    check_stage(cfg, StageTag::M3, input)?;
    let len = input.params.config().docid_len;
    let (curriculum, alphas) = schedules(cfg, len)?;
    let mut tr = Trainer::new(input.params.clone(), cfg);
    if objective == Objective::FullLengthOnly {
        run_rank_phase(
            &mut tr,
            data,
            map,
            pool,
            "full",
            cfg.epochs,
            &vec![(len, 1.0)],
            0,
        )?;
    } else {
        let cps = curriculum.checkpoints();
        for (j, &i) in cps.iter().enumerate() {
            let terms = rank_terms(i, &curriculum, &alphas, objective == Objective::Progressive)?;
            let offset = j * cfg.epochs;
            run_rank_phase(
                &mut tr,
                data,
                map,
                pool,
                &format!("prefix{i}"),
                cfg.epochs,
                &terms,
                offset,
            )?;
        }
    }
    Ok(tr.finish(StageTag::M3, true))
}

/// Fine-tuning on negatives retrieved by the progressive model itself, at
/// full length (with retention terms under the progressive objective).
pub fn finetune_self_negatives(
    cfg: &StageConfig,
    data: &TrainData,
    self_pool: &NegativePool,
    map: &DocIdMap,
    input: &Checkpoint,
    objective: Objective,
) -> Result<StageOutput> {
    check_stage(cfg, StageTag::M4, input)?;
    let len = input.params.config().docid_len;
    let (curriculum, alphas) = schedules(cfg, len)?;
    let terms = rank_terms(
        len,
        &curriculum,
        &alphas,
        objective == Objective::Progressive,
    )?;
    let mut tr = Trainer::new(input.params.clone(), cfg);
    run_rank_phase(&mut tr, data, map, self_pool, "self", cfg.epochs, &terms, 0)?;
    Ok(tr.finish(StageTag::M4, true))
}

/// Teacher-forced top-1 accuracy at every identifier position.
pub fn teacher_forced_accuracy(p: &Params, examples: &[(Vec<u32>, Vec<u32>)]) -> Result<Vec<f64>> {
    let l = p.config().docid_len;
    let mut hits = vec![0usize; l];
    for (q, target) in examples {
        let enc = encode(p, &fit(p.config().max_seq_len, q))?;
        let h = decode_states(p, &enc, target)?;
        for t in 0..l {
            let logits = step_logits(p, t, h.row(t).as_slice().unwrap());
            let best = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap();
            hits[t] += usize::from(best == target[t] as usize);
        }
    }
    let n = examples.len().max(1) as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_text_format() {
        let log = TrainLog {
            lines: vec![
                LogLine::Step {
                    step: 0,
                    loss: 1.5,
                    lr: 0.001,
                },
                LogLine::Epoch {
                    phase: "full".into(),
                    epoch: 0,
                    mean_loss: 1.5,
                },
            ],
        };
        assert_eq!(log.to_text(), "0 1.5 0.001\n# epoch full 0 mean_loss 1.5\n");
    }
}
