//! Objectives, negative mining and the staged optimization pipeline.

mod config;
mod loss;
mod mining;
mod optim;
mod schedule;
mod stages;

pub use config::{StageConfig, StageOverrides};
pub use loss::{
    dense_margin_loss, margin_mse_grad, margin_mse_loss, multi_objective_loss, prefix_rank_loss,
    rank_loss, rank_terms, seq2seq_ce_loss, RankTerms,
};
pub use mining::{
    dense_top_k, embed_corpus, mine_negatives_beam, mine_negatives_bm25, mine_negatives_dense,
    read_triples, write_triples, MiningReport, NegativePool, TrainingTriple,
};
pub use optim::Adam;
pub use schedule::{
    alpha, AlphaSchedule, CurriculumSchedule, LrSchedule, DEFAULT_BETA, DEFAULT_CHECKPOINTS,
    WARMUP_FRACTION,
};
pub use stages::{
    finetune_initial, finetune_progressive, finetune_self_negatives, pretrain_seq2seq,
    teacher_forced_accuracy, train_dense_stage, LogLine, Objective, StageOutput, TrainData,
    TrainLog,
};
