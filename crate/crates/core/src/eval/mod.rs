//! Retrieval metrics, prefix-survival diagnostics and TREC run files.

mod metrics;
mod run;
mod survival;

pub use metrics::{mrr_at_k, ndcg_at_k, recall_at_k, reports_json, MetricReport};
pub use run::{read_run, write_run, RunEntry, RunFile};
pub use survival::{
    prefix_curve, prefix_survival, run_from_traces, survival_from_traces, traced_retrieval,
    PrefixPoint, QueryTrace, SurvivalReport,
};
