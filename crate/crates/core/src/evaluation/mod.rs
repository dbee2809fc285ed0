//! Identity, control and transfer experiments graded by a pixel-statistics probe.

mod pipeline;
mod probe;
mod stats;

pub use pipeline::{
    eval_control, eval_identity, eval_transfer, generate, held_out_characters, mean_paired_distance, ConditionReport,
    EvalReport, EvalRun, EvalSettings, Pooled, TransferReport, TransferRun, CHANCE, MIN_SAMPLES,
};
pub use probe::{hue_bin, IdentityProbe, ProbeResult};
pub use stats::{binomial_pvalue, mean_pairwise_diversity};
