//! Streaming metrics over teacher-forced replays of annotated samples, and
//! the scheme comparison table.

mod ablation;
mod metrics;

pub use ablation::{run_ablation, train_tokens, AblationEntry, AblationRow, AblationTable, Check};
pub use metrics::{
    evaluate, evaluate_sample, evaluate_sample_thetas, evaluate_thetas, fluency, lg_match, lm_ppl, theta_range, time_diff,
    MetricsReport, SampleEval, Throughput, TurnScore,
};

#[cfg(test)]
mod tests;
