//! Synthetic tasks, per-iteration evaluation and report exports.

pub mod early_stop;
pub mod heatmap;
pub mod report;
pub mod task;

pub use early_stop::{early_stop_infer, EarlyStopOutput, EarlyStopPolicy};
pub use heatmap::{token_heatmap, HeatmapRecord};
pub use report::{accuracy_deltas, delta_vs_baseline, evaluate_per_iteration, greedy_decode, Baseline, Deltas, EvalReport};
pub use task::{ArithOp, Dataset, Example, Split, TaskKind, TaskSpec, TrainingBatch};
