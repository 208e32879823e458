//! Supervision plans, objectives, schedules and the training loop.

pub mod log;
pub mod loss;
pub mod optim;
pub mod plan;
pub mod schedule;
pub mod trainer;

pub use log::{write_jsonl, LogRecord};
pub use loss::{per_step_loss, plan_loss_graph, total_loss, GraphLoss, StepLoss, TotalLoss};
pub use optim::{AdamW, AdamWConfig};
pub use plan::{make_plan, weighted_lambdas, PlanMode, StepSupervision, SupervisionPlan, DEFAULT_ALPHA};
pub use schedule::OptimizerSchedule;
pub use trainer::{train, TrainConfig, TrainOutcome};

use std::collections::BTreeMap;

use crate::error::Result;
use crate::eval::task::Dataset;
use crate::model::FlowModel;
use crate::scalar::Scalar;

/// Plain next-token training of a non-recursive stack on the answer
/// positions of `data`, producing the starting point for fine-tuning.
pub fn pretrain_backbone<S: Scalar>(
    model: &mut FlowModel<S>,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let plan = make_plan(PlanMode::Sft, 0, 1, 1.0)?;
    train(model, &plan, data, &BTreeMap::new(), cfg, seed)
}
