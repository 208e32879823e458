use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::task::{Dataset, TrainingBatch};
use crate::model::FlowModel;
use crate::numerics::{Graph, Tensor};
use crate::scalar::Scalar;
use crate::seed::SeedStreams;
use crate::teachers::cache::SoftTargetTable;
use crate::training::log::LogRecord;
use crate::training::loss::{plan_loss_graph, StepLoss, TotalLoss};
use crate::training::optim::{AdamW, AdamWConfig};
use crate::training::plan::SupervisionPlan;
use crate::training::schedule::OptimizerSchedule;

/// Optimization settings of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak rate of the pretrained group.
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Peak rate of the new group; twice `lr` when absent.
    #[serde(default)]
    pub lr_new: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    /// Effective (accumulated) batch size.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Examples per forward/backward pass; defaults to `batch_size`.
    #[serde(default)]
    pub micro_batch_size: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Total optimizer updates; overrides `epochs` when set.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(flatten)]
    pub adamw: AdamWConfig,
}

fn default_lr() -> f64 {
    2e-5
}
fn default_warmup() -> f64 {
    0.1
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    2
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            lr_new: None,
            warmup_fraction: default_warmup(),
            batch_size: default_batch(),
            micro_batch_size: None,
            epochs: default_epochs(),
            steps: None,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.micro_batch_size == Some(0) {
            return Err(Error::InvalidInput("batch sizes must be positive".into()));
        }
        self.schedule(1).validate()
    }

    pub fn total_steps(&self, num_examples: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * num_examples.div_ceil(self.batch_size))
    }

    pub fn schedule(&self, num_examples: usize) -> OptimizerSchedule {
        OptimizerSchedule {
            lr_pretrained: self.lr,
            lr_new: self.lr_new,
            warmup_fraction: self.warmup_fraction,
            total_steps: self.total_steps(num_examples),
        }
    }
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss.total)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.loss.total).collect()
    }
}

/// Example order over the whole run: one fresh permutation per epoch from
/// the `data` stream, cut into batches.
fn batch_order(n: usize, batch: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = SeedStreams::new(seed).rng("data");
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for chunk in perm.chunks(batch) {
            if out.len() == steps {
                break;
            }
            out.push(chunk.to_vec());
        }
    }
    out
}

fn weighted_sum(acc: &mut TotalLoss, part: &TotalLoss, w: f64) {
    let add = |a: &mut Option<f64>, b: Option<f64>| {
        if let Some(b) = b {
            *a = Some(a.unwrap_or(0.0) + w * b);
        }
    };
    for (a, b) in acc.per_step.iter_mut().zip(&part.per_step) {
        add(&mut a.kl, b.kl);
        add(&mut a.ce, b.ce);
        a.total += w * b.total;
    }
    acc.total += w * part.total;
}

/// Trains `model` under `plan` on `data`.
///
/// `soft` maps ladder indices used by the plan to precomputed soft-target
/// tables over `data`. Updates run through AdamW with separate rates for
/// pretrained and new parameters; micro-batches are accumulated so that
/// every update sees the loss of its full batch, averaged over all answer
/// positions. A non-finite loss aborts with [`Error::Diverged`].
pub fn train<S: Scalar>(
    model: &mut FlowModel<S>,
    plan: &SupervisionPlan,
    data: &Dataset,
    soft: &BTreeMap<usize, SoftTargetTable<S>>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if model.num_iterations() != plan.iterations {
        return Err(Error::InvalidPlan(format!(
            "{} plan expects {} iterations, model runs {}",
            plan.mode,
            plan.iterations,
            model.num_iterations()
        )));
    }
    plan.validate(model.num_iterations(), usize::MAX)?;
    for id in plan.teachers_used() {
        let table = soft
            .get(&id)
            .ok_or_else(|| Error::InvalidPlan(format!("no soft targets for teacher {id}")))?;
        if table.num_sequences() != data.len() || table.vocab != model.config().vocab_size {
            return Err(Error::InvalidPlan(format!(
                "soft targets of teacher {id} do not match the dataset or vocabulary"
            )));
        }
    }
    let schedule = cfg.schedule(data.len());
    let steps = schedule.total_steps;
    let micro = cfg.micro_batch_size.unwrap_or(cfg.batch_size).min(cfg.batch_size);
    let mut opt = AdamW::new(cfg.adamw.clone(), model.params());
    let mut log = Vec::with_capacity(steps);

    for (step, batch_ix) in batch_order(data.len(), cfg.batch_size, steps, seed).into_iter().enumerate() {
        let (lr_p, lr_n) = schedule.rates(step);
        let total_rows: usize = batch_ix
            .iter()
            .map(|&i| data.examples[i].answer().len())
            .sum();
        let mut grads: Option<Vec<Tensor<S>>> = None;
        let mut values = TotalLoss {
            per_step: vec![
                StepLoss {
                    kl: None,
                    ce: None,
                    total: 0.0
                };
                plan.per_iteration.len()
            ],
            total: 0.0,
        };
        for chunk in batch_ix.chunks(micro) {
            let batch = TrainingBatch::from_examples(chunk.iter().map(|&i| &data.examples[i]))?;
            let rows = batch.mask.iter().filter(|&&m| m).count();
            let weight = rows as f64 / total_rows as f64;
            let targets: Vec<_> = plan
                .per_iteration
                .iter()
                .map(|s| s.teacher.map(|t| soft[&t].gather(chunk)))
                .collect();
            let g = Graph::new();
            let p = model.bind(&g, true);
            let (logits, _) = model.forward_flow_graph(&p, &batch.inputs)?;
            let loss = plan_loss_graph(&logits, plan, &batch, &targets)?;
            let objective = if micro < batch_ix.len() {
                loss.total.scale(S::lit(weight))
            } else {
                loss.total
            };
            let part = loss.values(plan)?;
            if !part.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    seed,
                    detail: format!("non-finite loss; per-iteration terms {:?}", part.per_step),
                });
            }
            weighted_sum(&mut values, &part, weight);
            let gs = g.grad(objective, &p)?;
            grads = Some(match grads {
                None => gs,
                Some(mut acc) => {
                    for (a, b) in acc.iter_mut().zip(gs) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += *y;
                        }
                    }
                    acc
                }
            });
        }
        let grads = grads.expect("nonempty batch");
        let grad_norm = opt.step(model.params_mut(), &grads, lr_p, lr_n);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                seed,
                detail: format!("non-finite gradient; per-iteration terms {:?}", values.per_step),
            });
        }
        log.push(LogRecord {
            step,
            loss: values,
            lr_pretrained: lr_p,
            lr_new: lr_n,
            grad_norm,
        });
    }
    Ok(TrainOutcome { log })
}
