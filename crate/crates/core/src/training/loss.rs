//! Per-iteration and total objectives.
//!
//! Each supervised iteration contributes `lambda * (KL(q || p) + alpha * CE)`,
//! both terms averaged over the answer positions of the batch. Terms with a
//! zero coefficient or no teacher are left out rather than multiplied by
//! zero, so disabling a term removes it exactly.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::task::TrainingBatch;
use crate::model::StepOutputs;
use crate::numerics::{cross_entropy, kl_divergence, softmax, Distribution, Tensor, Var};
use crate::scalar::Scalar;
use crate::training::plan::SupervisionPlan;

/// Loss terms of one supervised iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLoss {
    pub kl: Option<f64>,
    pub ce: Option<f64>,
    /// `kl + alpha * ce` (before the iteration weight).
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TotalLoss {
    pub per_step: Vec<StepLoss>,
    pub total: f64,
}

fn combine(kl: Option<f64>, ce: Option<f64>, alpha: f64) -> Result<f64> {
    match (kl, ce) {
        (Some(k), Some(c)) => Ok(k + alpha * c),
        (Some(k), None) => Ok(k),
        (None, Some(c)) => Ok(alpha * c),
        (None, None) => Err(Error::InvalidPlan(
            "iteration has neither a teacher nor a hard-label term".into(),
        )),
    }
}

/// `KL(q || p) + alpha * CE(p, y*)` on the answer positions of `batch`.
///
/// `p` holds one row per batch position; `q`, when present, one row per
/// masked position.
pub fn per_step_loss<S: Scalar>(
    p: &Distribution<S>,
    q: Option<&Distribution<S>>,
    batch: &TrainingBatch,
    alpha: f64,
) -> Result<StepLoss> {
    let rows = batch.masked_rows();
    if rows.is_empty() {
        return Err(Error::InvalidInput("batch has no supervised positions".into()));
    }
    let kl = match q {
        Some(q) => Some(kl_divergence(q, &p.select_rows(&rows)?)?.as_f64()),
        None => None,
    };
    let ce = if alpha != 0.0 {
        Some(cross_entropy(p, &batch.targets, Some(&batch.mask))?.as_f64())
    } else {
        None
    };
    Ok(StepLoss {
        kl,
        ce,
        total: combine(kl, ce, alpha)?,
    })
}

/// Weighted sum of per-step losses over the iterations `plan` supervises.
/// `soft[i]` is the soft target of plan entry `i`.
pub fn total_loss<S: Scalar>(
    outputs: &StepOutputs<S>,
    plan: &SupervisionPlan,
    batch: &TrainingBatch,
    soft: &[Option<Distribution<S>>],
) -> Result<TotalLoss> {
    let n = outputs.per_step_logits.len();
    plan.validate(n, usize::MAX)?;
    if soft.len() != plan.per_iteration.len() {
        return Err(Error::LengthMismatch {
            left: soft.len(),
            right: plan.per_iteration.len(),
        });
    }
    let mut per_step = Vec::with_capacity(soft.len());
    let mut total = 0.0;
    for (i, (s, q)) in plan.per_iteration.iter().zip(soft).enumerate() {
        let p = softmax(&outputs.per_step_logits[plan.output_index(i, n)], 1)?;
        let step = per_step_loss(&p, q.as_ref(), batch, s.alpha)?;
        if s.lambda != 0.0 {
            total += s.lambda * step.total;
        }
        per_step.push(step);
    }
    Ok(TotalLoss { per_step, total })
}

/// Graph form of [`total_loss`] with per-term handles for logging.
pub struct GraphLoss<'g, S: Scalar> {
    pub total: Var<'g, S>,
    pub kl: Vec<Option<Var<'g, S>>>,
    pub ce: Vec<Option<Var<'g, S>>>,
}

impl<S: Scalar> GraphLoss<'_, S> {
    /// Reads the term values of the graph into a [`TotalLoss`].
    pub fn values(&self, plan: &SupervisionPlan) -> Result<TotalLoss> {
        let per_step = plan
            .per_iteration
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let kl = self.kl[i].map(|v| v.value().item().as_f64());
                let ce = self.ce[i].map(|v| v.value().item().as_f64());
                Ok(StepLoss {
                    kl,
                    ce,
                    total: combine(kl, ce, s.alpha)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TotalLoss {
            per_step,
            total: self.total.value().item().as_f64(),
        })
    }
}

/// Builds the plan objective over graph logits. `soft[i]` holds one
/// probability row per masked batch position.
pub fn plan_loss_graph<'g, S: Scalar>(
    logits: &[Var<'g, S>],
    plan: &SupervisionPlan,
    batch: &TrainingBatch,
    soft: &[Option<Arc<Tensor<S>>>],
) -> Result<GraphLoss<'g, S>> {
    let n = logits.len();
    plan.validate(n, usize::MAX)?;
    if soft.len() != plan.per_iteration.len() {
        return Err(Error::LengthMismatch {
            left: soft.len(),
            right: plan.per_iteration.len(),
        });
    }
    let rows = batch.masked_rows();
    if rows.is_empty() {
        return Err(Error::InvalidInput("batch has no supervised positions".into()));
    }
    let targets = batch.masked_targets();
    let mut total: Option<Var<'g, S>> = None;
    let (mut kls, mut ces) = (Vec::new(), Vec::new());
    for (i, (s, q)) in plan.per_iteration.iter().zip(soft).enumerate() {
        let out = &logits[plan.output_index(i, n)];
        let kl = q.as_ref().map(|q| out.kl_rows(&rows, q.clone())).transpose()?;
        let ce = (s.alpha != 0.0)
            .then(|| out.cross_entropy_rows(&rows, &targets))
            .transpose()?;
        let step = match (kl, ce) {
            (Some(k), Some(c)) => k.add(&c.scale(S::lit(s.alpha)))?,
            (Some(k), None) => k,
            (None, Some(c)) => c.scale(S::lit(s.alpha)),
            (None, None) => {
                return Err(Error::InvalidPlan(
                    "iteration has neither a teacher nor a hard-label term".into(),
                ))
            }
        };
        if s.lambda != 0.0 {
            let weighted = step.scale(S::lit(s.lambda));
            total = Some(match total {
                Some(t) => t.add(&weighted)?,
                None => weighted,
            });
        }
        kls.push(kl);
        ces.push(ce);
    }
    Ok(GraphLoss {
        total: total.expect("validated plan has a nonzero weight"),
        kl: kls,
        ce: ces,
    })
}
