use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, kl_divergence, softmax, Distribution};
use crate::model::FlowModel;
use crate::scalar::Scalar;

pub const DEFAULT_ENTROPY_THRESHOLD: f64 = 0.1;
pub const DEFAULT_CONSISTENCY_THRESHOLD: f64 = 0.01;

/// When to halt recursion at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "policy", rename_all = "lowercase", deny_unknown_fields)]
pub enum EarlyStopPolicy {
    /// Always run all iterations.
    #[default]
    None,
    /// Stop once the next-token entropy (nats) drops below `threshold`.
    Entropy { threshold: f64 },
    /// Stop once `KL(p_t || p_{t-1})` of the next-token distribution drops
    /// below `threshold` (from the second iteration on).
    Consistency { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopOutput<S> {
    /// Greedy next token of the stopping iteration.
    pub token: usize,
    /// 1-based iteration the answer was read from.
    pub stop_iteration: usize,
    pub distribution: Distribution<S>,
}

/// Runs the recursion one iteration at a time and stops as soon as the
/// policy is satisfied; later iterations are never computed.
pub fn early_stop_infer<S: Scalar>(
    model: &FlowModel<S>,
    prompt: &[usize],
    policy: EarlyStopPolicy,
) -> Result<EarlyStopOutput<S>> {
    match policy {
        EarlyStopPolicy::Entropy { threshold } | EarlyStopPolicy::Consistency { threshold }
            if !(threshold > 0.0) =>
        {
            return Err(Error::InvalidInput(format!("early-stop threshold {threshold} must be positive")));
        }
        _ => {}
    }
    let z0 = model.encode_head(prompt)?;
    let last = prompt.len() - 1;
    let t_max = model.num_iterations();
    let mut prev_state = None;
    let mut prev_dist: Option<Distribution<S>> = None;
    for t in 1..=t_max {
        let z = model.recursive_step(&z0, prev_state.as_ref())?;
        let logits = model.decode_tail(&z)?.select_rows(&[last])?;
        let p = softmax(&logits, 1)?;
        let stop = match policy {
            EarlyStopPolicy::None => false,
            EarlyStopPolicy::Entropy { threshold } => p.entropy()[0].as_f64() < threshold,
            EarlyStopPolicy::Consistency { threshold } => match &prev_dist {
                Some(q) => kl_divergence(&p, q)?.as_f64() < threshold,
                None => false,
            },
        };
        if stop || t == t_max {
            return Ok(EarlyStopOutput {
                token: argmax(p.row(0)),
                stop_iteration: t,
                distribution: p,
            });
        }
        prev_state = Some(z);
        prev_dist = Some(p);
    }
    unreachable!("T >= 1")
}
