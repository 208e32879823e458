use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard-label mix used by every distillation plan unless overridden.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Sft,
    Dsft,
    RSft,
    RDistillEq,
    RDistillWt,
    RScout,
    Scout,
}

impl PlanMode {
    pub const ALL: [PlanMode; 7] = [
        PlanMode::Sft,
        PlanMode::Dsft,
        PlanMode::RSft,
        PlanMode::RDistillEq,
        PlanMode::RDistillWt,
        PlanMode::RScout,
        PlanMode::Scout,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PlanMode::Sft => "sft",
            PlanMode::Dsft => "dsft",
            PlanMode::RSft => "r_sft",
            PlanMode::RDistillEq => "r_distill_eq",
            PlanMode::RDistillWt => "r_distill_wt",
            PlanMode::RScout => "r_scout",
            PlanMode::Scout => "scout",
        }
    }

    /// SFT and DSFT run without recursion and supervise only the output.
    pub fn is_final_only(&self) -> bool {
        matches!(self, PlanMode::Sft | PlanMode::Dsft)
    }

    pub fn uses_teachers(&self) -> bool {
        !matches!(self, PlanMode::Sft | PlanMode::RSft)
    }
}

impl fmt::Display for PlanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        PlanMode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| {
                let valid: Vec<_> = PlanMode::ALL.iter().map(|m| m.name()).collect();
                Error::InvalidPlan(format!("unknown mode `{s}`; valid modes: {}", valid.join(", ")))
            })
    }
}

/// Supervision of one decoded iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSupervision {
    /// Ladder index of the soft-target teacher, if any.
    pub teacher: Option<usize>,
    pub lambda: f64,
    pub alpha: f64,
}

/// Per-iteration teacher assignment and loss weights.
///
/// For recursive modes `per_iteration[t]` supervises iteration `t + 1`.
/// Final-only modes hold one entry applied to the last decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionPlan {
    pub mode: PlanMode,
    pub per_iteration: Vec<StepSupervision>,
    /// Iterations the model runs (1 for final-only modes).
    pub iterations: usize,
}

impl SupervisionPlan {
    pub fn final_only(&self) -> bool {
        self.mode.is_final_only()
    }

    /// Output index supervised by plan entry `i`.
    pub fn output_index(&self, i: usize, num_outputs: usize) -> usize {
        if self.final_only() {
            num_outputs - 1
        } else {
            i
        }
    }

    pub fn teachers_used(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.per_iteration.iter().filter_map(|s| s.teacher).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Checks the plan against the number of model outputs and ladder size.
    pub fn validate(&self, num_outputs: usize, ladder_len: usize) -> Result<()> {
        let want = if self.final_only() { 1 } else { num_outputs };
        if self.per_iteration.len() != want || (!self.final_only() && num_outputs != self.iterations) {
            return Err(Error::InvalidPlan(format!(
                "{} plan has {} entries for {num_outputs} model iterations",
                self.mode,
                self.per_iteration.len()
            )));
        }
        for s in &self.per_iteration {
            if !(s.lambda >= 0.0 && s.alpha >= 0.0 && s.lambda.is_finite() && s.alpha.is_finite()) {
                return Err(Error::InvalidPlan(format!("negative or non-finite weight in {s:?}")));
            }
            if let Some(t) = s.teacher {
                if t >= ladder_len {
                    return Err(Error::InvalidPlan(format!(
                        "teacher {t} not in a ladder of {ladder_len}"
                    )));
                }
            }
        }
        if self.per_iteration.iter().all(|s| s.lambda == 0.0) {
            return Err(Error::InvalidPlan("all iteration weights are zero".into()));
        }
        Ok(())
    }
}

/// Iteration weights of the weighted-distillation baseline: `(0.2, 0.3, 0.5)`
/// for three iterations, otherwise weights proportional to `t` normalized to
/// sum to one.
pub fn weighted_lambdas(t: usize) -> Vec<f64> {
    if t == 3 {
        return vec![0.2, 0.3, 0.5];
    }
    let total = (t * (t + 1) / 2) as f64;
    (1..=t).map(|i| i as f64 / total).collect()
}

/// Builds the plan of `mode` for a ladder of `ladder_len` teachers ordered
/// by increasing capacity.
pub fn make_plan(mode: PlanMode, ladder_len: usize, t: usize, alpha: f64) -> Result<SupervisionPlan> {
    if t == 0 {
        return Err(Error::InvalidPlan("T must be at least 1".into()));
    }
    if mode.uses_teachers() && ladder_len == 0 {
        return Err(Error::InvalidPlan(format!("{mode} needs at least one teacher")));
    }
    let needs_full = matches!(mode, PlanMode::Scout | PlanMode::RScout);
    if needs_full && ladder_len < t {
        return Err(Error::InvalidPlan(format!(
            "{mode} needs {t} teachers, ladder has {ladder_len}"
        )));
    }
    let strongest = ladder_len.checked_sub(1);
    let eq = 1.0 / t as f64;
    let step = |teacher, lambda, alpha| StepSupervision { teacher, lambda, alpha };
    let (per_iteration, iterations) = match mode {
        PlanMode::Sft => (vec![step(None, 1.0, 1.0)], 1),
        PlanMode::Dsft => (vec![step(strongest, 1.0, alpha)], 1),
        PlanMode::RSft => ((0..t).map(|_| step(None, eq, 1.0)).collect(), t),
        PlanMode::RDistillEq => ((0..t).map(|_| step(strongest, eq, alpha)).collect(), t),
        PlanMode::RDistillWt => (
            weighted_lambdas(t).into_iter().map(|l| step(strongest, l, alpha)).collect(),
            t,
        ),
        PlanMode::Scout => ((0..t).map(|i| step(Some(i), eq, alpha)).collect(), t),
        PlanMode::RScout => ((0..t).map(|i| step(Some(t - 1 - i), eq, alpha)).collect(), t),
    };
    Ok(SupervisionPlan {
        mode,
        per_iteration,
        iterations,
    })
}
