use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning rates of both parameter groups over a run: linear warmup from
/// zero, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSchedule {
    pub lr_pretrained: f64,
    /// Defaults to twice `lr_pretrained`.
    #[serde(default)]
    pub lr_new: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

fn default_warmup() -> f64 {
    0.1
}

impl OptimizerSchedule {
    pub fn new(lr_pretrained: f64, total_steps: usize) -> Self {
        Self {
            lr_pretrained,
            lr_new: None,
            warmup_fraction: default_warmup(),
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_lr = |v: f64| v.is_finite() && v >= 0.0;
        if !ok_lr(self.lr_pretrained) || !self.lr_new.is_none_or(ok_lr) {
            return Err(Error::InvalidInput("learning rates must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidInput(format!(
                "warmup_fraction {} outside [0, 1]",
                self.warmup_fraction
            )));
        }
        Ok(())
    }

    pub fn base_lr_new(&self) -> f64 {
        self.lr_new.unwrap_or(2.0 * self.lr_pretrained)
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).ceil() as usize
    }

    /// Multiplier in `[0, 1]` applied to both base rates at update `step`.
    pub fn factor(&self, step: usize) -> f64 {
        let total = self.total_steps;
        let warm = self.warmup_steps().min(total);
        if step >= total {
            return 0.0;
        }
        if step < warm {
            return step as f64 / warm as f64;
        }
        let span = (total - warm) as f64;
        let progress = (step - warm) as f64 / span;
        0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// `(pretrained, new)` learning rates at update `step`.
    pub fn rates(&self, step: usize) -> (f64, f64) {
        let f = self.factor(step);
        (self.lr_pretrained * f, self.base_lr_new() * f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = OptimizerSchedule::new(1e-3, 100);
        assert_eq!(s.warmup_steps(), 10);
        assert_eq!(s.rates(0), (0.0, 0.0));
        assert_eq!(s.factor(10), 1.0);
        assert!((s.factor(5) - 0.5).abs() < 1e-12);
        let closed = 0.5 * (1.0 + (std::f64::consts::PI * 89.0 / 90.0).cos());
        assert!((s.factor(99) - closed).abs() < 1e-12);
        assert_eq!(s.factor(100), 0.0);
    }

    #[test]
    fn groups_keep_exact_ratio() {
        let s = OptimizerSchedule::new(3e-4, 57);
        for k in 0..57 {
            let (p, n) = s.rates(k);
            assert_eq!(n, 2.0 * p, "step {k}");
        }
    }

    #[test]
    fn no_warmup() {
        let mut s = OptimizerSchedule::new(1.0, 10);
        s.warmup_fraction = 0.0;
        assert_eq!(s.factor(0), 1.0);
    }
}
