use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Learning-rate multiplier in `[0, 1]` as a function of the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warm-up, then linear decay.
    WarmupLinear,
    /// Linear warm-up, then half-cosine decay.
    WarmupCosine,
    Constant,
}

impl Schedule {
    /// Multiplier for 0-based `step` out of `total`, warming up over
    /// `warmup` steps. Evaluated at `t = step + 1` so the first step already
    /// moves the weights and the last step keeps a positive rate.
    pub fn factor(&self, step: usize, total: usize, warmup: usize) -> f64 {
        let t = (step + 1) as f64;
        let total = total.max(1) as f64;
        let warm = (warmup as f64).min(total);
        match self {
            Schedule::Constant => 1.0,
            _ if warm > 0.0 && t <= warm => self.warmup_part(t, warm),
            _ => self.decay_part(t, total, warm),
        }
    }

    fn warmup_part(&self, t: f64, warm: f64) -> f64 {
        t / warm
    }

    fn decay_part(&self, t: f64, total: f64, warm: f64) -> f64 {
        let span = total - warm + 1.0;
        let progress = ((t - warm) / span).clamp(0.0, 1.0);
        match self {
            Schedule::WarmupLinear => 1.0 - progress,
            Schedule::WarmupCosine => 0.5 * (1.0 + (PI * progress).cos()),
            Schedule::Constant => 1.0,
        }
    }
}
