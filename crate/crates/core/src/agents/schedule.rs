use serde::{Deserialize, Serialize};

/// Training-time perturbation radius: zero for the first `warmup` fraction
/// of the run, linear up to `target` over the next `ramp` fraction, then
/// held.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsSchedule {
    pub target: f64,
    pub warmup: f64,
    pub ramp: f64,
}

impl EpsSchedule {
    pub fn dqn(target: f64) -> Self {
        Self { target, warmup: 0.25, ramp: 0.65 }
    }

    pub fn ddpg(target: f64) -> Self {
        Self { target, warmup: 0.5, ramp: 0.25 }
    }

    pub fn ppo(target: f64) -> Self {
        Self { target, warmup: 0.0, ramp: 0.75 }
    }

    /// Ramp progress in `[0, 1]` at step `t` of `total`.
    pub fn progress(&self, t: usize, total: usize) -> f64 {
        let f = t as f64 / total.max(1) as f64;
        if f < self.warmup {
            0.0
        } else if self.ramp <= 0.0 {
            1.0
        } else {
            ((f - self.warmup) / self.ramp).clamp(0.0, 1.0)
        }
    }

    pub fn eps_at(&self, t: usize, total: usize) -> f64 {
        self.target * self.progress(t, total)
    }

    /// Weight on pure IBP when blending with the backward bound: 1 before
    /// and at the start of the ramp, 0 once it completes.
    pub fn ibp_weight(&self, t: usize, total: usize) -> f64 {
        1.0 - self.progress(t, total)
    }

    pub fn is_valid(&self) -> bool {
        self.target >= 0.0
            && self.target.is_finite()
            && (0.0..=1.0).contains(&self.warmup)
            && (0.0..=1.0).contains(&self.ramp)
            && self.warmup + self.ramp <= 1.0 + 1e-12
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_shape() {
        let s = EpsSchedule::dqn(0.1);
        assert_eq!(s.eps_at(0, 100), 0.0);
        assert_eq!(s.eps_at(24, 100), 0.0);
        assert!((s.eps_at(25 + 65 / 2, 100) - 0.1 * 32.0 / 65.0).abs() < 1e-12);
        assert_eq!(s.eps_at(95, 100), 0.1);
        assert_eq!(s.ibp_weight(95, 100), 0.0);
        let p = EpsSchedule::ppo(0.2);
        assert!((p.eps_at(50, 100) - 0.2 * 50.0 / 75.0).abs() < 1e-12);
        assert!(EpsSchedule::ddpg(0.1).is_valid());
    }
}
