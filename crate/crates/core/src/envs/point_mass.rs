use ndarray::{array, Array1};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Action, ActionSpace, EnvStep, Environment};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointMassConfig {
    pub dt: f64,
    /// Acceleration produced by a unit action.
    pub force: f64,
    pub pos_limit: f64,
    pub vel_limit: f64,
    pub target: f64,
    /// Initial position is drawn uniformly from `±init_range`.
    pub init_range: f64,
    /// Weight of the quadratic control penalty.
    pub action_cost: f64,
    pub horizon: usize,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            force: 1.0,
            pos_limit: 1.0,
            vel_limit: 1.0,
            target: 0.0,
            init_range: 0.8,
            action_cost: 0.1,
            horizon: 100,
        }
    }
}

/// One-dimensional double integrator tracking a fixed target.
///
/// State `(x, v)`; action `a ∈ [-1, 1]` (clipped); semi-implicit Euler
/// `v ← clamp(v + force·a·dt)`, `x ← clamp(x + v·dt)`. Reward is
/// `−(x − target)² − action_cost·a²` at the new position. Observations are
/// `(x / pos_limit, v / vel_limit) ∈ [-1, 1]²`.
#[derive(Debug, Clone)]
pub struct PointMass {
    cfg: PointMassConfig,
    x: f64,
    v: f64,
    t: usize,
}

impl PointMass {
    pub fn new(cfg: PointMassConfig) -> Result<Self> {
        if cfg.horizon == 0 {
            return Err(Error::arg("horizon must be at least 1"));
        }
        if !(cfg.dt > 0.0 && cfg.pos_limit > 0.0 && cfg.vel_limit > 0.0) {
            return Err(Error::arg("point-mass dt and limits must be positive"));
        }
        if !(cfg.action_cost >= 0.0) {
            return Err(Error::arg("point-mass action cost must be nonnegative"));
        }
        if cfg.target.abs() > cfg.pos_limit || cfg.init_range.abs() > cfg.pos_limit {
            return Err(Error::arg("point-mass target and init range must lie inside the box"));
        }
        Ok(Self { cfg, x: 0.0, v: 0.0, t: 0 })
    }

    pub fn config(&self) -> &PointMassConfig {
        &self.cfg
    }

    pub fn set_state(&mut self, x: f64, v: f64) {
        self.x = x.clamp(-self.cfg.pos_limit, self.cfg.pos_limit);
        self.v = v.clamp(-self.cfg.vel_limit, self.cfg.vel_limit);
        self.t = 0;
    }

    fn observe(&self) -> Array1<f64> {
        array![self.x / self.cfg.pos_limit, self.v / self.cfg.vel_limit]
    }
}

impl Environment for PointMass {
    fn name(&self) -> &'static str {
        "point_mass"
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous(1)
    }

    fn obs_bounds(&self) -> (Array1<f64>, Array1<f64>) {
        (Array1::from_elem(2, -1.0), Array1::ones(2))
    }

    fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    fn reset(&mut self, seed: u64) -> Array1<f64> {
        let mut rng = seed::rng(seed);
        let r = self.cfg.init_range;
        self.x = if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        self.v = 0.0;
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        let a = match action {
            Action::Continuous(a) if a.len() == 1 => a[0],
            Action::Continuous(a) => return Err(Error::dim("point-mass action", 1, a.len())),
            Action::Discrete(_) => return Err(Error::arg("point-mass takes continuous actions")),
        };
        if !a.is_finite() {
            return Err(Error::NonFinite("point-mass action".into()));
        }
        let a = a.clamp(-1.0, 1.0);
        let c = &self.cfg;
        self.v = (self.v + c.force * a * c.dt).clamp(-c.vel_limit, c.vel_limit);
        self.x = (self.x + self.v * c.dt).clamp(-c.pos_limit, c.pos_limit);
        if self.x.abs() >= c.pos_limit {
            // inelastic wall
            self.v = 0.0;
        }
        self.t += 1;
        let err = self.x - c.target;
        let done = self.t >= c.horizon;
        Ok(EnvStep {
            next_obs: self.observe(),
            reward: -err * err - c.action_cost * a * a,
            done,
            truncated: done,
        })
    }

    fn true_state(&self) -> Vec<f64> {
        vec![self.x, self.v]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_action_from_rest() {
        let mut env = PointMass::new(PointMassConfig { target: 0.25, ..Default::default() }).unwrap();
        env.set_state(0.7, 0.0);
        let st = env.step(&Action::Continuous(array![0.0])).unwrap();
        assert_eq!(env.true_state(), vec![0.7, 0.0]);
        // -(0.7 - 0.25)^2
        assert!((st.reward + 0.2025).abs() < 1e-15);
    }

    #[test]
    fn actions_are_clipped() {
        let mut a = PointMass::new(PointMassConfig::default()).unwrap();
        let mut b = a.clone();
        a.set_state(0.0, 0.0);
        b.set_state(0.0, 0.0);
        a.step(&Action::Continuous(array![5.0])).unwrap();
        b.step(&Action::Continuous(array![1.0])).unwrap();
        assert_eq!(a.true_state(), b.true_state());
        assert!((a.true_state()[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn horizon_ends_episode() {
        let mut env = PointMass::new(PointMassConfig { horizon: 3, ..Default::default() }).unwrap();
        env.reset(0);
        let zero = Action::Continuous(array![0.0]);
        assert!(!env.step(&zero).unwrap().done);
        assert!(!env.step(&zero).unwrap().done);
        assert!(env.step(&zero).unwrap().done);
    }

    #[test]
    fn seeded_reset_and_bounds() {
        let mut a = PointMass::new(PointMassConfig::default()).unwrap();
        let mut b = a.clone();
        for s in 0..10 {
            let o = a.reset(s);
            assert_eq!(o, b.reset(s));
            assert!(o.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}
