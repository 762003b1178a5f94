//! Agents trained against worst-case observation perturbations.
//!
//! Each learner takes a regularizer weight `kappa`; `kappa = 0` gives the
//! vanilla algorithm.

pub mod certify;
pub mod ddpg;
mod dist;
pub mod dqn;
pub mod ppo;
mod replay;
mod schedule;

pub use ddpg::{train_ddpg, DdpgAgent, DdpgConfig};
pub use dist::{gaussian_kl, normal_cdf, smoothed_tv, smoothed_tv_leading};
pub use dqn::{train_dqn, DqnAgent, DqnConfig};
pub use ppo::{train_ppo, PpoAgent, PpoConfig};
pub use replay::{ReplayBuffer, Transition};
pub use schedule::EpsSchedule;

use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::envs::Action;
use crate::net::{Checkpoint, CheckpointMeta, Mlp};
use crate::{Error, Result};

/// How the inner maximization over the perturbation ball is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegMethod {
    Pgd,
    Sgld,
    Convex,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_finite(step: usize, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, reason: format!("{what} is {value}") })
    }
}

pub(crate) fn concat(s: &Array1<f64>, a: &Array1<f64>) -> Array1<f64> {
    s.iter().chain(a.iter()).copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub reward_mean: f64,
    pub td_loss: f64,
    pub reg_value: f64,
    pub eps_t: f64,
    pub cert_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// Mean episode return over the last `k` rows that saw an episode.
    pub fn recent_reward(&self, k: usize) -> Option<f64> {
        let r: Vec<f64> = self.rows.iter().rev().map(|r| r.reward_mean).filter(|v| v.is_finite()).take(k).collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }
}

/// Accumulates statistics between two log rows.
#[derive(Debug, Clone, Default)]
pub(crate) struct LogWindow {
    pub returns: Vec<f64>,
    td_sum: f64,
    reg_sum: f64,
    updates: usize,
    last_reward: Option<f64>,
}

impl LogWindow {
    pub fn add(&mut self, td: f64, reg: f64) {
        self.td_sum += td;
        self.reg_sum += reg;
        self.updates += 1;
    }

    pub fn finish(&mut self, step: usize, eps_t: f64, cert_rate: Option<f64>) -> LogRow {
        let reward_mean = if self.returns.is_empty() {
            self.last_reward.unwrap_or(f64::NAN)
        } else {
            self.returns.iter().sum::<f64>() / self.returns.len() as f64
        };
        let k = self.updates.max(1) as f64;
        let row = LogRow { step, reward_mean, td_loss: self.td_sum / k, reg_value: self.reg_sum / k, eps_t, cert_rate };
        *self = LogWindow { last_reward: Some(reward_mean).filter(|v| v.is_finite()), ..Default::default() };
        row
    }
}

/// A deterministic continuous-action policy as seen by attacks.
pub trait ContinuousPolicy: Sync {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Action executed at observation `s`, inside `[-1, 1]^d`.
    fn action(&self, s: &Array1<f64>) -> Result<Array1<f64>>;
    /// `upstreamᵀ ∂action/∂s`.
    fn action_vjp(&self, s: &Array1<f64>, upstream: &Array1<f64>) -> Result<Array1<f64>>;
    /// Per-coordinate standard deviation of the action distribution, used to
    /// scale divergence-based attacks. Deterministic policies report ones.
    fn action_scale(&self) -> Array1<f64>;
    fn critic(&self) -> Option<&Mlp>;
}

#[derive(Debug, Clone)]
pub enum Agent {
    Dqn(DqnAgent),
    Ddpg(DdpgAgent),
    Ppo(PpoAgent),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Hyper {
    Dqn { config: DqnConfig },
    Ddpg { config: DdpgConfig },
    Ppo { config: PpoConfig, log_std: Vec<f64> },
}

impl Agent {
    pub fn kind(&self) -> &'static str {
        match self {
            Agent::Dqn(_) => "dqn",
            Agent::Ddpg(_) => "ddpg",
            Agent::Ppo(_) => "ppo",
        }
    }

    /// Deterministic action used for evaluation.
    pub fn act(&self, obs: &Array1<f64>) -> Result<Action> {
        Ok(match self {
            Agent::Dqn(a) => Action::Discrete(a.greedy(obs)?),
            Agent::Ddpg(a) => Action::Continuous(a.action(obs)?),
            Agent::Ppo(a) => Action::Continuous(a.action(obs)?),
        })
    }

    pub fn as_continuous(&self) -> Option<&dyn ContinuousPolicy> {
        match self {
            Agent::Dqn(_) => None,
            Agent::Ddpg(a) => Some(a),
            Agent::Ppo(a) => Some(a),
        }
    }

    pub fn to_checkpoint(&self, metadata: CheckpointMeta) -> Checkpoint {
        let mut networks = BTreeMap::new();
        let hyper = match self {
            Agent::Dqn(a) => {
                networks.insert("q".to_string(), a.qnet.clone());
                Hyper::Dqn { config: a.cfg.clone() }
            }
            Agent::Ddpg(a) => {
                networks.insert("actor".to_string(), a.actor.clone());
                networks.insert("critic".to_string(), a.critic.clone());
                Hyper::Ddpg { config: a.cfg.clone() }
            }
            Agent::Ppo(a) => {
                networks.insert("mean".to_string(), a.mean_net.clone());
                networks.insert("value".to_string(), a.value_net.clone());
                Hyper::Ppo { config: a.cfg.clone(), log_std: a.log_std.to_vec() }
            }
        };
        Checkpoint {
            metadata,
            networks,
            hyperparameters: serde_json::to_value(hyper).expect("hyperparameters serialize"),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let hyper: Hyper = serde_json::from_value(ck.hyperparameters.clone())
            .map_err(|e| Error::arg(format!("checkpoint hyperparameters: {e}")))?;
        Ok(match hyper {
            Hyper::Dqn { config } => {
                config.validate()?;
                Agent::Dqn(DqnAgent::from_parts(config, ck.network("q")?.clone()))
            }
            Hyper::Ddpg { config } => {
                config.validate()?;
                let actor = ck.network("actor")?.clone();
                let critic = ck.network("critic")?.clone();
                if critic.input_dim() != actor.input_dim() + actor.output_dim() || critic.output_dim() != 1 {
                    return Err(Error::dim("critic input", actor.input_dim() + actor.output_dim(), critic.input_dim()));
                }
                Agent::Ddpg(DdpgAgent::from_parts(config, actor, critic))
            }
            Hyper::Ppo { config, log_std } => {
                config.validate()?;
                let mean = ck.network("mean")?.clone();
                let value = ck.network("value")?.clone();
                if log_std.len() != mean.output_dim() {
                    return Err(Error::dim("log_std", mean.output_dim(), log_std.len()));
                }
                if value.input_dim() != mean.input_dim() || value.output_dim() != 1 {
                    return Err(Error::dim("value net input", mean.input_dim(), value.input_dim()));
                }
                Agent::Ppo(PpoAgent::from_parts(config, mean, value, Array1::from(log_std)))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&array![1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&array![0.0, 0.0]), 0);
    }

    #[test]
    fn log_window_carries_last_reward() {
        let mut w = LogWindow::default();
        w.returns.push(2.0);
        w.add(1.0, 0.5);
        let r = w.finish(10, 0.0, None);
        assert_eq!((r.reward_mean, r.td_loss, r.reg_value), (2.0, 1.0, 0.5));
        assert_eq!(w.finish(20, 0.0, None).reward_mean, 2.0);
    }

    #[test]
    fn checkpoint_round_trip_for_every_kind() {
        let meta = CheckpointMeta { seed: 1, step: 2, env: "point_mass".into() };
        let agents = vec![
            Agent::Dqn(DqnAgent::new(DqnConfig::default(), 2, 4, 0).unwrap()),
            Agent::Ddpg(DdpgAgent::new(DdpgConfig::default(), 2, 1, 0).unwrap()),
            Agent::Ppo(PpoAgent::new(PpoConfig::default(), 2, 1, 0).unwrap()),
        ];
        let s = array![0.1, -0.2];
        for a in agents {
            let text = a.to_checkpoint(meta.clone()).to_json();
            let back = Agent::from_checkpoint(&Checkpoint::from_json(&text).unwrap()).unwrap();
            assert_eq!(back.kind(), a.kind());
            assert_eq!(back.act(&s).unwrap(), a.act(&s).unwrap());
        }
    }
}
