use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{argmax, Agent, ContinuousPolicy};
use crate::net::Mlp;
use crate::relax::{action_deviation, bound_outputs, ub_kl_gaussian_reg, ub_logit_gap, ActionDeviation, BoundMethod};
use crate::{par, Error, Result};

/// Fraction of states whose greedy action provably cannot change inside the
/// ball: every other action's upper-bounded margin is strictly negative.
pub fn dqn_cert_rate(qnet: &Mlp, states: &[Array1<f64>], eps: f64, method: BoundMethod) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::arg("certification needs at least one state"));
    }
    let flags = par::try_collect(par::map(states, |s| dqn_certified(qnet, s, eps, method)))?;
    Ok(flags.iter().filter(|&&c| c).count() as f64 / states.len() as f64)
}

pub fn dqn_certified(qnet: &Mlp, s: &Array1<f64>, eps: f64, method: BoundMethod) -> Result<bool> {
    let a_star = argmax(&qnet.forward(s)?);
    let ub = ub_logit_gap(qnet, s, eps, a_star, method)?;
    Ok(ub.iter().enumerate().all(|(a, &u)| a == a_star || u < 0.0))
}

/// Certified worst-case movement of a DDPG action, including the output
/// squash.
pub fn ddpg_deviation(agent: &super::DdpgAgent, s: &Array1<f64>, eps: f64, method: BoundMethod) -> Result<ActionDeviation> {
    let b = bound_outputs(&agent.actor, s, eps, method)?;
    let raw = agent.actor.forward(s)?;
    let sq = |x: &Array1<f64>| if agent.cfg.tanh_output { x.mapv(f64::tanh) } else { x.clone() };
    if eps == 0.0 {
        return Ok(ActionDeviation { l1: 0.0, l2: 0.0, linf: 0.0, range: 0.0 });
    }
    Ok(action_deviation(&sq(&b.lower), &sq(&b.upper), &sq(&raw)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CertReport {
    Dqn { eps: f64, method: BoundMethod, states: usize, cert_rate: f64 },
    Ddpg { eps: f64, method: BoundMethod, states: usize, mean: ActionDeviation, max_l2: f64 },
    Ppo { eps: f64, method: BoundMethod, states: usize, mean_kl_bound: f64, max_kl_bound: f64 },
}

/// Certificates averaged over `states` for any agent kind.
pub fn certify(agent: &Agent, states: &[Array1<f64>], eps: f64, method: BoundMethod) -> Result<CertReport> {
    if states.is_empty() {
        return Err(Error::arg("certification needs at least one state"));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::arg("eps must be finite and nonnegative"));
    }
    let n = states.len();
    Ok(match agent {
        Agent::Dqn(a) => CertReport::Dqn { eps, method, states: n, cert_rate: dqn_cert_rate(&a.qnet, states, eps, method)? },
        Agent::Ddpg(a) => {
            let devs = par::try_collect(par::map(states, |s| ddpg_deviation(a, s, eps, method)))?;
            let k = n as f64;
            let mean = ActionDeviation {
                l1: devs.iter().map(|d| d.l1).sum::<f64>() / k,
                l2: devs.iter().map(|d| d.l2).sum::<f64>() / k,
                linf: devs.iter().map(|d| d.linf).sum::<f64>() / k,
                range: devs.iter().map(|d| d.range).sum::<f64>() / k,
            };
            let max_l2 = devs.iter().fold(0.0f64, |m, d| m.max(d.l2));
            CertReport::Ddpg { eps, method, states: n, mean, max_l2 }
        }
        Agent::Ppo(a) => {
            let sigma = a.action_scale();
            let kl = par::try_collect(par::map(states, |s| ub_kl_gaussian_reg(&a.mean_net, &sigma, s, eps, method)))?;
            CertReport::Ppo {
                eps,
                method,
                states: n,
                mean_kl_bound: kl.iter().sum::<f64>() / n as f64,
                max_kl_bound: kl.iter().fold(0.0f64, |m, &v| m.max(v)),
            }
        }
    })
}
