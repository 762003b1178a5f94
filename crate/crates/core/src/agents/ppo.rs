use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_finite, ContinuousPolicy, EpsSchedule, LogRow, RegMethod, TrainLog};
use crate::envs::{Action, ActionSpace, Environment};
use crate::net::{Activation, Adam, AdamVec, GradientBundle, Mlp};
use crate::optim::{sgld_maximize, BallSpec, SgldConfig};
use crate::relax::{kl_reg_grad, DiffBound};
use crate::{par, seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub value_lr: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub rollout_steps: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub init_log_std: f64,
    pub kappa: f64,
    pub eps: EpsSchedule,
    pub reg_method: RegMethod,
    pub sgld_beta: f64,
    pub grad_clip: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            lr: 1e-3,
            value_lr: 2e-3,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            rollout_steps: 1000,
            epochs: 10,
            minibatch: 100,
            init_log_std: -0.5,
            kappa: 0.0,
            eps: EpsSchedule::ppo(0.1),
            reg_method: RegMethod::Convex,
            sgld_beta: SgldConfig::DEFAULT_BETA,
            grad_clip: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::arg("clip must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::arg("ppo needs gae lambda in [0, 1] and gamma in (0, 1)"));
        }
        if self.rollout_steps == 0 || self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::arg("ppo rollout, epochs and minibatch must be positive"));
        }
        if self.kappa < 0.0 || !self.eps.is_valid() {
            return Err(Error::arg("ppo needs kappa >= 0 and a valid eps schedule"));
        }
        if self.activation == Activation::Identity {
            return Err(Error::UnsupportedActivation("ppo hidden layers".into()));
        }
        if self.reg_method == RegMethod::Pgd {
            return Err(Error::arg("ppo regularizer method must be sgld or convex"));
        }
        Ok(())
    }
}

/// One rollout step prepared for the policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub obs: Array1<f64>,
    pub action: Array1<f64>,
    pub logp_old: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone)]
pub struct PpoAgent {
    pub cfg: PpoConfig,
    pub mean_net: Mlp,
    pub value_net: Mlp,
    pub log_std: Array1<f64>,
    opt_mean: Adam,
    opt_value: Adam,
    opt_log_std: AdamVec,
}

/// Policy-loss gradients: mean network and log-std.
pub struct PolicyGrad {
    pub mean: GradientBundle,
    pub log_std: Array1<f64>,
}

impl PpoAgent {
    pub fn new(cfg: PpoConfig, obs_dim: usize, act_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut sizes = vec![obs_dim];
        sizes.extend(&cfg.hidden);
        let mut m = sizes.clone();
        m.push(act_dim);
        let mut v = sizes;
        v.push(1);
        let mut mean_net = Mlp::random(&m, cfg.activation, seed::derive(seed, 0));
        mean_net.scale_output_layer(0.1);
        let value_net = Mlp::random(&v, cfg.activation, seed::derive(seed, 1));
        let log_std = Array1::from_elem(act_dim, cfg.init_log_std);
        Ok(Self::from_parts(cfg, mean_net, value_net, log_std))
    }

    pub fn from_parts(cfg: PpoConfig, mean_net: Mlp, value_net: Mlp, log_std: Array1<f64>) -> Self {
        Self {
            opt_mean: Adam::new(&mean_net),
            opt_value: Adam::new(&value_net),
            opt_log_std: AdamVec::new(log_std.len()),
            cfg,
            mean_net,
            value_net,
            log_std,
        }
    }

    pub fn sigma(&self) -> Array1<f64> {
        self.log_std.mapv(f64::exp)
    }

    fn log_prob(&self, mu: &Array1<f64>, a: &Array1<f64>) -> f64 {
        let mut lp = 0.0;
        for i in 0..mu.len() {
            let s = self.log_std[i].exp();
            let z = (a[i] - mu[i]) / s;
            lp += -0.5 * z * z - self.log_std[i] - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        lp
    }

    /// Clipped surrogate `−mean min(r·A, clip(r)·A)` and its gradients.
    pub fn surrogate(&self, batch: &[PpoSample]) -> Result<(f64, PolicyGrad)> {
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut mean = GradientBundle::zeros_for(&self.mean_net);
        let mut dls = Array1::zeros(self.log_std.len());
        let sigma = self.sigma();
        for b in batch {
            let trace = self.mean_net.forward_trace(&b.obs)?;
            let mu = trace.output();
            let ratio = (self.log_prob(mu, &b.action) - b.logp_old).exp();
            let clipped = ratio.clamp(1.0 - self.cfg.clip, 1.0 + self.cfg.clip);
            let (u, c) = (ratio * b.advantage, clipped * b.advantage);
            loss -= u.min(c) / n;
            if u > c {
                // clipped branch is active and flat
                continue;
            }
            let dlogp = -ratio * b.advantage / n;
            let z = (&b.action - mu) / &sigma;
            let dmu = &z / &sigma * dlogp;
            mean.add_scaled(&self.mean_net.backward_trace(&trace, &dmu)?, 1.0);
            dls = dls + (&z * &z - 1.0) * dlogp;
        }
        Ok((loss, PolicyGrad { mean, log_std: dls }))
    }

    /// `½ Σ_s max_ŝ (μ(ŝ) − μ(s))ᵀ Σ⁻¹ (μ(ŝ) − μ(s))` and its gradients.
    pub fn regularizer(&self, states: &[Array1<f64>], eps: f64, ibp_weight: f64, seed: u64) -> Result<(f64, PolicyGrad)> {
        if states.is_empty() {
            return Err(Error::arg("regularizer needs a nonempty batch"));
        }
        let sigma = self.sigma();
        let var = sigma.mapv(|s| s * s);
        let indexed: Vec<(usize, &Array1<f64>)> = states.iter().enumerate().collect();
        let parts = par::map(&indexed, |&(i, s)| -> Result<(f64, GradientBundle, Array1<f64>)> {
            let zero = || (0.0, GradientBundle::zeros_for(&self.mean_net), Array1::zeros(sigma.len()));
            if eps == 0.0 {
                return Ok(zero());
            }
            let mu = self.mean_net.forward(s)?;
            match self.cfg.reg_method {
                RegMethod::Convex => {
                    let db = DiffBound::new(&self.mean_net, None, s, eps, ibp_weight)?;
                    let bl = kl_reg_grad(&db.lower(), &db.upper(), &mu, &sigma);
                    let mut g = db.backprop(&bl.dl, &bl.du)?;
                    g.add_scaled(&self.mean_net.backward(s, &bl.dp)?, 1.0);
                    let dls = bl.dsigma.expect("kl gradient carries dsigma") * &sigma;
                    Ok((bl.value, g, dls))
                }
                _ => {
                    let ball = BallSpec::new(s.clone(), eps)?;
                    let cfg = SgldConfig { beta: self.cfg.sgld_beta, ..SgldConfig::ppo(eps) };
                    let best = sgld_maximize(
                        |x| {
                            let d = self.mean_net.forward(x)? - &mu;
                            let w = &d / &var;
                            Ok((0.5 * d.dot(&w), self.mean_net.input_gradient(x, &w)?))
                        },
                        &ball,
                        &cfg,
                        seed::derive(seed, i as u64),
                    )?;
                    let d = self.mean_net.forward(&best.x)? - &mu;
                    if d.iter().all(|v| *v == 0.0) {
                        return Ok(zero());
                    }
                    let w = &d / &var;
                    let mut g = self.mean_net.backward(&best.x, &w)?;
                    g.add_scaled(&self.mean_net.backward(s, &w)?, -1.0);
                    let dls = -(&d * &w);
                    Ok((0.5 * d.dot(&w), g, dls))
                }
            }
        });
        let mut total = 0.0;
        let mut mean = GradientBundle::zeros_for(&self.mean_net);
        let mut dls = Array1::zeros(sigma.len());
        for (v, g, d) in par::try_collect(parts)? {
            total += v;
            mean.add_scaled(&g, 1.0);
            dls = dls + d;
        }
        Ok((total, PolicyGrad { mean, log_std: dls }))
    }

    fn value(&self, s: &Array1<f64>) -> Result<f64> {
        Ok(self.value_net.forward(s)?[0])
    }
}

impl ContinuousPolicy for PpoAgent {
    fn obs_dim(&self) -> usize {
        self.mean_net.input_dim()
    }

    fn action_dim(&self) -> usize {
        self.mean_net.output_dim()
    }

    /// The mean action, clipped to the action box.
    fn action(&self, s: &Array1<f64>) -> Result<Array1<f64>> {
        Ok(self.mean_net.forward(s)?.mapv(|v| v.clamp(-1.0, 1.0)))
    }

    fn action_vjp(&self, s: &Array1<f64>, upstream: &Array1<f64>) -> Result<Array1<f64>> {
        let mu = self.mean_net.forward(s)?;
        let up = ndarray::Zip::from(upstream)
            .and(&mu)
            .map_collect(|&u, &m| if m.abs() > 1.0 { 0.0 } else { u });
        self.mean_net.input_gradient(s, &up)
    }

    fn action_scale(&self) -> Array1<f64> {
        self.sigma()
    }

    fn critic(&self) -> Option<&Mlp> {
        None
    }
}

struct Step {
    obs: Array1<f64>,
    action: Array1<f64>,
    logp: f64,
    reward: f64,
    value: f64,
    done: bool,
    /// Value used to bootstrap after this step.
    next_value: f64,
}

pub fn train_ppo(agent: &mut PpoAgent, env: &mut dyn Environment, iterations: usize, seed: u64) -> Result<TrainLog> {
    if iterations == 0 {
        return Err(Error::arg("training needs at least one iteration"));
    }
    let act_dim = match env.action_space() {
        ActionSpace::Continuous(d) => d,
        ActionSpace::Discrete(_) => return Err(Error::KindMismatch("ppo needs a continuous action space".into())),
    };
    if act_dim != agent.action_dim() || env.obs_dim() != agent.obs_dim() {
        return Err(Error::dim("ppo agent vs environment", agent.action_dim(), act_dim));
    }
    let cfg = agent.cfg.clone();
    let mut rng = seed::child_rng(seed, 0);
    let mut episode = 0u64;
    let mut obs = env.reset(seed::derive(seed, 1_000_000 + episode));
    let mut ep_return = 0.0;
    let mut log = TrainLog::default();
    let mut env_steps = 0usize;
    for it in 0..iterations {
        let mut steps = Vec::with_capacity(cfg.rollout_steps);
        let mut returns = Vec::new();
        let sigma = agent.sigma();
        for _ in 0..cfg.rollout_steps {
            let mu = agent.mean_net.forward(&obs)?;
            let a = Array1::from_shape_fn(act_dim, |i| mu[i] + sigma[i] * rng.sample::<f64, _>(StandardNormal));
            let logp = agent.log_prob(&mu, &a);
            let value = agent.value(&obs)?;
            let st = env.step(&Action::Continuous(a.clone()))?;
            env_steps += 1;
            ep_return += st.reward;
            let terminal = st.done && !st.truncated;
            let next_value = if terminal { 0.0 } else { agent.value(&st.next_obs)? };
            steps.push(Step { obs: obs.clone(), action: a, logp, reward: st.reward, value, done: st.done, next_value });
            if st.done {
                returns.push(ep_return);
                ep_return = 0.0;
                episode += 1;
                obs = env.reset(seed::derive(seed, 1_000_000 + episode));
            } else {
                obs = st.next_obs;
            }
        }
        let mut samples = gae(&steps, cfg.gamma, cfg.gae_lambda);
        let n = samples.len() as f64;
        let mean_adv = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
        let std_adv = (samples.iter().map(|s| (s.advantage - mean_adv).powi(2)).sum::<f64>() / n).sqrt();
        for s in &mut samples {
            s.advantage = (s.advantage - mean_adv) / (std_adv + 1e-8);
        }

        let eps_t = cfg.eps.eps_at(it, iterations);
        let ibp_w = cfg.eps.ibp_weight(it, iterations);
        let (mut vloss_sum, mut reg_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for (bi, chunk) in order.chunks(cfg.minibatch).enumerate() {
                let mb: Vec<PpoSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                let m = mb.len() as f64;
                let (ploss, mut pg) = agent.surrogate(&mb)?;
                check_finite(env_steps, "policy loss", ploss)?;
                if cfg.kappa > 0.0 && eps_t > 0.0 {
                    let states: Vec<Array1<f64>> = mb.iter().map(|s| s.obs.clone()).collect();
                    let rseed = seed::derive(seed, ((it * cfg.epochs + epoch) * 10_000 + bi) as u64);
                    let (r, rg) = agent.regularizer(&states, eps_t, ibp_w, rseed)?;
                    check_finite(env_steps, "regularizer", r)?;
                    reg_sum += r / m;
                    pg.mean.add_scaled(&rg.mean, cfg.kappa / m);
                    pg.log_std = pg.log_std + rg.log_std * (cfg.kappa / m);
                }
                pg.mean.clip_norm(cfg.grad_clip);
                agent.opt_mean.step(&mut agent.mean_net, &pg.mean, cfg.lr);
                agent.opt_log_std.step(&mut agent.log_std, &pg.log_std, cfg.lr);

                let mut vg = GradientBundle::zeros_for(&agent.value_net);
                let mut vloss = 0.0;
                for s in &mb {
                    let trace = agent.value_net.forward_trace(&s.obs)?;
                    let d = trace.output()[0] - s.ret;
                    vloss += d * d / m;
                    vg.add_scaled(&agent.value_net.backward_trace(&trace, &Array1::from_elem(1, 2.0 * d / m))?, 1.0);
                }
                check_finite(env_steps, "value loss", vloss)?;
                vg.clip_norm(cfg.grad_clip * 10.0);
                agent.opt_value.step(&mut agent.value_net, &vg, cfg.value_lr);
                vloss_sum += vloss;
                batches += 1;
            }
        }
        if !agent.mean_net.is_finite() || !agent.value_net.is_finite() || !agent.log_std.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: env_steps, reason: "non-finite policy parameters".into() });
        }
        let reward_mean = if returns.is_empty() {
            log.rows.last().map_or(f64::NAN, |r| r.reward_mean)
        } else {
            returns.iter().sum::<f64>() / returns.len() as f64
        };
        log.rows.push(LogRow {
            step: env_steps,
            reward_mean,
            td_loss: vloss_sum / batches.max(1) as f64,
            reg_value: reg_sum / batches.max(1) as f64,
            eps_t,
            cert_rate: None,
        });
    }
    Ok(log)
}

fn gae(steps: &[Step], gamma: f64, lambda: f64) -> Vec<PpoSample> {
    let mut out = vec![None; steps.len()];
    let mut acc = 0.0;
    for (i, s) in steps.iter().enumerate().rev() {
        let delta = s.reward + gamma * s.next_value - s.value;
        let cont = if s.done || i + 1 == steps.len() { 0.0 } else { 1.0 };
        acc = delta + gamma * lambda * cont * acc;
        out[i] = Some(PpoSample {
            obs: s.obs.clone(),
            action: s.action.clone(),
            logp_old: s.logp,
            advantage: acc,
            ret: acc + s.value,
        });
    }
    out.into_iter().map(|s| s.expect("filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn agent() -> PpoAgent {
        PpoAgent::new(PpoConfig::default(), 2, 1, 4).unwrap()
    }

    #[test]
    fn surrogate_at_old_policy_is_mean_advantage() {
        let a = agent();
        let batch: Vec<PpoSample> = [(array![0.1, 0.2], 0.3, 1.5), (array![-0.4, 0.0], -0.2, -0.5)]
            .into_iter()
            .map(|(o, act, adv)| {
                let mu = a.mean_net.forward(&o).unwrap();
                let action = array![act];
                PpoSample { logp_old: a.log_prob(&mu, &action), obs: o, action, advantage: adv, ret: 0.0 }
            })
            .collect();
        let (loss, _) = a.surrogate(&batch).unwrap();
        assert!((loss + 0.5).abs() < 1e-12);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let a = agent();
        let batch = vec![
            PpoSample { obs: array![0.3, -0.1], action: array![0.4], logp_old: -0.2, advantage: 1.0, ret: 0.0 },
            PpoSample { obs: array![-0.5, 0.6], action: array![-0.9], logp_old: -0.9, advantage: -0.7, ret: 0.0 },
        ];
        let (_, g) = a.surrogate(&batch).unwrap();
        let h = 1e-6;
        let mut p = a.clone();
        p.log_std[0] += h;
        let mut m = a.clone();
        m.log_std[0] -= h;
        let fd = (p.surrogate(&batch).unwrap().0 - m.surrogate(&batch).unwrap().0) / (2.0 * h);
        assert!((fd - g.log_std[0]).abs() < 1e-6);
    }

    #[test]
    fn regularizer_vanishes_at_zero_eps_and_center_is_stationary() {
        let a = agent();
        let s = array![0.2, -0.3];
        assert_eq!(a.regularizer(&[s.clone()], 0.0, 1.0, 0).unwrap().0, 0.0);
        // gradient of the KL objective in ŝ is zero at ŝ = s
        let mu = a.mean_net.forward(&s).unwrap();
        let d = a.mean_net.forward(&s).unwrap() - &mu;
        let g = a.mean_net.input_gradient(&s, &(&d / &a.sigma().mapv(|v| v * v))).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gae_single_terminal_step() {
        let steps = vec![Step { obs: array![0.0], action: array![0.0], logp: 0.0, reward: 1.0, value: 0.25, done: true, next_value: 0.0 }];
        let s = gae(&steps, 0.99, 0.95);
        assert!((s[0].advantage - 0.75).abs() < 1e-15);
        assert!((s[0].ret - 1.0).abs() < 1e-15);
    }
}
