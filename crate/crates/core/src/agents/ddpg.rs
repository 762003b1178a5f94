use ndarray::{s, Array1};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_finite, concat, ContinuousPolicy, EpsSchedule, LogWindow, RegMethod, ReplayBuffer, TrainLog, Transition};
use crate::envs::{Action, ActionSpace, Environment};
use crate::net::{Activation, Adam, GradientBundle, Mlp};
use crate::optim::{sgld_maximize, BallSpec, SgldConfig};
use crate::relax::{deviation_l2_grad, DiffBound};
use crate::{par, seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub learning_starts: usize,
    pub explore_noise: f64,
    /// Squash the actor output with tanh.
    pub tanh_output: bool,
    pub kappa: f64,
    /// Smoothing scale σ in the regularizer's `√(2/π)/σ` factor.
    pub smoothing_sigma: f64,
    pub eps: EpsSchedule,
    pub reg_method: RegMethod,
    pub sgld_beta: f64,
    pub grad_clip: f64,
    pub log_every: usize,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![32, 32],
            critic_hidden: vec![64, 64],
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            gamma: 0.99,
            tau: 0.01,
            batch_size: 32,
            replay_capacity: 50_000,
            learning_starts: 1000,
            explore_noise: 0.2,
            tanh_output: true,
            kappa: 0.0,
            smoothing_sigma: 0.1,
            eps: EpsSchedule::ddpg(0.1),
            reg_method: RegMethod::Convex,
            sgld_beta: SgldConfig::DEFAULT_BETA,
            grad_clip: 10.0,
            log_every: 1000,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::arg("tau must lie in (0, 1]"));
        }
        if !(self.smoothing_sigma > 0.0) || self.kappa < 0.0 {
            return Err(Error::arg("ddpg needs sigma > 0 and kappa >= 0"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) || !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::arg("ddpg needs gamma in (0, 1) and positive learning rates"));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::arg("ddpg batch size and log period must be positive"));
        }
        if !self.eps.is_valid() {
            return Err(Error::arg("invalid eps schedule"));
        }
        if self.reg_method == RegMethod::Pgd {
            return Err(Error::arg("ddpg regularizer method must be sgld or convex"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DdpgAgent {
    pub cfg: DdpgConfig,
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    opt_actor: Adam,
    opt_critic: Adam,
    pub replay: ReplayBuffer,
}

impl DdpgAgent {
    pub fn new(cfg: DdpgConfig, obs_dim: usize, act_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut a = vec![obs_dim];
        a.extend(&cfg.actor_hidden);
        a.push(act_dim);
        let mut c = vec![obs_dim + act_dim];
        c.extend(&cfg.critic_hidden);
        c.push(1);
        let mut actor = Mlp::random(&a, Activation::Relu, seed::derive(seed, 0));
        // start near the zero action
        actor.scale_output_layer(0.1);
        let critic = Mlp::random(&c, Activation::Relu, seed::derive(seed, 1));
        Ok(Self::from_parts(cfg, actor, critic))
    }

    pub fn from_parts(cfg: DdpgConfig, actor: Mlp, critic: Mlp) -> Self {
        Self {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            opt_actor: Adam::new(&actor),
            opt_critic: Adam::new(&critic),
            replay: ReplayBuffer::new(cfg.replay_capacity.max(1)),
            cfg,
            actor,
            critic,
        }
    }

    fn squash(&self, raw: Array1<f64>) -> Array1<f64> {
        if self.cfg.tanh_output {
            raw.mapv(f64::tanh)
        } else {
            raw
        }
    }

    /// Derivative of the squash at the squashed value `y`.
    fn squash_grad(&self, y: &Array1<f64>) -> Array1<f64> {
        if self.cfg.tanh_output {
            y.mapv(|v| 1.0 - v * v)
        } else {
            Array1::ones(y.len())
        }
    }

    fn policy_of(&self, net: &Mlp, s: &Array1<f64>) -> Result<Array1<f64>> {
        Ok(self.squash(net.forward(s)?))
    }

    /// `√(2/π)/σ · Σ_s max_ŝ ‖π(ŝ) − π(s)‖₂` and its actor gradient.
    pub fn regularizer(&self, states: &[Array1<f64>], eps: f64, ibp_weight: f64, seed: u64) -> Result<(f64, GradientBundle)> {
        if states.is_empty() {
            return Err(Error::arg("regularizer needs a nonempty batch"));
        }
        let scale = (2.0 / std::f64::consts::PI).sqrt() / self.cfg.smoothing_sigma;
        let indexed: Vec<(usize, &Array1<f64>)> = states.iter().enumerate().collect();
        let parts = par::map(&indexed, |&(i, s)| -> Result<(f64, GradientBundle)> {
            if eps == 0.0 {
                return Ok((0.0, GradientBundle::zeros_for(&self.actor)));
            }
            let p = self.policy_of(&self.actor, s)?;
            match self.cfg.reg_method {
                RegMethod::Convex => {
                    let db = DiffBound::new(&self.actor, None, s, eps, ibp_weight)?;
                    let (l, u) = (self.squash(db.lower()), self.squash(db.upper()));
                    let bl = deviation_l2_grad(&l, &u, &p);
                    let dl = &bl.dl * &self.squash_grad(&l);
                    let du = &bl.du * &self.squash_grad(&u);
                    let dp = &bl.dp * &self.squash_grad(&p);
                    let mut g = db.backprop(&dl, &du)?;
                    g.add_scaled(&self.actor.backward(s, &dp)?, 1.0);
                    Ok((bl.value, g))
                }
                _ => {
                    let ball = BallSpec::new(s.clone(), eps)?;
                    let cfg = SgldConfig { beta: self.cfg.sgld_beta, ..SgldConfig::ddpg(eps) };
                    let best = sgld_maximize(
                        |x| {
                            let q = self.policy_of(&self.actor, x)?;
                            let d = &q - &p;
                            let up = &d * &self.squash_grad(&q) * 2.0;
                            Ok((d.dot(&d), self.actor.input_gradient(x, &up)?))
                        },
                        &ball,
                        &cfg,
                        seed::derive(seed, i as u64),
                    )?;
                    let q = self.policy_of(&self.actor, &best.x)?;
                    let d = &q - &p;
                    let n = d.dot(&d).sqrt();
                    if n == 0.0 {
                        return Ok((0.0, GradientBundle::zeros_for(&self.actor)));
                    }
                    let mut g = self.actor.backward(&best.x, &(&d / n * &self.squash_grad(&q)))?;
                    g.add_scaled(&self.actor.backward(s, &(&d / n * &self.squash_grad(&p)))?, -1.0);
                    Ok((n, g))
                }
            }
        });
        let mut total = 0.0;
        let mut grad = GradientBundle::zeros_for(&self.actor);
        for (v, g) in par::try_collect(parts)? {
            total += v;
            grad.add_scaled(&g, 1.0);
        }
        grad.scale(scale);
        Ok((scale * total, grad))
    }

    /// One critic and one actor step; returns (critic loss, mean regularizer).
    fn update(&mut self, batch: &[&Transition], eps: f64, ibp_weight: f64, reg_seed: u64) -> Result<(f64, f64)> {
        let n = batch.len() as f64;
        let act_dim = self.actor.output_dim();
        let obs_dim = self.actor.input_dim();
        let mut closs = 0.0;
        let mut cg = GradientBundle::zeros_for(&self.critic);
        for t in batch {
            let y = if t.terminal {
                t.reward
            } else {
                let a2 = self.policy_of(&self.target_actor, &t.next_obs)?;
                t.reward + self.cfg.gamma * self.target_critic.forward(&concat(&t.next_obs, &a2))?[0]
            };
            let trace = self.critic.forward_trace(&concat(&t.obs, &t.action))?;
            let d = trace.output()[0] - y;
            closs += d * d / n;
            cg.add_scaled(&self.critic.backward_trace(&trace, &Array1::from_elem(1, 2.0 * d / n))?, 1.0);
        }
        cg.clip_norm(self.cfg.grad_clip);
        self.opt_critic.step(&mut self.critic, &cg, self.cfg.critic_lr);

        let mut ag = GradientBundle::zeros_for(&self.actor);
        for t in batch {
            let a = self.policy_of(&self.actor, &t.obs)?;
            let gq = self.critic.input_gradient(&concat(&t.obs, &a), &Array1::ones(1))?;
            let ga = gq.slice(s![obs_dim..obs_dim + act_dim]).to_owned();
            let up = -(&ga * &self.squash_grad(&a)) / n;
            ag.add_scaled(&self.actor.backward(&t.obs, &up)?, 1.0);
        }
        let mut reg = 0.0;
        if self.cfg.kappa > 0.0 && eps > 0.0 {
            let states: Vec<Array1<f64>> = batch.iter().map(|t| t.obs.clone()).collect();
            let (r, g) = self.regularizer(&states, eps, ibp_weight, reg_seed)?;
            reg = r / n;
            ag.add_scaled(&g, self.cfg.kappa / n);
        }
        ag.clip_norm(self.cfg.grad_clip);
        self.opt_actor.step(&mut self.actor, &ag, self.cfg.actor_lr);
        self.target_actor.soft_update(&self.actor, self.cfg.tau);
        self.target_critic.soft_update(&self.critic, self.cfg.tau);
        Ok((closs, reg))
    }
}

impl ContinuousPolicy for DdpgAgent {
    fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    fn action_dim(&self) -> usize {
        self.actor.output_dim()
    }

    fn action(&self, s: &Array1<f64>) -> Result<Array1<f64>> {
        Ok(self.policy_of(&self.actor, s)?.mapv(|v| v.clamp(-1.0, 1.0)))
    }

    fn action_vjp(&self, s: &Array1<f64>, upstream: &Array1<f64>) -> Result<Array1<f64>> {
        let a = self.policy_of(&self.actor, s)?;
        let up = ndarray::Zip::from(upstream)
            .and(&a)
            .map_collect(|&u, &v| if v.abs() > 1.0 { 0.0 } else { u });
        self.actor.input_gradient(s, &(&up * &self.squash_grad(&a)))
    }

    fn action_scale(&self) -> Array1<f64> {
        Array1::ones(self.action_dim())
    }

    fn critic(&self) -> Option<&Mlp> {
        Some(&self.critic)
    }
}

pub fn train_ddpg(agent: &mut DdpgAgent, env: &mut dyn Environment, steps: usize, seed: u64) -> Result<TrainLog> {
    if steps == 0 {
        return Err(Error::arg("training needs at least one step"));
    }
    let act_dim = match env.action_space() {
        ActionSpace::Continuous(d) => d,
        ActionSpace::Discrete(_) => return Err(Error::KindMismatch("ddpg needs a continuous action space".into())),
    };
    if act_dim != agent.action_dim() || env.obs_dim() != agent.obs_dim() {
        return Err(Error::dim("ddpg agent vs environment", agent.action_dim(), act_dim));
    }
    let cfg = agent.cfg.clone();
    let mut rng = seed::child_rng(seed, 0);
    let mut episode = 0u64;
    let mut obs = env.reset(seed::derive(seed, 1_000_000 + episode));
    let mut ep_return = 0.0;
    let mut log = TrainLog::default();
    let mut window = LogWindow::default();
    for t in 0..steps {
        let a = if t < cfg.learning_starts {
            Array1::from_shape_fn(act_dim, |_| rng.gen_range(-1.0..=1.0))
        } else {
            let mut a = agent.action(&obs)?;
            a.mapv_inplace(|v| (v + cfg.explore_noise * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0));
            a
        };
        let st = env.step(&Action::Continuous(a.clone()))?;
        ep_return += st.reward;
        agent.replay.push(Transition {
            obs: obs.clone(),
            action: a,
            reward: st.reward,
            next_obs: st.next_obs.clone(),
            terminal: st.done && !st.truncated,
            next_action: None,
        });
        if st.done {
            window.returns.push(ep_return);
            ep_return = 0.0;
            episode += 1;
            obs = env.reset(seed::derive(seed, 1_000_000 + episode));
        } else {
            obs = st.next_obs;
        }
        let eps_t = cfg.eps.eps_at(t, steps);
        if t >= cfg.learning_starts && agent.replay.len() >= cfg.batch_size {
            let batch: Vec<Transition> = agent.replay.sample(cfg.batch_size, &mut rng).into_iter().cloned().collect();
            let refs: Vec<&Transition> = batch.iter().collect();
            let (closs, reg) = agent.update(&refs, eps_t, cfg.eps.ibp_weight(t, steps), seed::derive(seed, 2_000_000 + t as u64))?;
            check_finite(t, "critic loss", closs)?;
            check_finite(t, "regularizer", reg)?;
            if !agent.actor.is_finite() || !agent.critic.is_finite() {
                return Err(Error::Divergence { step: t, reason: "non-finite network parameters".into() });
            }
            window.add(closs, reg);
        }
        if (t + 1) % cfg.log_every == 0 || t + 1 == steps {
            log.rows.push(window.finish(t + 1, eps_t, None));
        }
    }
    Ok(log)
}
