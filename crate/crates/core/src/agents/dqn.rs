use ndarray::Array1;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{argmax, check_finite, LogWindow, RegMethod, ReplayBuffer, TrainLog, Transition};
use super::EpsSchedule;
use crate::envs::{Action, ActionSpace, Environment};
use crate::net::{Activation, Adam, GradientBundle, Mlp};
use crate::optim::{pgd_maximize, BallSpec};
use crate::relax::{logit_gap_spec, BoundMethod, DiffBound};
use crate::{par, seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub learning_starts: usize,
    /// Hard target sync period in environment steps.
    pub target_sync: usize,
    pub explore_start: f64,
    pub explore_end: f64,
    /// Fraction of the run over which exploration decays.
    pub explore_fraction: f64,
    pub huber_delta: f64,
    pub grad_clip: f64,
    pub kappa: f64,
    pub hinge_c: f64,
    pub eps: EpsSchedule,
    pub reg_method: RegMethod,
    pub pgd_steps: usize,
    pub log_every: usize,
    /// Recent observations used for the logged certification rate.
    pub cert_states: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128],
            lr: 1e-3,
            gamma: 0.9,
            batch_size: 32,
            replay_capacity: 20_000,
            learning_starts: 500,
            target_sync: 200,
            explore_start: 1.0,
            explore_end: 0.05,
            explore_fraction: 0.4,
            huber_delta: 1.0,
            grad_clip: 10.0,
            kappa: 0.0,
            hinge_c: 0.01,
            eps: EpsSchedule::dqn(0.1),
            reg_method: RegMethod::Convex,
            pgd_steps: 10,
            log_every: 500,
            cert_states: 64,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa < 0.0 || !(self.hinge_c > 0.0) {
            return Err(Error::arg("dqn needs kappa >= 0 and hinge_c > 0"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) || !(self.lr > 0.0) {
            return Err(Error::arg("dqn needs gamma in (0, 1) and lr > 0"));
        }
        if self.batch_size == 0 || self.target_sync == 0 || self.log_every == 0 || self.pgd_steps == 0 {
            return Err(Error::arg("dqn batch size, sync period, log period and pgd steps must be positive"));
        }
        if !self.eps.is_valid() {
            return Err(Error::arg("invalid eps schedule"));
        }
        if self.reg_method == RegMethod::Sgld {
            return Err(Error::arg("dqn regularizer method must be pgd or convex"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub cfg: DqnConfig,
    pub qnet: Mlp,
    pub target: Mlp,
    opt: Adam,
    pub replay: ReplayBuffer,
}

impl DqnAgent {
    pub fn new(cfg: DqnConfig, obs_dim: usize, n_actions: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if n_actions == 0 {
            return Err(Error::arg("empty action set"));
        }
        let mut sizes = vec![obs_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(n_actions);
        let qnet = Mlp::random(&sizes, Activation::Relu, seed);
        Ok(Self::from_parts(cfg, qnet))
    }

    pub fn from_parts(cfg: DqnConfig, qnet: Mlp) -> Self {
        Self {
            target: qnet.clone(),
            opt: Adam::new(&qnet),
            replay: ReplayBuffer::new(cfg.replay_capacity.max(1)),
            cfg,
            qnet,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.qnet.output_dim()
    }

    /// Greedy action, lowest index on ties.
    pub fn greedy(&self, obs: &Array1<f64>) -> Result<usize> {
        Ok(argmax(&self.qnet.forward(obs)?))
    }

    /// Hinge regularizer `Σ_s max{max_ŝ max_{a≠a*} Q(ŝ,a) − Q(ŝ,a*), −c}`
    /// and its parameter gradient.
    pub fn regularizer(&self, states: &[Array1<f64>], eps: f64, ibp_weight: f64) -> Result<(f64, GradientBundle)> {
        if states.is_empty() {
            return Err(Error::arg("regularizer needs a nonempty batch"));
        }
        if self.n_actions() < 2 {
            return Err(Error::arg("hinge regularizer needs at least two actions"));
        }
        let c = self.cfg.hinge_c;
        // repeated observations share one bound computation
        let mut uniq: Vec<(&Array1<f64>, f64)> = Vec::new();
        for s in states {
            match uniq.iter_mut().find(|(u, _)| *u == s) {
                Some(e) => e.1 += 1.0,
                None => uniq.push((s, 1.0)),
            }
        }
        let parts = par::map(&uniq, |&(s, _)| -> Result<(f64, GradientBundle)> {
            let q = self.qnet.forward(s)?;
            let a_star = argmax(&q);
            match self.cfg.reg_method {
                RegMethod::Convex => {
                    let spec = logit_gap_spec(q.len(), a_star);
                    let db = DiffBound::new(&self.qnet, Some(&spec), s, eps, ibp_weight)?;
                    let u = db.upper();
                    let (a, ua) = max_excluding(&u, a_star);
                    if ua <= -c {
                        return Ok((-c, GradientBundle::zeros_for(&self.qnet)));
                    }
                    let mut du = Array1::zeros(u.len());
                    du[a] = 1.0;
                    Ok((ua, db.backprop(&Array1::zeros(u.len()), &du)?))
                }
                _ => {
                    let (x, gap, a) = self.pgd_gap(s, a_star, eps)?;
                    if gap <= -c {
                        return Ok((-c, GradientBundle::zeros_for(&self.qnet)));
                    }
                    let mut up = Array1::zeros(q.len());
                    up[a] = 1.0;
                    up[a_star] = -1.0;
                    Ok((gap, self.qnet.backward(&x, &up)?))
                }
            }
        });
        let mut total = 0.0;
        let mut grad = GradientBundle::zeros_for(&self.qnet);
        for (p, (_, k)) in par::try_collect(parts)?.into_iter().zip(&uniq) {
            total += k * p.0;
            grad.add_scaled(&p.1, *k);
        }
        Ok((total, grad))
    }

    /// PGD on the worst logit gap; returns the point, gap and maximizing action.
    fn pgd_gap(&self, s: &Array1<f64>, a_star: usize, eps: f64) -> Result<(Array1<f64>, f64, usize)> {
        let gap = |x: &Array1<f64>| -> Result<(f64, usize)> {
            let q = self.qnet.forward(x)?;
            let (a, v) = max_excluding(&q, a_star);
            Ok((v - q[a_star], a))
        };
        let ball = BallSpec::new(s.clone(), eps)?;
        let n = self.n_actions();
        let best = pgd_maximize(
            |x| {
                let (v, a) = gap(x)?;
                let mut up = Array1::zeros(n);
                up[a] = 1.0;
                up[a_star] = -1.0;
                Ok((v, self.qnet.input_gradient(x, &up)?))
            },
            &ball,
            self.cfg.pgd_steps,
            None,
        )?;
        let (v, a) = gap(&best.x)?;
        Ok((best.x, v, a))
    }

    /// Mean Huber TD loss over `batch` with a double-Q target, and its gradient.
    fn td_loss(&self, batch: &[&Transition]) -> Result<(f64, GradientBundle)> {
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut grad = GradientBundle::zeros_for(&self.qnet);
        for t in batch {
            let a = t.action[0] as usize;
            let y = if t.terminal {
                t.reward
            } else {
                let a2 = argmax(&self.qnet.forward(&t.next_obs)?);
                t.reward + self.cfg.gamma * self.target.forward(&t.next_obs)?[a2]
            };
            let trace = self.qnet.forward_trace(&t.obs)?;
            let d = trace.output()[a] - y;
            let delta = self.cfg.huber_delta;
            let (l, g) = if d.abs() <= delta {
                (0.5 * d * d, d)
            } else {
                (delta * (d.abs() - 0.5 * delta), delta * d.signum())
            };
            loss += l / n;
            let mut up = Array1::zeros(self.n_actions());
            up[a] = g / n;
            grad.add_scaled(&self.qnet.backward_trace(&trace, &up)?, 1.0);
        }
        Ok((loss, grad))
    }
}

/// Largest entry other than `skip` (lowest index on ties).
fn max_excluding(v: &Array1<f64>, skip: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if i != skip && x > best.1 {
            best = (i, x);
        }
    }
    best
}

/// Trains `agent` for `steps` environment steps.
pub fn train_dqn(agent: &mut DqnAgent, env: &mut dyn Environment, steps: usize, seed: u64) -> Result<TrainLog> {
    if steps == 0 {
        return Err(Error::arg("training needs at least one step"));
    }
    let n_actions = match env.action_space() {
        ActionSpace::Discrete(n) => n,
        ActionSpace::Continuous(_) => return Err(Error::KindMismatch("dqn needs a discrete action space".into())),
    };
    if n_actions != agent.n_actions() || env.obs_dim() != agent.qnet.input_dim() {
        return Err(Error::dim("dqn agent vs environment", agent.n_actions(), n_actions));
    }
    let cfg = agent.cfg.clone();
    let mut rng = seed::child_rng(seed, 0);
    let mut episode = 0u64;
    let mut obs = env.reset(seed::derive(seed, 1_000_000 + episode));
    let mut ep_return = 0.0;
    let mut log = TrainLog::default();
    let mut window = LogWindow::default();
    for t in 0..steps {
        let frac = t as f64 / (cfg.explore_fraction * steps as f64).max(1.0);
        let explore = cfg.explore_start + (cfg.explore_end - cfg.explore_start) * frac.min(1.0);
        let a = if rng.gen::<f64>() < explore {
            rng.gen_range(0..n_actions)
        } else {
            agent.greedy(&obs)?
        };
        let st = env.step(&Action::Discrete(a))?;
        ep_return += st.reward;
        agent.replay.push(Transition {
            obs: obs.clone(),
            action: Array1::from_elem(1, a as f64),
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
            let batch = agent.replay.sample(cfg.batch_size, &mut rng);
            let (td, mut grad) = agent.td_loss(&batch)?;
            check_finite(t, "td loss", td)?;
            let mut reg = 0.0;
            if cfg.kappa > 0.0 {
                let states: Vec<Array1<f64>> = batch.iter().map(|b| b.obs.clone()).collect();
                let (r, g) = agent.regularizer(&states, eps_t, cfg.eps.ibp_weight(t, steps))?;
                check_finite(t, "regularizer", r)?;
                reg = r / states.len() as f64;
                grad.add_scaled(&g, cfg.kappa / states.len() as f64);
            }
            grad.clip_norm(cfg.grad_clip);
            agent.opt.step(&mut agent.qnet, &grad, cfg.lr);
            if !agent.qnet.is_finite() {
                return Err(Error::Divergence { step: t, reason: "non-finite q-network parameters".into() });
            }
            window.add(td, reg);
        }
        if (t + 1) % cfg.target_sync == 0 {
            agent.target = agent.qnet.clone();
        }
        if (t + 1) % cfg.log_every == 0 || t + 1 == steps {
            let states: Vec<Array1<f64>> = agent.replay.recent(cfg.cert_states).iter().map(|t| t.obs.clone()).collect();
            let cert = super::certify::dqn_cert_rate(&agent.qnet, &states, cfg.eps.target, BoundMethod::IbpBackward)?;
            log.rows.push(window.finish(t + 1, eps_t, Some(cert)));
        }
    }
    Ok(log)
}
