use ndarray::Array1;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::agents::{ContinuousPolicy, ReplayBuffer, Transition};
use crate::envs::{Action, ActionSpace, Environment};
use crate::net::{Activation, Adam, GradientBundle, Mlp};
use crate::relax::{deviation_l2_grad, DiffBound};
use crate::{par, seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SarsaConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub gamma: f64,
    /// Weight of the action-smoothness penalty; 0 gives plain Sarsa.
    pub lambda_rs: f64,
    /// Action-ball radius as a fraction of the action range width.
    pub action_radius_fraction: f64,
    /// Fraction of the updates over which the radius ramps up from 0.
    pub radius_ramp: f64,
    pub rollout_steps: usize,
    pub updates: usize,
    pub batch: usize,
    pub target_sync: usize,
    /// Gaussian noise on collected actions so the critic sees actions near
    /// the policy's.
    pub explore_noise: f64,
    pub grad_clip: f64,
}

impl Default for SarsaConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            lr: 1e-3,
            gamma: 0.99,
            lambda_rs: 1.0,
            action_radius_fraction: 0.05,
            radius_ramp: 0.5,
            rollout_steps: 10_000,
            updates: 3_000,
            batch: 32,
            target_sync: 200,
            explore_noise: 0.3,
            grad_clip: 10.0,
        }
    }
}

impl SarsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) || self.lambda_rs < 0.0 || self.lr <= 0.0 {
            return Err(Error::arg("sarsa needs gamma in (0, 1), lambda >= 0 and lr > 0"));
        }
        if !(0.0..=1.0).contains(&self.action_radius_fraction) || !(0.0..=1.0).contains(&self.radius_ramp) {
            return Err(Error::arg("sarsa action radius fraction and ramp must lie in [0, 1]"));
        }
        if self.rollout_steps == 0 || self.updates == 0 || self.batch == 0 || self.target_sync == 0 {
            return Err(Error::arg("sarsa rollout, updates, batch and target sync must be positive"));
        }
        Ok(())
    }

    /// Absolute action radius for actions in `[-1, 1]`.
    pub fn action_radius(&self) -> f64 {
        2.0 * self.action_radius_fraction
    }
}

/// On-policy action-value function `Q(s, a)` over the concatenated input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarsaCritic {
    pub qnet: Mlp,
    pub lambda_rs: f64,
    pub action_radius: f64,
    pub state_dim: usize,
}

impl SarsaCritic {
    pub fn new(qnet: Mlp, state_dim: usize, lambda_rs: f64, action_radius: f64) -> Result<Self> {
        if qnet.input_dim() <= state_dim || qnet.output_dim() != 1 {
            return Err(Error::dim("sarsa critic input", state_dim + 1, qnet.input_dim()));
        }
        Ok(Self { qnet, lambda_rs, action_radius, state_dim })
    }

    pub fn action_dim(&self) -> usize {
        self.qnet.input_dim() - self.state_dim
    }

    pub fn q(&self, s: &Array1<f64>, a: &Array1<f64>) -> Result<f64> {
        Ok(self.qnet.forward(&join(s, a))?[0])
    }

    /// Upper bound on `max_{â ∈ B(a, r)} (Q(s, â) − Q(s, a))²` and its
    /// parameter gradient.
    pub fn robust_penalty(&self, s: &Array1<f64>, a: &Array1<f64>, radius: f64) -> Result<(f64, GradientBundle)> {
        if radius == 0.0 {
            return Ok((0.0, GradientBundle::zeros_for(&self.qnet)));
        }
        let x = join(s, a);
        let r: Array1<f64> = (0..x.len()).map(|i| if i < self.state_dim { 0.0 } else { radius }).collect();
        let db = DiffBound::new_box(&self.qnet, None, &x, &r, 0.0)?;
        let q = self.qnet.forward(&x)?;
        let bl = deviation_l2_grad(&db.lower(), &db.upper(), &q);
        let k = 2.0 * bl.value;
        let mut g = db.backprop(&(&bl.dl * k), &(&bl.du * k))?;
        g.add_scaled(&self.qnet.backward(&x, &(&bl.dp * k))?, 1.0);
        Ok((bl.value * bl.value, g))
    }
}

fn join(s: &Array1<f64>, a: &Array1<f64>) -> Array1<f64> {
    s.iter().chain(a.iter()).copied().collect()
}

/// Fits `Q^π` for a frozen deterministic policy from its own rollouts,
/// with a bound-based penalty on how much `Q` moves inside an action ball.
pub fn train_robust_sarsa(
    policy: &dyn ContinuousPolicy,
    env: &mut dyn Environment,
    cfg: &SarsaConfig,
    seed: u64,
) -> Result<SarsaCritic> {
    cfg.validate()?;
    let act_dim = match env.action_space() {
        ActionSpace::Continuous(d) => d,
        ActionSpace::Discrete(_) => return Err(Error::KindMismatch("robust sarsa needs continuous actions".into())),
    };
    if act_dim != policy.action_dim() || env.obs_dim() != policy.obs_dim() {
        return Err(Error::dim("sarsa policy vs environment", policy.action_dim(), act_dim));
    }
    let data = collect(policy, env, cfg, act_dim, seed)?;
    let mut sizes = vec![env.obs_dim() + act_dim];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let qnet = Mlp::random(&sizes, Activation::Relu, seed::derive(seed, 1));
    let mut critic = SarsaCritic::new(qnet, env.obs_dim(), cfg.lambda_rs, cfg.action_radius())?;
    let mut target = critic.qnet.clone();
    let mut opt = Adam::new(&critic.qnet);
    let mut rng = seed::child_rng(seed, 2);
    let ramp_updates = (cfg.radius_ramp * cfg.updates as f64).max(1.0);
    for u in 0..cfg.updates {
        if u % cfg.target_sync == 0 {
            target = critic.qnet.clone();
        }
        let batch = data.sample(cfg.batch, &mut rng);
        let n = batch.len() as f64;
        let mut grads = GradientBundle::zeros_for(&critic.qnet);
        let mut td = 0.0;
        for t in &batch {
            let next_a = t.next_action.as_ref().expect("sarsa transitions carry the next action");
            let y = if t.terminal {
                t.reward
            } else {
                t.reward + cfg.gamma * target.forward(&join(&t.next_obs, next_a))?[0]
            };
            let x = join(&t.obs, &t.action);
            let trace = critic.qnet.forward_trace(&x)?;
            let d = trace.output()[0] - y;
            td += d * d / n;
            grads.add_scaled(&critic.qnet.backward_trace(&trace, &Array1::from_elem(1, 2.0 * d / n))?, 1.0);
        }
        if !td.is_finite() {
            return Err(Error::Divergence { step: u, reason: format!("sarsa td loss is {td}") });
        }
        let radius = cfg.action_radius() * (u as f64 / ramp_updates).min(1.0);
        if cfg.lambda_rs > 0.0 && radius > 0.0 {
            let parts = par::map(&batch, |t| critic.robust_penalty(&t.obs, &t.action, radius));
            for (v, g) in par::try_collect(parts)? {
                if !v.is_finite() {
                    return Err(Error::Divergence { step: u, reason: "sarsa robust penalty is not finite".into() });
                }
                grads.add_scaled(&g, cfg.lambda_rs / n);
            }
        }
        grads.clip_norm(cfg.grad_clip);
        opt.step(&mut critic.qnet, &grads, cfg.lr);
    }
    if !critic.qnet.is_finite() {
        return Err(Error::Divergence { step: cfg.updates, reason: "non-finite sarsa parameters".into() });
    }
    critic.action_radius = cfg.action_radius();
    Ok(critic)
}

fn collect(
    policy: &dyn ContinuousPolicy,
    env: &mut dyn Environment,
    cfg: &SarsaConfig,
    act_dim: usize,
    seed: u64,
) -> Result<ReplayBuffer> {
    let mut rng = seed::child_rng(seed, 0);
    let mut buf = ReplayBuffer::new(cfg.rollout_steps);
    let mut episode = 0u64;
    let mut obs = env.reset(seed::derive(seed, 1_000_000 + episode));
    let noisy = |a: Array1<f64>, rng: &mut seed::Rng| {
        a.mapv(|v| (v + cfg.explore_noise * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0))
    };
    let mut action = noisy(policy.action(&obs)?, &mut rng);
    for _ in 0..cfg.rollout_steps {
        let st = env.step(&Action::Continuous(action.clone()))?;
        let next_action = noisy(policy.action(&st.next_obs)?, &mut rng);
        debug_assert_eq!(next_action.len(), act_dim);
        buf.push(Transition {
            obs: obs.clone(),
            action: action.clone(),
            reward: st.reward,
            next_obs: st.next_obs.clone(),
            terminal: st.done && !st.truncated,
            next_action: Some(next_action.clone()),
        });
        if st.done {
            episode += 1;
            obs = env.reset(seed::derive(seed, 1_000_000 + episode));
            action = noisy(policy.action(&obs)?, &mut rng);
        } else {
            obs = st.next_obs;
            action = next_action;
        }
    }
    Ok(buf)
}
