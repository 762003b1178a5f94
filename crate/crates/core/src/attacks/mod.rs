//! Observation-space attacks and the attacked-rollout harness.
//!
//! Every attack returns a point of the ℓ∞ ball around the true observation,
//! clipped to the environment's observation range. The environment always
//! transitions on its true state; only what the agent sees is perturbed.

mod sarsa;

pub use sarsa::{train_robust_sarsa, SarsaConfig, SarsaCritic};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::agents::{argmax, Agent, ContinuousPolicy};
use crate::envs::{EnvConfig, Environment};
use crate::net::Mlp;
use crate::optim::{pgd_maximize_from, sgld_maximize_from, BallSpec, Maximum, SgldConfig, SgldUpdate};
use crate::{par, seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Random,
    Critic,
    Mad,
    Rs,
    RsMad,
    PgdDqn,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Random => "random",
            AttackKind::Critic => "critic",
            AttackKind::Mad => "mad",
            AttackKind::Rs => "rs",
            AttackKind::RsMad => "rs_mad",
            AttackKind::PgdDqn => "pgd_dqn",
        }
    }

    pub fn needs_sarsa(self) -> bool {
        matches!(self, AttackKind::Rs | AttackKind::RsMad)
    }
}

/// Blend weights tried when `alpha_rs_mad` is left unset; the lowest
/// resulting reward is reported.
pub const RS_MAD_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub eps: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Step size; defaults to `eps / steps` for pgd_dqn and `2 eps / steps`
    /// otherwise.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Inverse temperature of the SGLD noise.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub alpha_rs_mad: Option<f64>,
    /// Independent starts per attacked step; the first starts at the true
    /// observation, the rest uniformly in the ball.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    10
}

fn default_beta() -> f64 {
    1e9
}

fn default_restarts() -> usize {
    4
}

impl AttackConfig {
    pub fn new(kind: AttackKind, eps: f64) -> Self {
        Self {
            kind,
            eps,
            steps: default_steps(),
            eta: None,
            beta: default_beta(),
            alpha_rs_mad: None,
            restarts: default_restarts(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::arg("attack eps must be finite and nonnegative"));
        }
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::arg("attack steps and restarts must be at least 1"));
        }
        if let Some(eta) = self.eta {
            if !(eta >= 0.0 && eta.is_finite()) {
                return Err(Error::arg("attack eta must be finite and nonnegative"));
            }
        }
        if !(self.beta > 0.0) {
            return Err(Error::arg("attack beta must be positive"));
        }
        if let Some(a) = self.alpha_rs_mad {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::arg("alpha_rs_mad must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        let k = self.steps as f64;
        self.eta.unwrap_or(match self.kind {
            AttackKind::PgdDqn => self.eps / k,
            _ => 2.0 * self.eps / k,
        })
    }

    fn sgld(&self) -> SgldConfig {
        SgldConfig { steps: self.steps, eta: self.step_size(), beta: self.beta, update: SgldUpdate::Sign }
    }
}

/// Runs `solve(start, seed)` from the true observation and from
/// `restarts − 1` uniform points of the ball; returns the best point found.
fn best_of_starts<S>(ball: &BallSpec, cfg: &AttackConfig, mut solve: S) -> Result<Array1<f64>>
where
    S: FnMut(&Array1<f64>, u64) -> Result<Maximum>,
{
    let mut rng = seed::child_rng(cfg.seed, u64::MAX);
    let mut best = solve(&ball.center, seed::derive(cfg.seed, 0))?;
    for r in 1..cfg.restarts {
        let start = ball.sample(&mut rng);
        let m = solve(&start, seed::derive(cfg.seed, r as u64))?;
        if m.value > best.value {
            best = m;
        }
    }
    Ok(best.x)
}

/// `Q(s0, a)` and `∂Q/∂a` for a critic over concatenated `(s, a)`.
fn q_and_action_grad(qnet: &Mlp, s0: &Array1<f64>, a: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
    let x: Array1<f64> = s0.iter().chain(a.iter()).copied().collect();
    let q = qnet.forward(&x)?[0];
    let g = qnet.input_gradient(&x, &Array1::ones(1))?;
    Ok((q, g.slice(ndarray::s![s0.len()..]).to_owned()))
}

fn check_critic(qnet: &Mlp, policy: &dyn ContinuousPolicy) -> Result<()> {
    let want = policy.obs_dim() + policy.action_dim();
    if qnet.input_dim() != want || qnet.output_dim() != 1 {
        return Err(Error::dim("critic input", want, qnet.input_dim()));
    }
    Ok(())
}

/// `Q(s0, π(ŝ))` and its gradient in `ŝ`; the critic's state argument stays
/// at the true observation.
pub fn critic_objective(qnet: &Mlp, policy: &dyn ContinuousPolicy, s0: &Array1<f64>, x: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
    let a = policy.action(x)?;
    let (q, dq) = q_and_action_grad(qnet, s0, &a)?;
    Ok((q, policy.action_vjp(x, &dq)?))
}

/// Sign-gradient descent on `Q(s0, π(ŝ))`, returning the best iterate.
pub fn critic_attack(qnet: &Mlp, policy: &dyn ContinuousPolicy, ball: &BallSpec, cfg: &AttackConfig) -> Result<Array1<f64>> {
    check_critic(qnet, policy)?;
    let s0 = ball.center.clone();
    let mut f = |x: &Array1<f64>| {
        let (q, g) = critic_objective(qnet, policy, &s0, x)?;
        Ok((-q, -g))
    };
    best_of_starts(ball, cfg, |start, _| pgd_maximize_from(&mut f, ball, start, cfg.steps, Some(cfg.step_size())))
}

pub fn rs_attack(sarsa: &SarsaCritic, policy: &dyn ContinuousPolicy, ball: &BallSpec, cfg: &AttackConfig) -> Result<Array1<f64>> {
    critic_attack(&sarsa.qnet, policy, ball, cfg)
}

/// `½ (π(s0) − π(ŝ))ᵀ Σ⁻¹ (π(s0) − π(ŝ))` and its gradient in `ŝ`.
pub fn mad_objective(policy: &dyn ContinuousPolicy, a0: &Array1<f64>, x: &Array1<f64>) -> Result<(f64, Array1<f64>)> {
    let var = policy.action_scale().mapv(|s| s * s);
    let d = policy.action(x)? - a0;
    let w = &d / &var;
    Ok((0.5 * d.dot(&w), policy.action_vjp(x, &w)?))
}

/// SGLD ascent on the action-divergence objective, returning the best
/// iterate.
pub fn mad_attack(policy: &dyn ContinuousPolicy, ball: &BallSpec, cfg: &AttackConfig) -> Result<Array1<f64>> {
    let a0 = policy.action(&ball.center)?;
    let mut f = |x: &Array1<f64>| mad_objective(policy, &a0, x);
    best_of_starts(ball, cfg, |start, seed| sgld_maximize_from(&mut f, ball, start, &cfg.sgld(), seed))
}

/// `α Q_RS(s0, π(ŝ)) − (1 − α) L_MAD(ŝ)`, the loss the hybrid attack
/// minimizes, with its gradient in `ŝ`.
pub fn hybrid_objective(
    sarsa: &SarsaCritic,
    policy: &dyn ContinuousPolicy,
    s0: &Array1<f64>,
    a0: &Array1<f64>,
    alpha: f64,
    x: &Array1<f64>,
) -> Result<(f64, Array1<f64>)> {
    let (q, gq) = critic_objective(&sarsa.qnet, policy, s0, x)?;
    let (m, gm) = mad_objective(policy, a0, x)?;
    Ok((alpha * q - (1.0 - alpha) * m, gq * alpha - gm * (1.0 - alpha)))
}

pub fn hybrid_rs_mad(sarsa: &SarsaCritic, policy: &dyn ContinuousPolicy, ball: &BallSpec, cfg: &AttackConfig) -> Result<Array1<f64>> {
    check_critic(&sarsa.qnet, policy)?;
    let alpha = cfg
        .alpha_rs_mad
        .ok_or_else(|| Error::arg("rs_mad needs alpha_rs_mad for a single-state attack"))?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg("alpha_rs_mad must lie in [0, 1]"));
    }
    let s0 = ball.center.clone();
    let a0 = policy.action(&s0)?;
    let mut f = |x: &Array1<f64>| {
        let (v, g) = hybrid_objective(sarsa, policy, &s0, &a0, alpha, x)?;
        Ok((-v, -g))
    };
    best_of_starts(ball, cfg, |start, seed| sgld_maximize_from(&mut f, ball, start, &cfg.sgld(), seed))
}

fn cross_entropy_grad(qnet: &Mlp, x: &Array1<f64>, a_star: usize) -> Result<(f64, Array1<f64>)> {
    let q = qnet.forward(x)?;
    let m = q.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = q.mapv(|v| (v - m).exp());
    let z = e.sum();
    let mut p = e / z;
    let ce = -(p[a_star].ln());
    p[a_star] -= 1.0;
    Ok((ce, qnet.input_gradient(x, &p)?))
}

/// Untargeted sign-gradient ascent on the cross-entropy between the
/// Q-softmax and the clean greedy action. Restarts after the first begin at
/// a uniform point of the ball; the first iterate that changes the greedy
/// action is returned, otherwise the final iterate with the largest loss.
pub fn pgd_dqn_attack(qnet: &Mlp, ball: &BallSpec, cfg: &AttackConfig) -> Result<Array1<f64>> {
    let a_star = argmax(&qnet.forward(&ball.center)?);
    let eta = cfg.step_size();
    let mut rng = seed::rng(cfg.seed);
    let mut best: Option<(f64, Array1<f64>)> = None;
    for r in 0..cfg.restarts {
        let mut x = if r == 0 { ball.project(&ball.center)? } else { ball.sample(&mut rng) };
        for _ in 0..cfg.steps {
            let (_, g) = cross_entropy_grad(qnet, &x, a_star)?;
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("pgd_dqn gradient".into()));
            }
            x = ball.project(&(&x + &g.mapv(|v| eta * sign(v))))?;
        }
        if argmax(&qnet.forward(&x)?) != a_star {
            return Ok(x);
        }
        let (ce, _) = cross_entropy_grad(qnet, &x, a_star)?;
        if best.as_ref().map_or(true, |(b, _)| ce > *b) {
            best = Some((ce, x));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Everything an attack may consult besides the observation.
#[derive(Clone, Copy)]
pub struct AttackTarget<'a> {
    pub agent: &'a Agent,
    pub sarsa: Option<&'a SarsaCritic>,
}

/// Perturbed observation for one step. `clamp` is the valid observation
/// range.
pub fn perturb(
    target: AttackTarget<'_>,
    s0: &Array1<f64>,
    clamp: &(Array1<f64>, Array1<f64>),
    cfg: &AttackConfig,
) -> Result<Array1<f64>> {
    cfg.validate()?;
    let ball = BallSpec::new(s0.clone(), cfg.eps)?.with_clamp(Some(clamp.0.clone()), Some(clamp.1.clone()))?;
    if cfg.eps == 0.0 {
        return ball.project(s0);
    }
    let need_cont = || {
        target
            .agent
            .as_continuous()
            .ok_or_else(|| Error::KindMismatch(format!("{} attack needs a continuous-action agent", cfg.kind.name())))
    };
    let need_sarsa = || target.sarsa.ok_or_else(|| Error::arg(format!("{} attack needs a robust sarsa critic", cfg.kind.name())));
    match cfg.kind {
        AttackKind::Random => Ok(ball.sample(&mut seed::rng(cfg.seed))),
        AttackKind::Critic => {
            let p = need_cont()?;
            let q = p.critic().ok_or_else(|| Error::KindMismatch("critic attack needs an agent with a critic".into()))?;
            critic_attack(q, p, &ball, cfg)
        }
        AttackKind::Mad => mad_attack(need_cont()?, &ball, cfg),
        AttackKind::Rs => rs_attack(need_sarsa()?, need_cont()?, &ball, cfg),
        AttackKind::RsMad => hybrid_rs_mad(need_sarsa()?, need_cont()?, &ball, cfg),
        AttackKind::PgdDqn => match target.agent {
            Agent::Dqn(a) => pgd_dqn_attack(&a.qnet, &ball, cfg),
            _ => Err(Error::KindMismatch("pgd_dqn attack needs a dqn agent".into())),
        },
    }
}

/// One attacked episode.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackedEpisode {
    pub total_reward: f64,
    pub actions: Vec<Vec<f64>>,
    /// True environment state before every step and after the last.
    pub true_states: Vec<Vec<f64>>,
    pub observations: Vec<Array1<f64>>,
}

pub fn attacked_episode(
    target: AttackTarget<'_>,
    env: &mut dyn Environment,
    cfg: &AttackConfig,
    episode_seed: u64,
) -> Result<AttackedEpisode> {
    let clamp = env.obs_bounds();
    let mut obs = env.reset(episode_seed);
    let mut out = AttackedEpisode { total_reward: 0.0, actions: Vec::new(), true_states: vec![env.true_state()], observations: Vec::new() };
    for t in 0..env.horizon() {
        let step_cfg = AttackConfig { seed: seed::derive(episode_seed, t as u64), ..cfg.clone() };
        let seen = perturb(target, &obs, &clamp, &step_cfg)?;
        let action = target.agent.act(&seen)?;
        let st = env.step(&action)?;
        out.total_reward += st.reward;
        out.actions.push(action.as_vec());
        out.true_states.push(env.true_state());
        out.observations.push(seen);
        if st.done {
            break;
        }
        obs = st.next_obs;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub median: f64,
}

impl RewardStats {
    pub fn from_returns(r: &[f64]) -> Result<Self> {
        if r.is_empty() {
            return Err(Error::arg("statistics need at least one episode"));
        }
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self { episodes: r.len(), mean, std, min: r.iter().copied().fold(f64::INFINITY, f64::min), median: median(r) })
    }
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Episode `i` resets with `seed::derive(cfg.seed, i)`, so different attacks
/// with the same seed face the same initial states.
pub fn evaluate_under_attack(
    target: AttackTarget<'_>,
    env: &EnvConfig,
    cfg: &AttackConfig,
    episodes: usize,
) -> Result<RewardStats> {
    if episodes == 0 {
        return Err(Error::arg("evaluation needs at least one episode"));
    }
    cfg.validate()?;
    if cfg.kind == AttackKind::RsMad && cfg.alpha_rs_mad.is_none() {
        let mut worst: Option<RewardStats> = None;
        for alpha in RS_MAD_ALPHAS {
            let c = AttackConfig { alpha_rs_mad: Some(alpha), ..cfg.clone() };
            let s = evaluate_under_attack(target, env, &c, episodes)?;
            if worst.as_ref().map_or(true, |w| s.mean < w.mean) {
                worst = Some(s);
            }
        }
        return Ok(worst.expect("nonempty alpha sweep"));
    }
    let returns = par::try_collect(par::map_range(episodes, |i| -> Result<f64> {
        let mut e = env.build()?;
        Ok(attacked_episode(target, e.as_mut(), cfg, seed::derive(cfg.seed, i as u64))?.total_reward)
    }))?;
    RewardStats::from_returns(&returns)
}

/// Reward with no perturbation, on the same episode seeds.
pub fn evaluate_natural(agent: &Agent, env: &EnvConfig, episodes: usize, seed: u64) -> Result<RewardStats> {
    let cfg = AttackConfig { seed, ..AttackConfig::new(AttackKind::Random, 0.0) };
    evaluate_under_attack(AttackTarget { agent, sarsa: None }, env, &cfg, episodes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: AttackKind,
    pub eps: f64,
    pub stats: RewardStats,
}

/// Evaluates every attack in `suite`.
pub fn evaluate_suite(
    target: AttackTarget<'_>,
    env: &EnvConfig,
    suite: &[AttackConfig],
    episodes: usize,
) -> Result<Vec<AttackReport>> {
    if suite.is_empty() {
        return Err(Error::arg("attack suite is empty"));
    }
    suite
        .iter()
        .map(|c| Ok(AttackReport { attack: c.kind, eps: c.eps, stats: evaluate_under_attack(target, env, c, episodes)? }))
        .collect()
}

/// Lowest mean reward over the suite.
pub fn best_attack(reports: &[AttackReport]) -> Option<&AttackReport> {
    reports.iter().min_by(|a, b| a.stats.mean.total_cmp(&b.stats.mean))
}

/// Attack kinds that apply to an agent, given whether a sarsa critic exists.
pub fn default_suite(agent: &Agent, has_sarsa: bool) -> Vec<AttackKind> {
    let mut v = vec![AttackKind::Random];
    match agent {
        Agent::Dqn(_) => v.push(AttackKind::PgdDqn),
        Agent::Ddpg(_) => v.extend([AttackKind::Critic, AttackKind::Mad]),
        Agent::Ppo(_) => v.push(AttackKind::Mad),
    }
    if has_sarsa && agent.as_continuous().is_some() {
        v.extend([AttackKind::Rs, AttackKind::RsMad]);
    }
    v
}
