//! Checks that need trained agents: paired vanilla / state-adversarial runs,
//! certificate soundness and robust Sarsa efficacy.

use std::time::{Duration, Instant};

use anyhow::Result;
use ndarray::Array1;
use serde::Serialize;

use sarl_core::agents::certify::dqn_certified;
use sarl_core::agents::{argmax, Agent, DdpgConfig, DqnAgent, DqnConfig, PpoConfig};
use sarl_core::attacks::{
    evaluate_under_attack, median, pgd_dqn_attack, train_robust_sarsa, AttackConfig, AttackKind, AttackReport, AttackTarget,
    RewardStats,
};
use sarl_core::envs::{Action, ActionSpace, EnvConfig, GridWorld, GridWorldConfig, PointMassConfig};
use sarl_core::optim::{pgd_maximize_from, BallSpec};
use sarl_core::relax::BoundMethod;
use sarl_core::{par, seed};

use super::{finish, timed, CheckOutcome};
use crate::commands::{certification_states, run_attacks, train_agent};
use crate::config::{AgentSpec, RunConfig, StateSet};

/// Regularizer weights of the state-adversarial presets.
pub const SA_DQN_KAPPA: f64 = 0.05;
pub const SA_DDPG_KAPPA: f64 = 0.01;
pub const SA_PPO_KAPPA: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct E2eConfig {
    pub seeds: Vec<u64>,
    pub eps: f64,
    pub episodes: usize,
    pub dqn_steps: usize,
    pub ddpg_steps: usize,
    pub ppo_iterations: usize,
    /// Seed of the evaluation episodes and attack noise.
    pub eval_seed: u64,
}

impl Default for E2eConfig {
    fn default() -> Self {
        Self { seeds: (0..5).collect(), eps: 0.1, episodes: 20, dqn_steps: 20_000, ddpg_steps: 10_000, ppo_iterations: 30, eval_seed: 7 }
    }
}

#[derive(Debug, Clone)]
pub struct AgentEval {
    pub agent: Agent,
    pub natural: RewardStats,
    pub reports: Vec<AttackReport>,
    /// Lowest mean reward over the attack suite.
    pub best_attack: f64,
    pub cert_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PairedRun {
    pub algo: &'static str,
    pub seed: u64,
    pub vanilla: AgentEval,
    pub sa: AgentEval,
}

#[derive(Debug, Clone)]
pub struct E2eArtifacts {
    pub config: E2eConfig,
    pub runs: Vec<PairedRun>,
    /// Mean reward of the zero-action policy on the point-mass episodes.
    pub point_mass_null: f64,
    pub elapsed: Duration,
}

fn spec(algo: &str, kappa: f64, eps: f64) -> AgentSpec {
    match algo {
        "dqn" => AgentSpec::Dqn(DqnConfig { kappa, eps: sarl_core::agents::EpsSchedule::dqn(eps), ..DqnConfig::default() }),
        "ddpg" => AgentSpec::Ddpg(DdpgConfig { kappa, eps: sarl_core::agents::EpsSchedule::ddpg(eps), ..DdpgConfig::default() }),
        _ => AgentSpec::Ppo(PpoConfig { kappa, eps: sarl_core::agents::EpsSchedule::ppo(eps), ..PpoConfig::default() }),
    }
}

fn evaluate(cfg: &E2eConfig, agent: Agent, env: &EnvConfig) -> Result<AgentEval> {
    let mut rc = RunConfig { seed: cfg.eval_seed, ..RunConfig::default() };
    rc.attack.eps = cfg.eps;
    rc.attack.episodes = cfg.episodes;
    let (natural, reports) = run_attacks(&rc, &agent, env)?;
    let best_attack = reports.iter().map(|r| r.stats.mean).fold(f64::INFINITY, f64::min);
    let cert_rate = match &agent {
        Agent::Dqn(a) => {
            let states = certification_states(env, &StateSet::Auto { samples: 0 }, 0)?;
            Some(sarl_core::agents::certify::dqn_cert_rate(&a.qnet, &states, cfg.eps, BoundMethod::IbpBackward)?)
        }
        _ => None,
    };
    Ok(AgentEval { agent, natural, reports, best_attack, cert_rate })
}

/// Mean return of the constant zero action on the evaluation episodes.
fn zero_action_reward(env: &EnvConfig, episodes: usize, eval_seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..episodes {
        let mut e = env.build()?;
        let action = match e.action_space() {
            ActionSpace::Continuous(d) => Action::Continuous(Array1::zeros(d)),
            ActionSpace::Discrete(_) => Action::Discrete(0),
        };
        e.reset(seed::derive(eval_seed, i as u64));
        for _ in 0..e.horizon() {
            let st = e.step(&action)?;
            total += st.reward;
            if st.done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

/// Trains and evaluates every (algorithm, seed, vanilla|SA) combination.
pub fn train_e2e(cfg: &E2eConfig) -> Result<E2eArtifacts> {
    let t = Instant::now();
    let grid = EnvConfig::Gridworld(GridWorldConfig::default());
    let pm = EnvConfig::PointMass(PointMassConfig::default());
    let mut jobs = Vec::new();
    for (algo, kappa, steps, env) in [
        ("dqn", SA_DQN_KAPPA, cfg.dqn_steps, &grid),
        ("ddpg", SA_DDPG_KAPPA, cfg.ddpg_steps, &pm),
        ("ppo", SA_PPO_KAPPA, cfg.ppo_iterations, &pm),
    ] {
        for &s in &cfg.seeds {
            for k in [0.0, kappa] {
                jobs.push((algo, s, k, steps, env.clone()));
            }
        }
    }
    let evals = par::try_collect(par::map(&jobs, |(algo, s, k, steps, env)| -> Result<AgentEval> {
        let (agent, _) = train_agent(&spec(algo, *k, cfg.eps), env, *steps, *s)?;
        evaluate(cfg, agent, env)
    }))?;
    let mut runs = Vec::new();
    let mut it = jobs.iter().zip(evals);
    while let (Some(((algo, s, ..), vanilla)), Some((_, sa))) = (it.next(), it.next()) {
        runs.push(PairedRun { algo, seed: *s, vanilla, sa });
    }
    let point_mass_null = zero_action_reward(&pm, cfg.episodes, cfg.eval_seed)?;
    Ok(E2eArtifacts { config: cfg.clone(), runs, point_mass_null, elapsed: t.elapsed() })
}

impl E2eArtifacts {
    pub fn runs_of<'a>(&'a self, algo: &'a str) -> impl Iterator<Item = &'a PairedRun> + 'a {
        self.runs.iter().filter(move |r| r.algo == algo)
    }

    fn med<F: Fn(&PairedRun) -> f64>(&self, algo: &str, f: F) -> f64 {
        median(&self.runs_of(algo).map(f).collect::<Vec<_>>())
    }
}

pub fn end_to_end(art: &E2eArtifacts) -> CheckOutcome {
    let res = (|| -> Result<(bool, String)> {
        let mut ok = true;
        let mut parts = Vec::new();
        for algo in ["dqn", "ddpg", "ppo"] {
            let van_best = art.med(algo, |r| r.vanilla.best_attack);
            let sa_best = art.med(algo, |r| r.sa.best_attack);
            let van_nat = art.med(algo, |r| r.vanilla.natural.mean);
            let sa_nat = art.med(algo, |r| r.sa.natural.mean);
            // returns on the point-mass are negative; measure against the
            // zero-action baseline there
            let base = if van_nat > 0.0 { 0.0 } else { art.point_mass_null };
            let nat_ratio = (sa_nat - base) / (van_nat - base);
            let robust = sa_best > van_best;
            let natural = nat_ratio >= 0.8;
            ok &= robust && natural;
            let mut p = format!(
                "{algo}: best-attack SA {sa_best:.3} vs vanilla {van_best:.3} [{}], natural SA {sa_nat:.3} vs {van_nat:.3} ratio {nat_ratio:.2} [{}]",
                if robust { "ok" } else { "X" },
                if natural { "ok" } else { "X" }
            );
            if algo == "dqn" {
                let van_cert = art.med(algo, |r| r.vanilla.cert_rate.unwrap_or(0.0));
                let sa_cert = art.med(algo, |r| r.sa.cert_rate.unwrap_or(0.0));
                let cert = sa_cert - van_cert >= 0.3;
                ok &= cert;
                p += &format!(", cert rate SA {sa_cert:.3} vs {van_cert:.3} [{}]", if cert { "ok" } else { "X" });
            }
            parts.push(p);
        }
        Ok((ok, format!("medians over {} seeds; {}", art.config.seeds.len(), parts.join("; "))))
    })();
    finish("end_to_end", Duration::from_secs(30 * 60), art.elapsed, res)
}

/// Searches for an action flip at a certified state with the library's PGD
/// attack and with per-action margin ascent, both with restarts.
fn finds_flip(agent: &DqnAgent, s: &Array1<f64>, eps: f64, steps: usize, restarts: usize, seed_: u64) -> Result<bool> {
    let q = &agent.qnet;
    let a_star = argmax(&q.forward(s)?);
    let ball = BallSpec::new(s.clone(), eps)?;
    let cfg = AttackConfig { steps, restarts, seed: seed_, ..AttackConfig::new(AttackKind::PgdDqn, eps) };
    if argmax(&q.forward(&pgd_dqn_attack(q, &ball, &cfg)?)?) != a_star {
        return Ok(true);
    }
    let mut rng = seed::rng(seed_ ^ 1);
    for a in (0..agent.n_actions()).filter(|&a| a != a_star) {
        let mut up = Array1::zeros(agent.n_actions());
        up[a] = 1.0;
        up[a_star] = -1.0;
        for r in 0..restarts {
            let start = if r == 0 { s.clone() } else { ball.sample(&mut rng) };
            let m = pgd_maximize_from(|x| Ok((q.forward(x)?.dot(&up), q.input_gradient(x, &up)?)), &ball, &start, steps, Some(2.0 * eps / steps as f64))?;
            if m.value > 0.0 {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

pub fn certificate_soundness(art: &E2eArtifacts) -> CheckOutcome {
    timed("certificate_soundness", Duration::from_secs(120), || {
        let eps = art.config.eps;
        let gw = GridWorld::new(GridWorldConfig::default())?;
        let states: Vec<Array1<f64>> = gw.free_cells().into_iter().map(|c| gw.observe_cell(c)).collect();
        let (mut certified, mut flips) = (0, 0);
        for run in art.runs_of("dqn") {
            let Agent::Dqn(agent) = &run.sa.agent else { continue };
            for (i, s) in states.iter().enumerate() {
                if dqn_certified(&agent.qnet, s, eps, BoundMethod::IbpBackward)? {
                    certified += 1;
                    if finds_flip(agent, s, eps, 200, 10, seed::derive(run.seed, i as u64))? {
                        flips += 1;
                    }
                }
            }
        }
        Ok((flips == 0, format!("{certified} certified states over {} SA-DQN checkpoints, {flips} flipped by 200-step / 10-restart PGD", art.config.seeds.len())))
    })
}

pub fn robust_sarsa_efficacy(art: &E2eArtifacts) -> CheckOutcome {
    timed("robust_sarsa_efficacy", Duration::from_secs(600), || {
        let env = EnvConfig::PointMass(PointMassConfig::default());
        let c = &art.config;
        let mut rs = Vec::new();
        let mut random = Vec::new();
        for run in art.runs_of("ddpg") {
            let policy = run.vanilla.agent.as_continuous().expect("ddpg is continuous");
            let mut e = env.build()?;
            let sarsa = train_robust_sarsa(policy, e.as_mut(), &Default::default(), seed::derive(run.seed, 1_000 + 17))?;
            let target = AttackTarget { agent: &run.vanilla.agent, sarsa: Some(&sarsa) };
            let at = |kind| AttackConfig { seed: c.eval_seed, ..AttackConfig::new(kind, c.eps) };
            rs.push(evaluate_under_attack(target, &env, &at(AttackKind::Rs), c.episodes)?.mean);
            random.push(evaluate_under_attack(target, &env, &at(AttackKind::Random), c.episodes)?.mean);
        }
        let (m_rs, m_rand) = (median(&rs), median(&random));
        Ok((m_rs <= m_rand, format!("vanilla DDPG median reward under rs {m_rs:.3} vs random {m_rand:.3} over {} seeds", rs.len())))
    })
}
