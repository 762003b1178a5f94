//! One function per subcommand. Each validates its inputs before writing
//! anything, and writes only under `cfg.out`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array1;
use rand::Rng;
use serde::Serialize;

use sarl_core::agents::certify::{certify, CertReport};
use sarl_core::agents::{train_ddpg, train_dqn, train_ppo, Agent, DdpgAgent, DqnAgent, PpoAgent, TrainLog};
use sarl_core::attacks::{
    best_attack, default_suite, evaluate_natural, evaluate_suite, train_robust_sarsa, AttackConfig, AttackReport, AttackTarget,
    RewardStats,
};
use sarl_core::envs::{three_state_mdp, EnvConfig, GridWorld};
use sarl_core::net::{Checkpoint, CheckpointMeta};
use sarl_core::tabular::{
    evaluate_optimal_adversary, mdp_policy_evaluation, performance_gap_bound, GapBound, TabularMdp, TabularPolicy,
};
use sarl_core::{seed, Error};

use crate::config::{AgentSpec, RunConfig, StateSet};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Error type for a run that diverged; `main` maps it to its own exit code.
#[derive(Debug)]
pub struct Diverged(pub String);

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training diverged: {}", self.0)
    }
}

impl std::error::Error for Diverged {}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

fn prepare_out(cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(out_path(cfg, &format!("{command}_config.json")), cfg.to_json())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TabularReport {
    pub v_mdp: Vec<f64>,
    pub v_adv: Vec<f64>,
    pub adversary: Vec<usize>,
    pub gap: GapBound,
}

pub fn tabular_report(mdp: &TabularMdp, policy: &TabularPolicy, tol: f64) -> Result<TabularReport> {
    let v_mdp = mdp_policy_evaluation(mdp, policy, tol)?;
    let (v_adv, nu) = evaluate_optimal_adversary(mdp, policy, tol)?;
    let gap = performance_gap_bound(mdp, policy, tol)?;
    Ok(TabularReport { v_mdp: v_mdp.0, v_adv: v_adv.0, adversary: nu.nu, gap })
}

fn load_mdp(cfg: &RunConfig) -> Result<TabularMdp> {
    match &cfg.tabular.mdp {
        None => Ok(three_state_mdp()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading MDP {}", p.display()))?;
            Ok(TabularMdp::from_json(&text)?)
        }
    }
}

pub fn cmd_tabular_eval(cfg: &RunConfig) -> Result<TabularReport> {
    let mdp = load_mdp(cfg)?;
    let policy = cfg.tabular.policy.build(&mdp)?;
    let report = tabular_report(&mdp, &policy, cfg.tabular.tol)?;
    prepare_out(cfg, "tabular_eval")?;
    write_json(&out_path(cfg, "tabular_eval.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub p11: f64,
    pub p21: f64,
    pub p31: f64,
    pub v_s1: f64,
    pub v_s2: f64,
    pub v_s3: f64,
}

/// Adversarial values of every policy on the `(p11, p21, p31)` grid of the
/// three-state MDP.
pub fn sweep_rows(resolution: usize, tol: f64) -> Result<Vec<SweepRow>> {
    if resolution < 2 {
        bail!("sweep resolution must be at least 2 per axis");
    }
    let mdp = three_state_mdp();
    let axis: Vec<f64> = (0..resolution).map(|i| i as f64 / (resolution - 1) as f64).collect();
    let mut points = Vec::with_capacity(resolution.pow(3));
    for &a in &axis {
        for &b in &axis {
            for &c in &axis {
                points.push([a, b, c]);
            }
        }
    }
    let rows = sarl_core::par::map(&points, |p| -> Result<SweepRow, Error> {
        let pi = TabularPolicy::from_first_action_probs(p)?;
        let (v, _) = evaluate_optimal_adversary(&mdp, &pi, tol)?;
        Ok(SweepRow { p11: p[0], p21: p[1], p31: p[2], v_s1: v.0[0], v_s2: v.0[1], v_s3: v.0[2] })
    });
    Ok(sarl_core::par::try_collect(rows)?)
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let rows = sweep_rows(cfg.sweep.resolution, cfg.sweep.tol)?;
    prepare_out(cfg, "sweep")?;
    let mut w = csv::Writer::from_path(out_path(cfg, "sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

fn diverged(e: Error) -> anyhow::Error {
    match e {
        Error::Divergence { .. } | Error::NonFinite(_) => Diverged(e.to_string()).into(),
        other => other.into(),
    }
}

/// Trains the configured agent; deterministic given `seed`.
pub fn train_agent(spec: &AgentSpec, env: &EnvConfig, steps: usize, seed_: u64) -> Result<(Agent, TrainLog)> {
    let mut e = env.build()?;
    let obs_dim = e.obs_dim();
    let (agent, log) = match (spec, e.action_space()) {
        (AgentSpec::Dqn(c), sarl_core::envs::ActionSpace::Discrete(n)) => {
            let mut a = DqnAgent::new(c.clone(), obs_dim, n, seed_)?;
            let log = train_dqn(&mut a, e.as_mut(), steps, seed_).map_err(diverged)?;
            (Agent::Dqn(a), log)
        }
        (AgentSpec::Ddpg(c), sarl_core::envs::ActionSpace::Continuous(d)) => {
            let mut a = DdpgAgent::new(c.clone(), obs_dim, d, seed_)?;
            let log = train_ddpg(&mut a, e.as_mut(), steps, seed_).map_err(diverged)?;
            (Agent::Ddpg(a), log)
        }
        (AgentSpec::Ppo(c), sarl_core::envs::ActionSpace::Continuous(d)) => {
            let mut a = PpoAgent::new(c.clone(), obs_dim, d, seed_)?;
            let log = train_ppo(&mut a, e.as_mut(), steps, seed_).map_err(diverged)?;
            (Agent::Ppo(a), log)
        }
        (s, space) => bail!("{} cannot act in {} ({space:?})", s.name(), env.name()),
    };
    Ok((agent, log))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Agent> {
    let env = cfg.train.env();
    let steps = cfg.train.steps();
    if steps == 0 {
        bail!("train.steps must be positive");
    }
    let (agent, log) = train_agent(&cfg.train.agent, &env, steps, cfg.seed)?;
    prepare_out(cfg, "train")?;
    let ck = agent.to_checkpoint(CheckpointMeta { seed: cfg.seed, step: steps, env: env.name().to_string() });
    fs::write(out_path(cfg, CHECKPOINT_FILE), ck.to_json())?;
    let mut w = csv::Writer::from_path(out_path(cfg, "train_log.csv"))?;
    for r in &log.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(agent)
}

fn load_agent(cfg: &RunConfig, explicit: &Option<PathBuf>) -> Result<Agent> {
    let path = explicit.clone().unwrap_or_else(|| out_path(cfg, CHECKPOINT_FILE));
    let text = fs::read_to_string(&path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(Agent::from_checkpoint(&Checkpoint::from_json(&text)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackManifest {
    pub agent: String,
    pub env: EnvConfig,
    pub natural: RewardStats,
    pub reports: Vec<AttackReport>,
    pub best_attack: Option<String>,
    pub best_attack_reward: Option<f64>,
    pub files: Vec<String>,
}

/// Natural reward plus every configured attack, for an agent in memory.
pub fn run_attacks(cfg: &RunConfig, agent: &Agent, env: &EnvConfig) -> Result<(RewardStats, Vec<AttackReport>)> {
    let a = &cfg.attack;
    let wants_sarsa = a.robust_sarsa && agent.as_continuous().is_some();
    let kinds = match &a.attacks {
        Some(k) if k.is_empty() => bail!("attack list is empty"),
        Some(k) => k.clone(),
        None => default_suite(agent, wants_sarsa),
    };
    let suite: Vec<AttackConfig> = kinds
        .iter()
        .map(|&kind| AttackConfig {
            kind,
            eps: a.eps,
            steps: a.steps,
            eta: None,
            beta: a.beta,
            alpha_rs_mad: a.alpha_rs_mad,
            restarts: a.restarts,
            seed: cfg.seed,
        })
        .collect();
    for c in &suite {
        c.validate()?;
    }
    if a.episodes == 0 {
        bail!("attack.episodes must be positive");
    }
    let sarsa = if kinds.iter().any(|k| k.needs_sarsa()) {
        let policy = agent.as_continuous().context("robust sarsa attacks need a continuous-action agent")?;
        let mut e = env.build()?;
        Some(train_robust_sarsa(policy, e.as_mut(), &a.sarsa, seed::derive(cfg.seed, 17))?)
    } else {
        None
    };
    let natural = evaluate_natural(agent, env, a.episodes, cfg.seed)?;
    let reports = evaluate_suite(AttackTarget { agent, sarsa: sarsa.as_ref() }, env, &suite, a.episodes)?;
    Ok((natural, reports))
}

pub fn cmd_attack(cfg: &RunConfig) -> Result<AttackManifest> {
    if matches!(&cfg.attack.attacks, Some(k) if k.is_empty()) {
        bail!("attack list is empty");
    }
    let agent = load_agent(cfg, &cfg.attack.checkpoint)?;
    let env = cfg.attack.env.clone().unwrap_or_else(|| cfg.train.env());
    let (natural, reports) = run_attacks(cfg, &agent, &env)?;
    prepare_out(cfg, "attack")?;
    let mut w = csv::Writer::from_path(out_path(cfg, "attack_report.csv"))?;
    w.write_record(["attack", "eps", "episodes", "mean", "std", "min", "median"])?;
    let row = |name: &str, eps: f64, s: &RewardStats| {
        vec![
            name.to_string(),
            eps.to_string(),
            s.episodes.to_string(),
            s.mean.to_string(),
            s.std.to_string(),
            s.min.to_string(),
            s.median.to_string(),
        ]
    };
    w.write_record(row("none", 0.0, &natural))?;
    for r in &reports {
        w.write_record(row(r.attack.name(), r.eps, &r.stats))?;
    }
    w.flush()?;
    let best = best_attack(&reports);
    let manifest = AttackManifest {
        agent: agent.kind().to_string(),
        env,
        natural,
        best_attack: best.map(|b| b.attack.name().to_string()),
        best_attack_reward: best.map(|b| b.stats.mean),
        reports: reports.clone(),
        files: vec!["attack_config.json".into(), "attack_report.csv".into(), "attack_manifest.json".into()],
    };
    write_json(&out_path(cfg, "attack_manifest.json"), &manifest)?;
    Ok(manifest)
}

/// States a certificate is averaged over.
pub fn certification_states(env: &EnvConfig, set: &StateSet, seed_: u64) -> Result<Vec<Array1<f64>>> {
    let sample = |n: usize| -> Result<Vec<Array1<f64>>> {
        if n == 0 {
            bail!("certification needs at least one sample");
        }
        let (lo, hi) = env.build()?.obs_bounds();
        let mut rng = seed::rng(seed_);
        Ok((0..n).map(|_| Array1::from_shape_fn(lo.len(), |i| rng.gen_range(lo[i]..=hi[i]))).collect())
    };
    match (set, env) {
        (StateSet::Auto { .. }, EnvConfig::Gridworld(g)) => {
            let gw = GridWorld::new(g.clone())?;
            Ok(gw.free_cells().into_iter().map(|c| gw.observe_cell(c)).collect())
        }
        (StateSet::Auto { samples }, _) | (StateSet::Sampled { samples }, _) => sample(*samples),
    }
}

pub fn cmd_certify(cfg: &RunConfig) -> Result<CertReport> {
    let agent = load_agent(cfg, &cfg.certify.checkpoint)?;
    let env = cfg.certify.env.clone().unwrap_or_else(|| cfg.train.env());
    let states = certification_states(&env, &cfg.certify.states, cfg.seed)?;
    let report = certify(&agent, &states, cfg.certify.eps, cfg.certify.method)?;
    prepare_out(cfg, "certify")?;
    write_json(&out_path(cfg, "certificate.json"), &report)?;
    Ok(report)
}

pub fn cmd_selftest(cfg: &RunConfig) -> Result<Vec<crate::checks::CheckOutcome>> {
    let outcomes = crate::checks::fast_suite(cfg.seed);
    prepare_out(cfg, "selftest")?;
    write_json(&out_path(cfg, "selftest.json"), &outcomes)?;
    Ok(outcomes)
}
