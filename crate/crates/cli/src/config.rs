//! Run configuration: one JSON document with per-command sections, plus
//! dotted-path overrides from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sarl_core::agents::{DdpgConfig, DqnConfig, PpoConfig};
use sarl_core::attacks::{AttackKind, SarsaConfig};
use sarl_core::envs::{EnvConfig, GridWorldConfig, PointMassConfig};
use sarl_core::relax::BoundMethod;
use sarl_core::tabular::{TabularMdp, TabularPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Every artifact is written under this directory.
    pub out: PathBuf,
    pub tabular: TabularSection,
    pub sweep: SweepSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub certify: CertifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            tabular: TabularSection::default(),
            sweep: SweepSection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
            certify: CertifySection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularSection {
    /// Path to a tabular MDP JSON document; the built-in three-state MDP
    /// when absent.
    pub mdp: Option<PathBuf>,
    pub policy: PolicySpec,
    pub tol: f64,
}

impl Default for TabularSection {
    fn default() -> Self {
        Self { mdp: None, policy: PolicySpec::Uniform, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Uniform,
    /// Probability of action 0 in each state of a two-action MDP.
    FirstActionProbs { probs: Vec<f64> },
    Deterministic { actions: Vec<usize> },
    Table { pi: Vec<Vec<f64>> },
}

impl PolicySpec {
    pub fn build(&self, mdp: &TabularMdp) -> Result<TabularPolicy> {
        let p = match self {
            PolicySpec::Uniform => TabularPolicy::uniform(mdp.n_states(), mdp.n_actions()),
            PolicySpec::FirstActionProbs { probs } => TabularPolicy::from_first_action_probs(probs)?,
            PolicySpec::Deterministic { actions } => TabularPolicy::deterministic(actions, mdp.n_actions())?,
            PolicySpec::Table { pi } => TabularPolicy::new(pi.clone())?,
        };
        if p.n_states() != mdp.n_states() || p.n_actions() != mdp.n_actions() {
            bail!(
                "policy is {}x{} but the MDP has {} states and {} actions",
                p.n_states(),
                p.n_actions(),
                mdp.n_states(),
                mdp.n_actions()
            );
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Grid points per axis, endpoints included.
    pub resolution: usize,
    pub tol: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { resolution: 21, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
pub enum AgentSpec {
    Dqn(DqnConfig),
    Ddpg(DdpgConfig),
    Ppo(PpoConfig),
}

impl AgentSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AgentSpec::Dqn(_) => "dqn",
            AgentSpec::Ddpg(_) => "ddpg",
            AgentSpec::Ppo(_) => "ppo",
        }
    }

    /// Environment steps (DQN, DDPG) or PPO iterations used when the config
    /// leaves `steps` unset.
    pub fn default_steps(&self) -> usize {
        match self {
            AgentSpec::Dqn(_) => 20_000,
            AgentSpec::Ddpg(_) => 10_000,
            AgentSpec::Ppo(_) => 30,
        }
    }

    pub fn default_env(&self) -> EnvConfig {
        match self {
            AgentSpec::Dqn(_) => EnvConfig::Gridworld(GridWorldConfig::default()),
            _ => EnvConfig::PointMass(PointMassConfig::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub agent: AgentSpec,
    /// Defaults to the agent's usual environment.
    pub env: Option<EnvConfig>,
    pub steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { agent: AgentSpec::Dqn(DqnConfig::default()), env: None, steps: None }
    }
}

impl TrainSection {
    pub fn env(&self) -> EnvConfig {
        self.env.clone().unwrap_or_else(|| self.agent.default_env())
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or_else(|| self.agent.default_steps())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Defaults to `<out>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `train.env`.
    pub env: Option<EnvConfig>,
    /// Every attack that applies to the agent when absent.
    pub attacks: Option<Vec<AttackKind>>,
    pub eps: f64,
    pub episodes: usize,
    pub steps: usize,
    pub restarts: usize,
    pub beta: f64,
    pub alpha_rs_mad: Option<f64>,
    /// Train a robust Sarsa critic for continuous agents.
    pub robust_sarsa: bool,
    pub sarsa: SarsaConfig,
}

impl Default for AttackSection {
    fn default() -> Self {
        let base = sarl_core::attacks::AttackConfig::new(AttackKind::Random, 0.1);
        Self {
            checkpoint: None,
            env: None,
            attacks: None,
            eps: 0.1,
            episodes: 20,
            steps: base.steps,
            restarts: base.restarts,
            beta: base.beta,
            alpha_rs_mad: None,
            robust_sarsa: true,
            sarsa: SarsaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateSet {
    /// Every non-terminal gridworld cell; uniform samples for other
    /// environments.
    Auto { samples: usize },
    Sampled { samples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifySection {
    pub checkpoint: Option<PathBuf>,
    pub env: Option<EnvConfig>,
    pub eps: f64,
    pub method: BoundMethod,
    pub states: StateSet,
}

impl Default for CertifySection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            env: None,
            eps: 0.1,
            method: BoundMethod::IbpBackward,
            states: StateSet::Auto { samples: 256 },
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `key=value` overrides
    /// and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => "{}".to_string(),
        };
        let base: RunConfig = serde_json::from_str(&text).context("invalid config")?;
        base.with_overrides(overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o.split_once('=').with_context(|| format!("override `{o}` is not key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).context("invalid config after overrides")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `doc.a.b.c = value` for `key = "a.b.c"`, creating objects as needed.
/// Array elements are addressed by index.
pub fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    if key.is_empty() {
        bail!("empty override key");
    }
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert(Value::Null)
            }
            Value::Array(items) => {
                let idx: usize = part.parse().with_context(|| format!("`{part}` in `{key}` is not an array index"))?;
                let len = items.len();
                let slot = items.get_mut(idx).with_context(|| format!("index {idx} out of range ({len}) in `{key}`"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => bail!("`{key}` descends into a scalar at `{part}`"),
        };
    }
    unreachable!("loop returns on the last segment")
}
