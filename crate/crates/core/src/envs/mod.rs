//! Built-in environments.
//!
//! Observations are normalized so that an ℓ∞ radius means the same thing
//! across coordinates; [`Environment::obs_bounds`] reports the valid range,
//! which attacks use as their clamp.

mod gridworld;
mod point_mass;
mod three_state;

pub use gridworld::{GridWorld, GridWorldConfig};
pub use point_mass::{PointMass, PointMassConfig};
pub use three_state::{three_state_mdp, S1, S2, S3};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Array1<f64>),
}

impl Action {
    pub fn as_vec(&self) -> Vec<f64> {
        match self {
            Action::Discrete(a) => vec![*a as f64],
            Action::Continuous(a) => a.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    /// Box `[-1, 1]^dim`.
    Continuous(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub next_obs: Array1<f64>,
    pub reward: f64,
    pub done: bool,
    /// `done` was caused by the horizon rather than a terminal state.
    pub truncated: bool,
}

pub trait Environment: Send {
    fn name(&self) -> &'static str;
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    /// Valid (low, high) range of every observation coordinate.
    fn obs_bounds(&self) -> (Array1<f64>, Array1<f64>);
    fn horizon(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Array1<f64>;
    fn step(&mut self, action: &Action) -> Result<EnvStep>;
    /// The true internal state, independent of what the agent observes.
    fn true_state(&self) -> Vec<f64>;
}

/// Environment selection as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Gridworld(#[serde(default)] GridWorldConfig),
    PointMass(#[serde(default)] PointMassConfig),
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvConfig::Gridworld(c) => Box::new(GridWorld::new(c.clone())?),
            EnvConfig::PointMass(c) => Box::new(PointMass::new(c.clone())?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Gridworld(_) => "gridworld",
            EnvConfig::PointMass(_) => "point_mass",
        }
    }
}
