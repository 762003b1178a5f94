//! Desk-scale laboratory for reinforcement learning under adversarial
//! perturbations of state observations.
//!
//! The crate is organised bottom-up:
//!
//! * [`tabular`] — exact finite state-adversarial MDP solvers.
//! * [`net`] — small fully-connected networks with analytic gradients and Adam.
//! * [`relax`] — sound output bounds over ℓ∞ input balls (interval and
//!   backward linear relaxation), differentiable with respect to the weights.
//! * [`optim`] — inner maximisation over perturbation balls (SGLD, PGD).
//! * [`envs`] — the three-state toy MDP, a gridworld and a point-mass.
//! * [`agents`] — DQN / DDPG / PPO with state-adversarial regularizers and
//!   robustness certificates.
//! * [`attacks`] — observation-space attacks and the evaluation harness.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iterators otherwise.

pub mod agents;
pub mod attacks;
pub mod envs;
mod error;
pub mod net;
pub mod optim;
pub mod par;
pub mod relax;
pub mod seed;
pub mod tabular;

pub use error::{Error, Result};
