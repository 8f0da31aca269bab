//! Local-to-global world models with uncertainty-weighted synthetic replay
//! for offline multi-agent reinforcement learning.
//!
//! The pipeline: per-agent local predictive models forecast each agent's next
//! observation from the global state and that agent's observation-action
//! pair; a deductive model maps the concatenated predicted observations back
//! to a global next state and shared reward. The gap between the deduced
//! state and an auxiliary direct state head gives a per-transition
//! uncertainty `u`, which prices synthetic rollout data for a conservative
//! Q-learning policy trainer.
//!
//! Layout:
//! - [`tensor`]: dense arrays, reverse-mode autodiff, Adam, gradient checks
//! - [`nn`]: parameter stores and MLP builders on top of the tape
//! - [`env`]: particle navigation Dec-POMDP plus a tabular MDP for oracles
//! - [`dataset`]: offline data collection, persistence, splits
//! - [`world`]: the world model (losses, training, inference)
//! - [`rollout`]: synthetic buffers, priorities, weighted sampling
//! - [`policy`]: conservative Q-learning with behavior cloning and MPC
//! - [`oracle`]: value iteration, bound checks, baselines, PCA
//! - [`config`] / [`cli`] / [`report`]: experiment harness

pub mod cli;
pub mod config;
pub mod dataset;
pub mod env;
pub mod io;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod report;
pub mod rng;
pub mod rollout;
pub mod stats;
pub mod tensor;
pub mod world;
