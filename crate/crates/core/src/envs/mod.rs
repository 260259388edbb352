//! Desk-scale environments behind a single reset/step interface.

pub mod pendulum;
pub mod tabular;

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

pub use pendulum::{Pendulum, PendulumParams, PendulumState};
pub use tabular::TabularEnv;

/// Shape of the observation and action spaces.
#[derive(Debug, Clone, PartialEq)]
pub enum SpaceSpec {
    Discrete {
        n_states: usize,
        n_actions: usize,
    },
    Continuous {
        observation_dim: usize,
        action_dim: usize,
        action_bounds: Vec<(f64, f64)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub space: SpaceSpec,
    pub horizon: usize,
    pub gamma_hint: f64,
}

/// One transition as seen by the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult<S> {
    pub observation: S,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    type Obs: Clone;
    type Action: Clone;

    fn spec(&self) -> EnvSpec;

    /// Draws a start state from the fixed initial distribution; the draw and
    /// every later transition are determined by `seed`.
    fn reset(&mut self, seed: u64) -> Self::Obs;

    fn step(&mut self, action: &Self::Action) -> Result<StepResult<Self::Obs>>;

    /// Exact transition model, for tabular environments only.
    fn as_tabular(&self) -> Result<TabularMdp> {
        Err(Error::Unsupported(
            "environment has no finite transition model".into(),
        ))
    }
}

/// Names accepted by [`make_tabular`] and the experiment driver.
pub const ENV_NAMES: &[&str] = &["chain2", "chain5", "gridworld", "pendulum"];

/// Builds a registered tabular environment by name.
pub fn make_tabular(name: &str) -> Result<TabularEnv> {
    match name {
        "chain2" => TabularEnv::chain2(),
        "chain5" => TabularEnv::chain(5),
        "gridworld" => TabularEnv::gridworld(5),
        other => Err(Error::UnknownEnv(other.to_string())),
    }
}
