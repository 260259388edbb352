//! Torque-limited pendulum swing-up (the classic-control convention).
//!
//! `theta = 0` is upright. Observations are `(cos theta, sin theta, theta_dot)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvSpec, Environment, SpaceSpec, StepResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumParams {
    pub g: f64,
    pub m: f64,
    pub l: f64,
    pub dt: f64,
    pub max_torque: f64,
    pub max_speed: f64,
    pub horizon: usize,
    /// Initial angular velocity is uniform on `[-init_speed, init_speed]`.
    pub init_speed: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            g: 10.0,
            m: 1.0,
            l: 1.0,
            dt: 0.05,
            max_torque: 2.0,
            max_speed: 8.0,
            horizon: 200,
            init_speed: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let mut x = theta.rem_euclid(2.0 * PI);
    if x > PI {
        x -= 2.0 * PI;
    }
    x
}

#[derive(Debug, Clone)]
pub struct Pendulum {
    params: PendulumParams,
    state: PendulumState,
    t: usize,
    finished: bool,
    clipped_steps: usize,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Result<Self> {
        let positive = [params.g, params.m, params.l, params.dt, params.max_torque, params.max_speed];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) || params.horizon == 0 {
            return Err(Error::InvalidArgument(format!(
                "pendulum parameters must be positive and finite: {params:?}"
            )));
        }
        if !(params.init_speed >= 0.0 && params.init_speed <= params.max_speed) {
            return Err(Error::InvalidArgument(
                "init_speed must lie in [0, max_speed]".into(),
            ));
        }
        Ok(Self {
            params,
            state: PendulumState {
                theta: 0.0,
                theta_dot: 0.0,
            },
            t: 0,
            finished: true,
            clipped_steps: 0,
        })
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }

    pub fn state(&self) -> PendulumState {
        self.state
    }

    /// Places the pendulum in an explicit state and starts a fresh episode.
    pub fn set_state(&mut self, state: PendulumState) {
        self.state = PendulumState {
            theta: wrap_angle(state.theta),
            theta_dot: state.theta_dot.clamp(-self.params.max_speed, self.params.max_speed),
        };
        self.t = 0;
        self.finished = false;
    }

    /// Number of steps whose torque had to be clipped since the last reset.
    pub fn clipped_steps(&self) -> usize {
        self.clipped_steps
    }

    pub fn observation(&self) -> Vec<f64> {
        let PendulumState { theta, theta_dot } = self.state;
        vec![theta.cos(), theta.sin(), theta_dot]
    }

    /// Per-step reward of the current state under torque `u` (already clipped).
    pub fn reward(state: PendulumState, u: f64) -> f64 {
        let th = wrap_angle(state.theta);
        -(th * th + 0.1 * state.theta_dot * state.theta_dot + 0.001 * u * u)
    }

    /// Mechanical energy per unit inertia; constant along frictionless,
    /// unforced, unclamped trajectories.
    pub fn energy(&self, state: PendulumState) -> f64 {
        let p = &self.params;
        0.5 * state.theta_dot * state.theta_dot + 1.5 * p.g / p.l * state.theta.cos()
    }
}

impl Environment for Pendulum {
    type Obs = Vec<f64>;
    type Action = Vec<f64>;

    fn spec(&self) -> EnvSpec {
        EnvSpec {
            space: SpaceSpec::Continuous {
                observation_dim: 3,
                action_dim: 1,
                action_bounds: vec![(-self.params.max_torque, self.params.max_torque)],
            },
            horizon: self.params.horizon,
            gamma_hint: 0.995,
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // (-pi, pi]: reflect the half-open [0, 1) draw.
        let theta = PI - 2.0 * PI * rng.random::<f64>();
        let theta_dot = self.params.init_speed * (2.0 * rng.random::<f64>() - 1.0);
        self.state = PendulumState { theta, theta_dot };
        self.t = 0;
        self.finished = false;
        self.clipped_steps = 0;
        self.observation()
    }

    fn step(&mut self, action: &Vec<f64>) -> Result<StepResult<Vec<f64>>> {
        if self.finished {
            return Err(Error::InvalidState("episode is finished; call reset".into()));
        }
        if action.len() != 1 || !action[0].is_finite() {
            return Err(Error::InvalidArgument(format!(
                "pendulum expects one finite torque, got {action:?}"
            )));
        }
        let p = &self.params;
        let u = action[0].clamp(-p.max_torque, p.max_torque);
        if u != action[0] {
            self.clipped_steps += 1;
        }
        let reward = Self::reward(self.state, u);
        let PendulumState { theta, theta_dot } = self.state;
        let accel = 1.5 * p.g / p.l * theta.sin() + 3.0 / (p.m * p.l * p.l) * u;
        let theta_dot = (theta_dot + accel * p.dt).clamp(-p.max_speed, p.max_speed);
        let theta = wrap_angle(theta + theta_dot * p.dt);
        self.state = PendulumState { theta, theta_dot };
        self.t += 1;
        self.finished = self.t >= p.horizon;
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.finished,
        })
    }
}
