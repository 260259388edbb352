//! Finite environments simulated from an explicit `TabularMdp`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSpec, Environment, SpaceSpec, StepResult};
use crate::error::{Error, Result};
use crate::lagrangian::sample_index;
use crate::mdp::TabularMdp;

/// A simulator for a finite MDP with a fixed episode horizon.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    mdp: TabularMdp,
    horizon: usize,
    rng: ChaCha8Rng,
    state: usize,
    t: usize,
    finished: bool,
}

impl TabularEnv {
    pub fn new(mdp: TabularMdp, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        Ok(Self {
            mdp,
            horizon,
            rng: ChaCha8Rng::seed_from_u64(0),
            state: 0,
            t: 0,
            // Stepping before the first reset is an error.
            finished: true,
        })
    }

    /// The hand-solvable two-state chain, horizon 50.
    pub fn chain2() -> Result<Self> {
        Self::new(two_state_chain_mdp(0.9), 50)
    }

    /// An `n`-state slippery chain, horizon 100.
    pub fn chain(n: usize) -> Result<Self> {
        Self::new(chain_mdp(n, 0.9, 0.1)?, 100)
    }

    /// A `size x size` gridworld with an absorbing goal, horizon 100.
    pub fn gridworld(size: usize) -> Result<Self> {
        Self::new(gridworld_mdp(size, 0.9, 0.1)?, 100)
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl Environment for TabularEnv {
    type Obs = usize;
    type Action = usize;

    fn spec(&self) -> EnvSpec {
        EnvSpec {
            space: SpaceSpec::Discrete {
                n_states: self.mdp.n_states(),
                n_actions: self.mdp.n_actions(),
            },
            horizon: self.horizon,
            gamma_hint: self.mdp.gamma(),
        }
    }

    fn reset(&mut self, seed: u64) -> usize {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let u: f64 = self.rng.random();
        self.state = sample_index(self.mdp.mu(), u);
        self.t = 0;
        self.finished = false;
        self.state
    }

    fn step(&mut self, action: &usize) -> Result<StepResult<usize>> {
        if self.finished {
            return Err(Error::InvalidState("episode is finished; call reset".into()));
        }
        let a = *action;
        if a >= self.mdp.n_actions() {
            return Err(Error::InvalidArgument(format!(
                "action {a} out of range for {} actions",
                self.mdp.n_actions()
            )));
        }
        let reward = self.mdp.reward(self.state, a);
        let u: f64 = self.rng.random();
        self.state = sample_index(self.mdp.next_dist(self.state, a), u);
        self.t += 1;
        self.finished = self.t >= self.horizon;
        Ok(StepResult {
            observation: self.state,
            reward,
            done: self.finished,
        })
    }

    fn as_tabular(&self) -> Result<TabularMdp> {
        Ok(self.mdp.clone())
    }
}

/// One state, one action, reward 1, self-loop.
pub fn single_state_mdp(gamma: f64) -> TabularMdp {
    TabularMdp::new(1, 1, vec![1.0], vec![1.0], gamma, vec![1.0]).expect("valid MDP")
}

/// `s0 --a1 (R=0)--> s1`; `a0` self-loops at `s0` with `R=0`; `s1` self-loops
/// with `R=1` under both actions. Starts in `s0`.
pub fn two_state_chain_mdp(gamma: f64) -> TabularMdp {
    #[rustfmt::skip]
    let transition = vec![
        1.0, 0.0,   0.0, 1.0,
        0.0, 1.0,   0.0, 1.0,
    ];
    let reward = vec![0.0, 0.0, 1.0, 1.0];
    TabularMdp::new(2, 2, transition, reward, gamma, vec![1.0, 0.0]).expect("valid MDP")
}

/// Slippery `n`-state chain starting at state 0.
///
/// Action 0 moves right (staying put at the end, where it pays 1); action 1
/// returns to state 0 and pays 0.2. With probability `slip` the other action's
/// effect happens instead, reward unchanged.
pub fn chain_mdp(n: usize, gamma: f64, slip: f64) -> Result<TabularMdp> {
    if n < 2 {
        return Err(Error::InvalidArgument("a chain needs at least 2 states".into()));
    }
    if !(0.0..=1.0).contains(&slip) {
        return Err(Error::InvalidArgument(format!("slip {slip} outside [0, 1]")));
    }
    let mut transition = vec![0.0; n * 2 * n];
    let mut reward = vec![0.0; n * 2];
    for s in 0..n {
        let right = (s + 1).min(n - 1);
        for a in 0..2 {
            let row = &mut transition[(s * 2 + a) * n..(s * 2 + a + 1) * n];
            let (intended, other) = if a == 0 { (right, 0) } else { (0, right) };
            row[intended] += 1.0 - slip;
            row[other] += slip;
        }
        reward[s * 2] = if s == n - 1 { 1.0 } else { 0.0 };
        reward[s * 2 + 1] = 0.2;
    }
    let mut mu = vec![0.0; n];
    mu[0] = 1.0;
    TabularMdp::new(n, 2, transition, reward, gamma, mu)
}

/// Compass moves on a `size x size` grid, in the order up, right, down, left.
const MOVES: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

/// Gridworld with the goal in the bottom-right corner and start in the top-left.
///
/// A move goes in the intended direction with probability `1 - slip` and in
/// each perpendicular direction with probability `slip / 2`; bumping a wall
/// stays put. Entering the goal pays 1, so `R(s, a) = P(goal | s, a)`. The goal
/// is an absorbing zero-reward self-loop.
pub fn gridworld_mdp(size: usize, gamma: f64, slip: f64) -> Result<TabularMdp> {
    if size < 2 {
        return Err(Error::InvalidArgument("grid side must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&slip) {
        return Err(Error::InvalidArgument(format!("slip {slip} outside [0, 1]")));
    }
    let n = size * size;
    let goal = n - 1;
    let target = |s: usize, m: usize| -> usize {
        let (r, c) = ((s / size) as isize, (s % size) as isize);
        let (dr, dc) = MOVES[m];
        let (nr, nc) = (r + dr, c + dc);
        if nr < 0 || nc < 0 || nr >= size as isize || nc >= size as isize {
            s
        } else {
            nr as usize * size + nc as usize
        }
    };
    let mut transition = vec![0.0; n * 4 * n];
    let mut reward = vec![0.0; n * 4];
    for s in 0..n {
        for a in 0..4 {
            let row = &mut transition[(s * 4 + a) * n..(s * 4 + a + 1) * n];
            if s == goal {
                row[goal] = 1.0;
                continue;
            }
            row[target(s, a)] += 1.0 - slip;
            row[target(s, (a + 1) % 4)] += slip / 2.0;
            row[target(s, (a + 3) % 4)] += slip / 2.0;
            reward[s * 4 + a] = row[goal];
        }
    }
    let mut mu = vec![0.0; n];
    mu[0] = 1.0;
    TabularMdp::new(n, 4, transition, reward, gamma, mu)
}
