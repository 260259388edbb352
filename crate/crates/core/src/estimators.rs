//! Trajectory sampling and the sampled gradients of the regularized game.
//!
//! A batch of trajectories is cut into *segments*: k-step paths
//! `s_t, a_t, ..., s_{t+k}, a_{t+k}, s_{t+k+1}`. Each segment carries a
//! sampling `mass` (its share of the start distribution) and a start `weight`
//! (the `alpha_tilde + eta_mu` reweighting that turns expectations under the
//! sampled starts into expectations under `alpha`). Segments cut short by the
//! end of a trajectory use the realized discount `gamma^steps` and bootstrap
//! with `V` at the last state, or with zero when the episode terminated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Environment;
use crate::error::{check_dim, Error, Result};
use crate::function_approx::{softmax, Policy, ValueFunction};

/// A sampled path `s_0, a_0, r_0, ..., a_{n-1}, r_{n-1}, s_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<S, A> {
    pub states: Vec<S>,
    pub actions: Vec<A>,
    pub rewards: Vec<f64>,
    pub start_weight: f64,
    /// The environment reported `done` after the last step.
    pub done: bool,
}

impl<S, A> Trajectory<S, A> {
    pub fn new(states: Vec<S>, actions: Vec<A>, rewards: Vec<f64>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidArgument("trajectory has no steps".into()));
        }
        check_dim(actions.len(), rewards.len())?;
        check_dim(actions.len() + 1, states.len())?;
        Ok(Self {
            states,
            actions,
            rewards,
            start_weight: 1.0,
            done: false,
        })
    }

    /// Number of actions taken.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// SplitMix64 finalizer over `(seed, index)`; gives each trajectory its own
/// stream independent of how the batch is scheduled.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rolls out `m` trajectories of at most `horizon` steps under `policy`.
///
/// Trajectory `l` uses the environment seed `derive_seed(rng_seed, l)` and an
/// action stream derived from it, so batches are reproducible and any prefix
/// of a larger batch equals the smaller batch.
pub fn sample_trajectories<E, P>(
    env: &mut E,
    policy: &P,
    m: usize,
    horizon: usize,
    rng_seed: u64,
) -> Result<Vec<Trajectory<E::Obs, E::Action>>>
where
    E: Environment,
    P: Policy<State = E::Obs, Action = E::Action>,
{
    if m == 0 || horizon == 0 {
        return Err(Error::InvalidArgument(
            "need at least one trajectory of at least one step".into(),
        ));
    }
    let mut out = Vec::with_capacity(m);
    for l in 0..m {
        let env_seed = derive_seed(rng_seed, l as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(env_seed, u64::MAX));
        let mut states = vec![env.reset(env_seed)];
        let mut actions = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        let mut done = false;
        while actions.len() < horizon && !done {
            let a = policy.sample(states.last().expect("nonempty"), &mut rng)?;
            let step = env.step(&a)?;
            actions.push(a);
            rewards.push(step.reward);
            states.push(step.observation);
            done = step.done;
        }
        let mut traj = Trajectory::new(states, actions, rewards)?;
        traj.done = done;
        out.push(traj);
    }
    Ok(out)
}

/// `sum_{i=0}^{min(k, n-1)} gamma^i r_i`; `k = None` sums the whole trajectory.
pub fn mc_return<S, A>(traj: &Trajectory<S, A>, gamma: f64, k: Option<usize>) -> f64 {
    let n = k.map_or(traj.len(), |k| (k + 1).min(traj.len()));
    discounted_sum(&traj.rewards[..n], gamma)
}

fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Where segments start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartMode {
    /// One segment per trajectory, from its first state.
    Initial,
    /// One segment from every visited state, all with equal mass; each
    /// segment's own start stands in for the initial distribution.
    EveryStep,
    /// Back-to-back segments at `t = j (k + 1)` with mass
    /// `(1 - gamma^(k+1)) gamma^t / m`, the discounted occupancy on
    /// `(k + 1)`-step blocks; the initial-distribution term is anchored at
    /// each trajectory's first state.
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub traj: usize,
    pub start: usize,
    /// Actions in the segment: `k + 1`, or fewer at the end of a trajectory.
    pub steps: usize,
    pub mass: f64,
}

/// A squared-error target `(target - V(state))^2` with sampling mass.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySample<S> {
    pub state: S,
    pub target: f64,
    pub mass: f64,
}

/// Segments of a trajectory batch plus their start weights.
#[derive(Debug, Clone)]
pub struct SegmentBatch<'a, S, A> {
    trajs: &'a [Trajectory<S, A>],
    segments: Vec<Segment>,
    weights: Vec<f64>,
    gamma: f64,
    mode: StartMode,
    /// `(trajectory, coefficient)` of the initial-distribution term in block mode.
    anchors: Vec<(usize, f64)>,
}

impl<'a, S, A> SegmentBatch<'a, S, A> {
    /// Cuts `trajs` into k-step segments. In `Initial` mode start weights are
    /// the trajectories' `start_weight`s, in `EveryStep` mode they are 1.
    pub fn new(trajs: &'a [Trajectory<S, A>], gamma: f64, k: usize, mode: StartMode) -> Result<Self> {
        if trajs.is_empty() {
            return Err(Error::InvalidArgument("empty trajectory batch".into()));
        }
        if trajs.iter().any(|t| t.is_empty()) {
            return Err(Error::InvalidArgument("trajectory has no steps".into()));
        }
        let mut segments = Vec::new();
        let mut weights = Vec::new();
        let mut anchors = Vec::new();
        match mode {
            StartMode::Initial => {
                let mass = 1.0 / trajs.len() as f64;
                for (l, t) in trajs.iter().enumerate() {
                    segments.push(Segment {
                        traj: l,
                        start: 0,
                        steps: (k + 1).min(t.len()),
                        mass,
                    });
                    weights.push(t.start_weight);
                }
            }
            StartMode::EveryStep => {
                let total: usize = trajs.iter().map(|t| t.len()).sum();
                let mass = 1.0 / total as f64;
                for (l, t) in trajs.iter().enumerate() {
                    for start in 0..t.len() {
                        segments.push(Segment {
                            traj: l,
                            start,
                            steps: (k + 1).min(t.len() - start),
                            mass,
                        });
                        weights.push(1.0);
                    }
                }
            }
            StartMode::Block => {
                let m = trajs.len() as f64;
                let head = 1.0 - gamma.powf(k as f64 + 1.0);
                for (l, t) in trajs.iter().enumerate() {
                    anchors.push((l, head / m));
                    let mut start = 0;
                    while start < t.len() {
                        let steps = (k + 1).min(t.len() - start);
                        segments.push(Segment {
                            traj: l,
                            start,
                            steps,
                            mass: head * gamma.powi(start as i32) / m,
                        });
                        weights.push(1.0);
                        start += steps;
                    }
                }
            }
        }
        Ok(Self {
            trajs,
            segments,
            weights,
            gamma,
            mode,
            anchors,
        })
    }

    /// One full-length segment per trajectory with explicit masses, for
    /// exhaustive expectations over enumerated paths.
    pub fn with_masses(trajs: &'a [Trajectory<S, A>], gamma: f64, masses: &[f64]) -> Result<Self> {
        check_dim(trajs.len(), masses.len())?;
        let mut batch = Self::new(trajs, gamma, usize::MAX - 1, StartMode::Initial)?;
        for (seg, m) in batch.segments.iter_mut().zip(masses) {
            seg.mass = *m;
        }
        Ok(batch)
    }

    pub fn trajectories(&self) -> &'a [Trajectory<S, A>] {
        self.trajs
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        check_dim(self.segments.len(), weights.len())?;
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("start weights must be nonnegative".into()));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn start_state(&self, seg: &Segment) -> &S {
        &self.trajs[seg.traj].states[seg.start]
    }

    /// `V` at every state of every trajectory.
    pub fn state_values<V: ValueFunction<S>>(&self, v: &V) -> Result<Vec<Vec<f64>>> {
        let mut scratch = vec![0.0; v.params().len()];
        self.trajs
            .iter()
            .map(|t| {
                t.states
                    .iter()
                    .map(|s| v.value_and_grad(s, &mut scratch))
                    .collect()
            })
            .collect()
    }

    /// `delta` of every segment given [`state_values`](Self::state_values).
    pub fn mode(&self) -> StartMode {
        self.mode
    }

    /// The segment runs into the end of an episode that terminated.
    fn ends_terminal(&self, seg: &Segment) -> bool {
        let t = &self.trajs[seg.traj];
        t.done && seg.start + seg.steps == t.len()
    }

    pub fn deltas(&self, values: &[Vec<f64>]) -> Vec<f64> {
        self.segments
            .iter()
            .map(|seg| {
                let t = &self.trajs[seg.traj];
                let vals = &values[seg.traj];
                let r = discounted_sum(&t.rewards[seg.start..seg.start + seg.steps], self.gamma);
                let tail = if self.ends_terminal(seg) {
                    0.0
                } else {
                    self.gamma.powi(seg.steps as i32) * vals[seg.start + seg.steps]
                };
                r + tail - vals[seg.start]
            })
            .collect()
    }

    /// Mass-weighted mean of `values` over segments whose start state maps to
    /// each key; `None` for keys with no segment.
    pub fn mean_by_start(
        &self,
        values: &[f64],
        n_keys: usize,
        key: impl Fn(&S) -> usize,
    ) -> Result<Vec<Option<f64>>> {
        check_dim(self.segments.len(), values.len())?;
        let mut sum = vec![0.0; n_keys];
        let mut mass = vec![0.0; n_keys];
        for (seg, x) in self.segments.iter().zip(values) {
            let k = key(self.start_state(seg));
            if k >= n_keys {
                return Err(Error::InvalidArgument(format!("key {k} out of range")));
            }
            sum[k] += seg.mass * x;
            mass[k] += seg.mass;
        }
        Ok(sum
            .iter()
            .zip(&mass)
            .map(|(s, m)| (*m > 0.0).then(|| s / m))
            .collect())
    }

    /// `sum_seg mass * weight * delta`, the sampled `E_alpha^pi[delta]`.
    pub fn weighted_delta(&self, deltas: &[f64]) -> f64 {
        self.segments
            .iter()
            .zip(&self.weights)
            .zip(deltas)
            .map(|((seg, w), d)| seg.mass * w * d)
            .sum()
    }

    /// `sum_seg mass * weight * delta * sum_i grad log pi(a_i | s_i)`.
    pub fn grad_pi<P>(&self, deltas: &[f64], policy: &P) -> Result<Vec<f64>>
    where
        P: Policy<State = S, Action = A>,
    {
        check_dim(self.segments.len(), deltas.len())?;
        // Collapse segments into one coefficient per visited step.
        let mut coef: Vec<Vec<f64>> = self.trajs.iter().map(|t| vec![0.0; t.len()]).collect();
        for ((seg, w), d) in self.segments.iter().zip(&self.weights).zip(deltas) {
            let c = seg.mass * w * d;
            for x in &mut coef[seg.traj][seg.start..seg.start + seg.steps] {
                *x += c;
            }
        }
        let mut grad = vec![0.0; policy.n_params()];
        let mut score = vec![0.0; policy.n_params()];
        for (t, cs) in self.trajs.iter().zip(&coef) {
            for (i, c) in cs.iter().enumerate() {
                if *c == 0.0 {
                    continue;
                }
                policy.log_prob_and_grad(&t.states[i], &t.actions[i], &mut score)?;
                for (g, s) in grad.iter_mut().zip(&score) {
                    *g += c * s;
                }
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite policy gradient".into()));
        }
        Ok(grad)
    }

    /// Coefficients of the linear part of the sampled Lagrangian in `V`: the
    /// returned list pairs a state reference with the weight `V(state)` gets.
    /// `(state, coefficient)` pairs of the part of the objective linear in `V`.
    ///
    /// In block mode the last segment of a time-limited trajectory keeps its
    /// bootstrap out of the linear part: the missing later blocks would cancel it.
    fn linear_terms(&self) -> Vec<(&S, f64)> {
        let mut out = Vec::with_capacity(2 * self.segments.len() + self.anchors.len());
        for (seg, w) in self.segments.iter().zip(&self.weights) {
            let t = &self.trajs[seg.traj];
            let disc = self.gamma.powi(seg.steps as i32);
            let own = match self.mode {
                StartMode::Block => 0.0,
                StartMode::Initial | StartMode::EveryStep => 1.0 - disc,
            };
            out.push((&t.states[seg.start], seg.mass * (own - w)));
            let at_end = seg.start + seg.steps == t.len();
            let open = !self.ends_terminal(seg) && !(self.mode == StartMode::Block && at_end);
            if open {
                out.push((&t.states[seg.start + seg.steps], seg.mass * w * disc));
            }
        }
        for &(l, c) in &self.anchors {
            out.push((&self.trajs[l].states[0], c));
        }
        out
    }

    /// Sampled regularized Lagrangian as a function of `V`, omitting terms
    /// [`linear_terms`](Self::linear_terms) holds fixed.
    pub fn objective_v<V: ValueFunction<S>>(
        &self,
        v: &V,
        penalty: &[PenaltySample<S>],
        eta_v: f64,
    ) -> Result<f64> {
        let mut scratch = vec![0.0; v.params().len()];
        let mut total = 0.0;
        for (seg, w) in self.segments.iter().zip(&self.weights) {
            let t = &self.trajs[seg.traj];
            let r = discounted_sum(&t.rewards[seg.start..seg.start + seg.steps], self.gamma);
            total += seg.mass * w * r;
        }
        for (s, c) in self.linear_terms() {
            total += c * v.value_and_grad(s, &mut scratch)?;
        }
        for p in penalty {
            let resid = p.target - v.value_and_grad(&p.state, &mut scratch)?;
            total += eta_v * p.mass * resid * resid;
        }
        Ok(total)
    }

    /// Gradient of [`objective_v`](Self::objective_v) in the value parameters.
    pub fn grad_v<V: ValueFunction<S>>(
        &self,
        v: &V,
        penalty: &[PenaltySample<S>],
        eta_v: f64,
    ) -> Result<Vec<f64>> {
        let n = v.params().len();
        let mut grad = vec![0.0; n];
        let mut phi = vec![0.0; n];
        for (s, c) in self.linear_terms() {
            v.value_and_grad(s, &mut phi)?;
            for (g, f) in grad.iter_mut().zip(&phi) {
                *g += c * f;
            }
        }
        for p in penalty {
            let val = v.value_and_grad(&p.state, &mut phi)?;
            let c = -2.0 * eta_v * p.mass * (p.target - val);
            for (g, f) in grad.iter_mut().zip(&phi) {
                *g += c * f;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite value gradient".into()));
        }
        Ok(grad)
    }

    /// Per-parameter linear coefficient `b` of the objective for a linear
    /// value function with feature map `features`: the objective's linear
    /// part is `b . theta`.
    pub fn linear_coefficient<F>(&self, features: F, dim: usize) -> Result<Vec<f64>>
    where
        F: Fn(&S, &mut [f64]) -> Result<()>,
    {
        let mut b = vec![0.0; dim];
        let mut phi = vec![0.0; dim];
        for (s, c) in self.linear_terms() {
            features(s, &mut phi)?;
            for (bi, f) in b.iter_mut().zip(&phi) {
                *bi += c * f;
            }
        }
        Ok(b)
    }
}

/// Penalty samples at the trajectory starts (`Initial`) or at every visited
/// state (otherwise), targeting the discounted
/// return-to-go. With `bootstrap`, a trajectory's tail beyond its last state is
/// filled in with `gamma^remaining * bootstrap(s_n)`.
pub fn penalty_samples<S: Clone, A>(
    trajs: &[Trajectory<S, A>],
    gamma: f64,
    mode: StartMode,
    bootstrap: Option<&dyn Fn(&S) -> Result<f64>>,
) -> Result<Vec<PenaltySample<S>>> {
    if trajs.is_empty() {
        return Err(Error::InvalidArgument("empty behavior batch".into()));
    }
    let mut out = Vec::new();
    let total: usize = trajs.iter().map(|t| t.len()).sum();
    for t in trajs {
        let tail = match bootstrap {
            Some(f) if !t.done => f(t.states.last().expect("nonempty"))?,
            _ => 0.0,
        };
        match mode {
            StartMode::Initial => out.push(PenaltySample {
                state: t.states[0].clone(),
                target: discounted_sum(&t.rewards, gamma) + gamma.powi(t.len() as i32) * tail,
                mass: 1.0 / trajs.len() as f64,
            }),
            StartMode::EveryStep | StartMode::Block => {
                let mut g = tail;
                let mut rev = Vec::with_capacity(t.len());
                for i in (0..t.len()).rev() {
                    g = t.rewards[i] + gamma * g;
                    rev.push(PenaltySample {
                        state: t.states[i].clone(),
                        target: g,
                        mass: 1.0 / total as f64,
                    });
                }
                out.extend(rev.into_iter().rev());
            }
        }
    }
    Ok(out)
}

/// `alpha_tilde = max(0, mean delta) / eta_alpha`, pointwise.
pub fn alpha_closed_form(delta_means: &[f64], eta_alpha: f64) -> Result<Vec<f64>> {
    if !(eta_alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eta_alpha must be positive, got {eta_alpha}"
        )));
    }
    Ok(delta_means.iter().map(|d| d.max(0.0) / eta_alpha).collect())
}

/// The inner objective `alpha_tilde * E[delta] - c * eta_alpha * alpha_tilde^2`
/// maximized by the closed form. `c = 1/2` makes [`alpha_closed_form`] its
/// exact maximizer over `alpha_tilde >= 0`; with `c = 1` the maximizer is
/// half as large.
pub fn alpha_objective(alpha_tilde: f64, mean_delta: f64, eta_alpha: f64, c: f64) -> f64 {
    alpha_tilde * mean_delta - c * eta_alpha * alpha_tilde * alpha_tilde
}

/// Sampled `sum mass * weight * delta_k * grad log alpha(s_0)` for a softmax
/// state weighting `alpha = softmax(alpha_logits)`, from trajectory starts.
pub fn grad_alpha_estimate<A, V: ValueFunction<usize>>(
    trajs: &[Trajectory<usize, A>],
    v: &V,
    alpha_logits: &[f64],
    gamma: f64,
    k: usize,
) -> Result<Vec<f64>> {
    let batch = SegmentBatch::new(trajs, gamma, k, StartMode::Initial)?;
    let deltas = batch.deltas(&batch.state_values(v)?);
    grad_log_alpha(&batch, &deltas, alpha_logits)
}

/// `sum mass * weight * delta * grad log alpha(s_0)` over an arbitrary
/// segment batch of a finite state space.
pub fn grad_log_alpha<A>(
    batch: &SegmentBatch<'_, usize, A>,
    deltas: &[f64],
    alpha_logits: &[f64],
) -> Result<Vec<f64>> {
    check_dim(batch.segments().len(), deltas.len())?;
    let alpha = softmax(alpha_logits);
    let mut grad = vec![0.0; alpha.len()];
    for ((seg, w), d) in batch.segments().iter().zip(batch.weights()).zip(deltas) {
        let s0 = *batch.start_state(seg);
        if s0 >= alpha.len() {
            return Err(Error::InvalidArgument(format!("state {s0} out of range")));
        }
        let c = seg.mass * w * d;
        for (g, a) in grad.iter_mut().zip(&alpha) {
            *g -= c * a;
        }
        grad[s0] += c;
    }
    Ok(grad)
}

/// Sampled `sum_l start_weight_l delta_k(tau_l) sum_i grad log pi(a_i | s_i) / m`.
pub fn grad_pi_estimate<P, V>(
    trajs: &[Trajectory<P::State, P::Action>],
    v: &V,
    policy: &P,
    gamma: f64,
    k: usize,
) -> Result<Vec<f64>>
where
    P: Policy,
    V: ValueFunction<P::State>,
{
    let batch = SegmentBatch::new(trajs, gamma, k, StartMode::Initial)?;
    let deltas = batch.deltas(&batch.state_values(v)?);
    batch.grad_pi(&deltas, policy)
}

/// Sampled gradient of `L_r` in the value parameters, with the penalty's
/// infinite return replaced by the full Monte Carlo return of each behavior
/// trajectory.
pub fn grad_v_estimate<S: Clone, A, V: ValueFunction<S>>(
    trajs: &[Trajectory<S, A>],
    behavior_trajs: &[Trajectory<S, A>],
    v: &V,
    gamma: f64,
    k: usize,
    eta_v: f64,
) -> Result<Vec<f64>> {
    let batch = SegmentBatch::new(trajs, gamma, k, StartMode::Initial)?;
    let penalty = if eta_v > 0.0 {
        penalty_samples(behavior_trajs, gamma, StartMode::Initial, None)?
    } else {
        Vec::new()
    };
    batch.grad_v(v, &penalty, eta_v)
}
