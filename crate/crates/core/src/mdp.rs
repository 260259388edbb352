//! Finite MDPs, Bellman optimality operators and exact tabular oracles.
//!
//! Everything here is a pure function of its inputs. The oracles (value
//! iteration for the primal LP, the occupancy measure of the greedy policy for
//! the dual LP) are the ground truth the stochastic machinery is checked
//! against.

use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{check_dim, Error, Result};

const STOCHASTIC_TOL: f64 = 1e-12;
/// Relative slack under which two action values count as tied.
const TIE_EPS: f64 = 1e-12;

/// A discounted MDP with finite state and action spaces.
///
/// Transitions are stored densely as `[s][a][s']`, rewards as `[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    mu: Vec<f64>,
}

impl TabularMdp {
    /// Builds an MDP from flat row-major buffers, validating every invariant.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        mu: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidArgument(
                "an MDP needs at least one state and one action".into(),
            ));
        }
        check_dim(n_states * n_actions * n_states, transition.len())?;
        check_dim(n_states * n_actions, reward.len())?;
        check_dim(n_states, mu.len())?;
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "discount must lie strictly inside (0, 1), got {gamma}"
            )));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidArgument("rewards must be finite".into()));
        }
        for (row_idx, row) in transition.chunks(n_states).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "negative transition probability in (s, a) = ({}, {})",
                    row_idx / n_actions,
                    row_idx % n_actions
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidArgument(format!(
                    "transition row (s, a) = ({}, {}) sums to {total}",
                    row_idx / n_actions,
                    row_idx % n_actions
                )));
            }
        }
        if mu.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidArgument(
                "initial distribution has a negative entry".into(),
            ));
        }
        let mass: f64 = mu.iter().sum();
        if (mass - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidArgument(format!(
                "initial distribution sums to {mass}"
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            mu,
        })
    }

    /// Random MDP with Dirichlet(1)-like transition rows, rewards in `[0, 1)`
    /// and a random full-support initial distribution.
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let row: Vec<f64> = (0..n_states)
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            transition.extend(normalized(&row));
        }
        let reward = (0..n_states * n_actions).map(|_| rng.random()).collect();
        let mu_raw: Vec<f64> = (0..n_states).map(|_| 0.1 + rng.random::<f64>()).collect();
        Self::new(
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            normalized(&mu_raw),
        )
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// Row-major `[s][a]` reward buffer.
    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// Row-major `[s][a][s']` transition buffer.
    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    /// The next-state distribution `P(. | s, a)`.
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Same dynamics with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            gamma,
            self.mu.clone(),
        )
    }

    /// Same dynamics with a different initial distribution.
    pub fn with_mu(&self, mu: Vec<f64>) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            self.gamma,
            mu,
        )
    }

    fn expect_next(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.next_dist(s, a).iter().zip(v).map(|(p, x)| p * x).sum()
    }
}

fn normalized(xs: &[f64]) -> Vec<f64> {
    let total: f64 = xs.iter().sum();
    let mut out: Vec<f64> = xs.iter().map(|x| x / total).collect();
    // Push the rounding residue into the largest entry so the sum is 1 to the ulp.
    let residue = 1.0 - out.iter().sum::<f64>();
    if let Some(max) = out
        .iter_mut()
        .max_by(|a, b| a.partial_cmp(b).expect("finite"))
    {
        *max += residue;
    }
    out
}

/// A state-value function, one entry per state.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueVector(pub Vec<f64>);

impl ValueVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self(vec![c; n])
    }

    /// Sup-norm distance to another vector of the same length.
    pub fn sup_dist(&self, other: &ValueVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `E_mu[v]`.
    pub fn expect(&self, dist: &[f64]) -> f64 {
        self.0.iter().zip(dist).map(|(v, p)| v * p).sum()
    }
}

impl Deref for ValueVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ValueVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ValueVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Conditional action probabilities `pi(a | s)`, row-major `[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        check_dim(n_states * n_actions, probs.len())?;
        for (s, row) in probs.chunks(n_actions.max(1)).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "negative probability in policy row {s}"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidArgument(format!(
                    "policy row {s} sums to {total}"
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Deterministic policy choosing `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::InvalidArgument(format!(
                    "action {a} out of range in state {s}"
                )));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(Self {
            n_states: actions.len(),
            n_actions,
            probs,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index of the most likely action in `s` (lowest index on ties).
    pub fn mode(&self, s: usize) -> usize {
        argmax(self.row(s))
    }
}

/// Discounted state-action occupancy `rho(s, a)`, row-major `[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    n_states: usize,
    n_actions: usize,
    rho: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn new(n_states: usize, n_actions: usize, rho: Vec<f64>) -> Result<Self> {
        check_dim(n_states * n_actions, rho.len())?;
        if let Some(idx) = rho.iter().position(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "occupancy entry ({}, {}) is negative",
                idx / n_actions,
                idx % n_actions
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            rho,
        })
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.rho[s * self.n_actions + a]
    }

    pub fn values(&self) -> &[f64] {
        &self.rho
    }

    pub fn total(&self) -> f64 {
        self.rho.iter().sum()
    }

    /// State marginal `sum_a rho(s, a)`.
    pub fn state_marginal(&self) -> Vec<f64> {
        self.rho
            .chunks(self.n_actions)
            .map(|row| row.iter().sum())
            .collect()
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] + TIE_EPS * (1.0 + xs[best].abs()) {
            best = i;
        }
    }
    best
}

/// `Q(s, a) = R(s, a) + gamma * E[v(s')]`, row-major `[s][a]`.
pub fn q_values(mdp: &TabularMdp, v: &[f64]) -> Result<Vec<f64>> {
    check_dim(mdp.n_states, v.len())?;
    let mut q = Vec::with_capacity(mdp.n_states * mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            q.push(mdp.reward(s, a) + mdp.gamma * mdp.expect_next(s, a, v));
        }
    }
    Ok(q)
}

/// One application of the Bellman optimality operator.
pub fn bellman_optimality_operator(mdp: &TabularMdp, v: &ValueVector) -> Result<ValueVector> {
    let q = q_values(mdp, v)?;
    Ok(ValueVector(
        q.chunks(mdp.n_actions)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    ))
}

/// The k-step operator: `k + 1` compositions of the one-step operator.
pub fn k_step_bellman(mdp: &TabularMdp, v: &ValueVector, k: usize) -> Result<ValueVector> {
    let mut out = bellman_optimality_operator(mdp, v)?;
    for _ in 0..k {
        out = bellman_optimality_operator(mdp, &out)?;
    }
    Ok(out)
}

/// Geometric `(1 - lambda) lambda^k` mixture of the k-step operators,
/// truncated at `k_max` with the remaining tail mass `lambda^k_max` placed on
/// the last term.
pub fn lambda_bellman(
    mdp: &TabularMdp,
    v: &ValueVector,
    lambda: f64,
    k_max: usize,
) -> Result<ValueVector> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in [0, 1), got {lambda}"
        )));
    }
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be positive".into()));
    }
    let mut acc = vec![0.0; mdp.n_states];
    let mut current = bellman_optimality_operator(mdp, v)?;
    let mut weight_k = 1.0 - lambda;
    for k in 0..=k_max {
        let w = if k == k_max {
            lambda.powi(k_max as i32)
        } else {
            weight_k
        };
        for (a, c) in acc.iter_mut().zip(current.iter()) {
            *a += w * c;
        }
        if k < k_max {
            current = bellman_optimality_operator(mdp, &current)?;
            weight_k *= lambda;
        }
    }
    Ok(ValueVector(acc))
}

/// Iterates the Bellman optimality operator from zero until
/// `||T v - v||_inf <= tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<ValueVector> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let mut v = ValueVector::zeros(mdp.n_states);
    loop {
        let next = bellman_optimality_operator(mdp, &v)?;
        let residual = next.sup_dist(&v);
        if residual <= tol {
            return Ok(v);
        }
        // Floating point may stall just above a tolerance near machine precision.
        if residual <= 4.0 * f64::EPSILON * next.iter().fold(1.0, |m, x| f64::max(m, x.abs())) {
            return Ok(next);
        }
        v = next;
    }
}

/// Deterministic policy greedy with respect to `v`; ties go to the lowest
/// action index.
pub fn greedy_policy(mdp: &TabularMdp, v: &ValueVector) -> Result<TabularPolicy> {
    let q = q_values(mdp, v)?;
    let actions: Vec<usize> = q.chunks(mdp.n_actions).map(argmax).collect();
    TabularPolicy::deterministic(mdp.n_actions, &actions)
}

fn check_policy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<()> {
    check_dim(mdp.n_states, policy.n_states)?;
    check_dim(mdp.n_actions, policy.n_actions)
}

/// State-to-state transition matrix `P^pi[s][s']` under `policy`.
pub fn policy_transition_matrix(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<DMatrix<f64>> {
    check_policy(mdp, policy)?;
    let n = mdp.n_states;
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for (s2, &q) in mdp.next_dist(s, a).iter().enumerate() {
                p[(s, s2)] += pa * q;
            }
        }
    }
    Ok(p)
}

/// Exact `V^pi` by solving `(I - gamma P^pi) V = r^pi`.
pub fn policy_value(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<ValueVector> {
    let p = policy_transition_matrix(mdp, policy)?;
    let n = mdp.n_states;
    let r = DVector::from_fn(n, |s, _| {
        (0..mdp.n_actions)
            .map(|a| policy.prob(s, a) * mdp.reward(s, a))
            .sum::<f64>()
    });
    let system = DMatrix::identity(n, n) - p * mdp.gamma;
    let sol = system
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::Singular("policy evaluation system".into()))?;
    Ok(ValueVector(sol.iter().copied().collect()))
}

/// Expected discounted return `E_mu[V^pi]`.
pub fn policy_return(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<f64> {
    Ok(policy_value(mdp, policy)?.expect(mdp.mu()))
}

/// Normalized discounted state occupancy: the solution of
/// `alpha = (1 - gamma) mu + gamma (P^pi)^T alpha`.
pub fn discounted_state_occupancy(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    let p = policy_transition_matrix(mdp, policy)?;
    let n = mdp.n_states;
    let system = DMatrix::identity(n, n) - p.transpose() * mdp.gamma;
    let rhs = DVector::from_iterator(n, mdp.mu.iter().map(|m| (1.0 - mdp.gamma) * m));
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("occupancy flow system".into()))?;
    // Round-off can leave tiny negatives on unreachable states.
    Ok(sol.iter().map(|x| x.max(0.0)).collect())
}

/// `rho(s, a) = alpha(s) pi(a | s)`.
pub fn occupancy_from_policy(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
) -> Result<OccupancyMeasure> {
    let alpha = discounted_state_occupancy(mdp, policy)?;
    let rho = (0..mdp.n_states)
        .flat_map(|s| {
            let a_s = alpha[s];
            policy.row(s).iter().map(move |p| a_s * p)
        })
        .collect();
    OccupancyMeasure::new(mdp.n_states, mdp.n_actions, rho)
}

/// Row-normalizes an occupancy measure; rows with (near) zero mass become
/// uniform.
pub fn policy_from_occupancy(rho: &OccupancyMeasure) -> Result<TabularPolicy> {
    if rho.rho.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidArgument(
            "occupancy measure has a negative entry".into(),
        ));
    }
    let n_actions = rho.n_actions;
    let mut probs = Vec::with_capacity(rho.rho.len());
    for row in rho.rho.chunks(n_actions) {
        let mass: f64 = row.iter().sum();
        if mass < 1e-12 {
            probs.extend(std::iter::repeat_n(1.0 / n_actions as f64, n_actions));
        } else {
            let start = probs.len();
            probs.extend(row.iter().map(|x| x / mass));
            let residue = 1.0 - probs[start..].iter().sum::<f64>();
            let best = start + argmax(&probs[start..]);
            probs[best] += residue;
        }
    }
    TabularPolicy::new(rho.n_states, n_actions, probs)
}

/// `(1 - gamma) E_mu[v] - sum R rho`: the primal objective minus the dual.
pub fn duality_gap(mdp: &TabularMdp, v: &ValueVector, rho: &OccupancyMeasure) -> Result<f64> {
    check_dim(mdp.n_states, v.len())?;
    check_dim(mdp.n_states * mdp.n_actions, rho.rho.len())?;
    let primal = (1.0 - mdp.gamma) * v.expect(&mdp.mu);
    let dual: f64 = mdp.reward.iter().zip(&rho.rho).map(|(r, p)| r * p).sum();
    Ok(primal - dual)
}

/// Largest violation of the dual LP flow constraints
/// `sum_a rho(s', a) = (1 - gamma) mu(s') + gamma sum_{s,a} rho(s, a) P(s' | s, a)`.
pub fn dual_flow_residual(mdp: &TabularMdp, rho: &OccupancyMeasure) -> Result<f64> {
    check_dim(mdp.n_states * mdp.n_actions, rho.rho.len())?;
    let n = mdp.n_states;
    let mut inflow: Vec<f64> = mdp.mu.iter().map(|m| (1.0 - mdp.gamma) * m).collect();
    for s in 0..n {
        for a in 0..mdp.n_actions {
            let mass = rho.get(s, a);
            if mass == 0.0 {
                continue;
            }
            for (s2, p) in mdp.next_dist(s, a).iter().enumerate() {
                inflow[s2] += mdp.gamma * mass * p;
            }
        }
    }
    Ok(rho
        .state_marginal()
        .iter()
        .zip(&inflow)
        .fold(0.0, |m, (out, inp)| m.max((out - inp).abs())))
}

/// Exact primal and dual LP solutions: `V*` from value iteration, `rho*` as
/// the occupancy of the greedy policy.
#[derive(Debug, Clone)]
pub struct LpOracle {
    pub v_star: ValueVector,
    pub pi_star: TabularPolicy,
    pub rho_star: OccupancyMeasure,
}

impl LpOracle {
    pub fn solve(mdp: &TabularMdp, tol: f64) -> Result<Self> {
        let v_star = value_iteration(mdp, tol)?;
        let pi_star = greedy_policy(mdp, &v_star)?;
        let rho_star = occupancy_from_policy(mdp, &pi_star)?;
        Ok(Self {
            v_star,
            pi_star,
            rho_star,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn single_state(gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![1.0], gamma, vec![1.0]).unwrap()
    }

    /// s0 --a1 (R=0)--> s1; a0 self-loops at s0 with R=0; s1 self-loops with R=1.
    pub(crate) fn two_state_chain(gamma: f64) -> TabularMdp {
        #[rustfmt::skip]
        let transition = vec![
            1.0, 0.0,   0.0, 1.0,
            0.0, 1.0,   0.0, 1.0,
        ];
        let reward = vec![0.0, 0.0, 1.0, 1.0];
        TabularMdp::new(2, 2, transition, reward, gamma, vec![1.0, 0.0]).unwrap()
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(TabularMdp::new(1, 1, vec![0.9], vec![0.0], 0.9, vec![1.0]).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.0], 1.0, vec![1.0]).is_err());
        assert!(TabularMdp::new(1, 1, vec![1.0], vec![0.0], 0.5, vec![0.5]).is_err());
        assert!(TabularMdp::new(2, 1, vec![1.0], vec![0.0], 0.5, vec![1.0]).is_err());
        let mdp = single_state(0.9);
        assert!(matches!(
            bellman_optimality_operator(&mdp, &ValueVector::zeros(2)),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn one_step_operator_examples() {
        let mdp = single_state(0.9);
        let out = bellman_optimality_operator(&mdp, &ValueVector(vec![10.0])).unwrap();
        assert_abs_diff_eq!(out[0], 10.0, epsilon = 1e-12);
        let out = bellman_optimality_operator(&mdp, &ValueVector(vec![0.0])).unwrap();
        assert_eq!(out.0, vec![1.0]);

        // From zero, the operator returns the best immediate reward per state.
        let chain = two_state_chain(0.5);
        let out = bellman_optimality_operator(&chain, &ValueVector::zeros(2)).unwrap();
        let brute: Vec<f64> = (0..2)
            .map(|s| (0..2).map(|a| chain.reward(s, a)).fold(f64::MIN, f64::max))
            .collect();
        assert_eq!(out.0, brute);
    }

    #[test]
    fn k_step_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = TabularMdp::random(4, 3, 0.8, &mut rng).unwrap();
        let v = ValueVector(vec![0.3, -1.0, 2.0, 0.5]);
        assert_eq!(
            k_step_bellman(&mdp, &v, 0).unwrap(),
            bellman_optimality_operator(&mdp, &v).unwrap()
        );
        let fixed = single_state(0.9);
        let out = k_step_bellman(&fixed, &ValueVector(vec![10.0]), 5).unwrap();
        assert_abs_diff_eq!(out[0], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn lambda_operator_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = TabularMdp::random(3, 2, 0.9, &mut rng).unwrap();
        let v = ValueVector(vec![1.0, 0.0, -1.0]);
        assert_eq!(
            lambda_bellman(&mdp, &v, 0.0, 10).unwrap(),
            k_step_bellman(&mdp, &v, 0).unwrap()
        );
        let fixed = single_state(0.9);
        for lambda in [0.1, 0.5, 0.95] {
            let out = lambda_bellman(&fixed, &ValueVector(vec![10.0]), lambda, 600).unwrap();
            assert_abs_diff_eq!(out[0], 10.0, epsilon = 1e-9);
        }
        assert!(lambda_bellman(&mdp, &v, 1.0, 10).is_err());
        assert!(lambda_bellman(&mdp, &v, -0.1, 10).is_err());
    }

    #[test]
    fn lambda_operator_matches_direct_sum() {
        // Independent summation with T_k from scratch each time.
        let chain = two_state_chain(0.5);
        let v = ValueVector::zeros(2);
        let (lambda, k_max): (f64, usize) = (0.5, 40);
        let mut direct = [0.0; 2];
        let mut total_weight = 0.0;
        for k in 0..=k_max {
            let w = if k == k_max {
                1.0 - total_weight
            } else {
                (1.0 - lambda) * lambda.powi(k as i32)
            };
            total_weight += w;
            let tk = k_step_bellman(&chain, &v, k).unwrap();
            direct[0] += w * tk[0];
            direct[1] += w * tk[1];
        }
        let out = lambda_bellman(&chain, &v, lambda, k_max).unwrap();
        assert_abs_diff_eq!(out[0], direct[0], epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], direct[1], epsilon = 1e-12);
    }

    #[test]
    fn value_iteration_examples() {
        let v = value_iteration(&single_state(0.9), 1e-10).unwrap();
        assert_abs_diff_eq!(v[0], 10.0, epsilon = 1e-8);
        // Hand solution: V(s1) = 1 / (1 - 0.5) = 2, V(s0) = max(0.5 V(s0), 0.5 V(s1)) = 1.
        let v = value_iteration(&two_state_chain(0.5), 1e-12).unwrap();
        assert_abs_diff_eq!(v[1], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-10);
        assert!(value_iteration(&single_state(0.9), 0.0).is_err());
    }

    #[test]
    fn greedy_policy_examples() {
        let mdp = single_state(0.9);
        let pi = greedy_policy(&mdp, &ValueVector(vec![10.0])).unwrap();
        assert_eq!(pi.probs(), &[1.0]);

        let chain = two_state_chain(0.5);
        let v = value_iteration(&chain, 1e-12).unwrap();
        let pi = greedy_policy(&chain, &v).unwrap();
        assert_eq!(pi.mode(0), 1);
        // In s1 both actions self-loop with R=1: exact tie, lowest index wins.
        assert_eq!(pi.mode(1), 0);

        let tie = TabularMdp::new(1, 3, vec![1.0; 3], vec![0.5, 0.5, 0.5], 0.9, vec![1.0]).unwrap();
        let pi = greedy_policy(&tie, &ValueVector(vec![5.0])).unwrap();
        assert_eq!(pi.probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn occupancy_examples() {
        assert_eq!(
            discounted_state_occupancy(&single_state(0.9), &TabularPolicy::uniform(1, 1)).unwrap(),
            vec![1.0]
        );
        // Go-then-stay: alpha0 = (1 - g) = 0.5, alpha1 = g alpha0 + g alpha1 -> 0.5.
        let chain = two_state_chain(0.5);
        let go = TabularPolicy::deterministic(2, &[1, 0]).unwrap();
        let alpha = discounted_state_occupancy(&chain, &go).unwrap();
        assert_abs_diff_eq!(alpha[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(alpha[1], 0.5, epsilon = 1e-12);

        // Symmetric 3-state MDP under the uniform policy.
        let mut transition = Vec::new();
        for s in 0..3 {
            for a in 0..2 {
                let mut row = vec![0.0; 3];
                row[(s + a + 1) % 3] = 1.0;
                transition.extend(row);
            }
        }
        let sym = TabularMdp::new(3, 2, transition, vec![0.0; 6], 0.9, vec![1.0 / 3.0; 3]).unwrap();
        let alpha = discounted_state_occupancy(&sym, &TabularPolicy::uniform(3, 2)).unwrap();
        for a in alpha {
            assert_abs_diff_eq!(a, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn occupancy_policy_round_trip() {
        let rho = occupancy_from_policy(&single_state(0.9), &TabularPolicy::uniform(1, 1)).unwrap();
        assert_abs_diff_eq!(rho.values()[0], 1.0, epsilon = 1e-12);

        let chain = two_state_chain(0.5);
        let oracle = LpOracle::solve(&chain, 1e-12).unwrap();
        assert!(dual_flow_residual(&chain, &oracle.rho_star).unwrap() < 1e-8);
        assert_abs_diff_eq!(oracle.rho_star.total(), 1.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mdp = TabularMdp::random(5, 3, 0.9, &mut rng).unwrap();
        let probs: Vec<f64> = (0..5)
            .flat_map(|_| {
                let raw: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 0.01).collect();
                normalized(&raw)
            })
            .collect();
        let pi = TabularPolicy::new(5, 3, probs).unwrap();
        let rho = occupancy_from_policy(&mdp, &pi).unwrap();
        assert_abs_diff_eq!(rho.total(), 1.0, epsilon = 1e-12);
        let back = policy_from_occupancy(&rho).unwrap();
        for (a, b) in back.probs().iter().zip(pi.probs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn policy_from_occupancy_examples() {
        let rho = OccupancyMeasure::new(2, 1, vec![0.5, 0.5]).unwrap();
        assert_eq!(policy_from_occupancy(&rho).unwrap().probs(), &[1.0, 1.0]);
        let rho = OccupancyMeasure::new(2, 2, vec![0.25, 0.75, 0.0, 0.0]).unwrap();
        assert_eq!(
            policy_from_occupancy(&rho).unwrap().probs(),
            &[0.25, 0.75, 0.5, 0.5]
        );
        assert!(OccupancyMeasure::new(1, 2, vec![0.5, -0.1]).is_err());
    }

    #[test]
    fn duality_gap_examples() {
        let mdp = single_state(0.9);
        let oracle = LpOracle::solve(&mdp, 1e-12).unwrap();
        assert_abs_diff_eq!(
            duality_gap(&mdp, &oracle.v_star, &oracle.rho_star).unwrap(),
            0.0,
            epsilon = 1e-9
        );

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mdp = TabularMdp::random(8, 3, 0.9, &mut rng).unwrap();
        let oracle = LpOracle::solve(&mdp, 1e-12).unwrap();
        let gap = duality_gap(&mdp, &oracle.v_star, &oracle.rho_star).unwrap();
        assert!(gap.abs() < 1e-6, "gap {gap}");

        let c = 3.0;
        let shifted = ValueVector(oracle.v_star.iter().map(|v| v + c).collect());
        let shifted_gap = duality_gap(&mdp, &shifted, &oracle.rho_star).unwrap();
        assert_abs_diff_eq!(shifted_gap - gap, (1.0 - 0.9) * c, epsilon = 1e-12);
    }
}
