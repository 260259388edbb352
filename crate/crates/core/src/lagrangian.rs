//! Exact Lagrangians of the Bellman LP on tabular MDPs.
//!
//! `L(V, alpha, pi)` is the one-step game, `L_k` its multi-step version over
//! k-step paths, and `L_r` adds the path regularizer
//! `eta_V E_mu[(V^{pi_b}(s) - V(s))^2]`. For `eta_V > 0` the regularized
//! Lagrangian is a strictly convex quadratic in a tabular `V`, so its
//! minimizer and the dual function `l_r(alpha, pi) = min_V L_r` are available
//! in closed form.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::mdp::{policy_value, TabularMdp, TabularPolicy, ValueVector};

/// Default cap on the number of enumerated k-step paths.
pub const DEFAULT_MAX_PATHS: usize = 1_000_000;

/// A k-step path `s_0, a_0, r_0, ..., s_k, a_k, r_k, s_{k+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct KStepPath {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl KStepPath {
    pub fn new(states: Vec<usize>, actions: Vec<usize>, rewards: Vec<f64>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidArgument("a path needs at least one step".into()));
        }
        check_dim(actions.len(), rewards.len())?;
        check_dim(actions.len() + 1, states.len())?;
        Ok(Self {
            states,
            actions,
            rewards,
        })
    }

    /// Number of steps minus one, i.e. the `k` of a k-step path.
    pub fn k(&self) -> usize {
        self.actions.len() - 1
    }
}

/// A state weighting `alpha(s)`, a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialWeighting {
    alpha: Vec<f64>,
}

impl InitialWeighting {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::InvalidArgument("alpha has a negative entry".into()));
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("alpha sums to {total}")));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            alpha: vec![1.0 / n as f64; n],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha
    }
}

/// `sum_i gamma^i r_i + gamma^{k+1} v(s_{k+1}) - v(s_0)`.
pub fn delta_k<F: Fn(usize) -> f64>(v: F, path: &KStepPath, gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in &path.rewards {
        total += discount * r;
        discount *= gamma;
    }
    total + discount * v(path.states[path.states.len() - 1]) - v(path.states[0])
}

fn check_game(
    mdp: &TabularMdp,
    v: &[f64],
    alpha: &InitialWeighting,
    pi: &TabularPolicy,
) -> Result<()> {
    check_dim(mdp.n_states(), v.len())?;
    check_dim(mdp.n_states(), alpha.alpha.len())?;
    check_dim(mdp.n_states(), pi.n_states())?;
    check_dim(mdp.n_actions(), pi.n_actions())
}

/// `(1 - gamma) E_mu[V] + sum_{s,a} alpha(s) pi(a|s) Delta[V](s, a)`.
pub fn one_step_lagrangian(
    mdp: &TabularMdp,
    v: &ValueVector,
    alpha: &InitialWeighting,
    pi: &TabularPolicy,
) -> Result<f64> {
    check_game(mdp, v, alpha, pi)?;
    let gamma = mdp.gamma();
    let mut total = (1.0 - gamma) * v.expect(mdp.mu());
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let weight = alpha.alpha[s] * pi.prob(s, a);
            if weight == 0.0 {
                continue;
            }
            let next: f64 = mdp.next_dist(s, a).iter().zip(v.iter()).map(|(p, x)| p * x).sum();
            total += weight * (mdp.reward(s, a) + gamma * next - v[s]);
        }
    }
    Ok(total)
}

/// Every k-step path with positive probability under
/// `alpha(s_0) prod_i pi(a_i|s_i) P(s_{i+1}|s_i, a_i)`, with that probability.
///
/// Fails with [`Error::Resource`] when the worst-case path count
/// `|S| (|A||S|)^{k+1}` exceeds `max_paths`.
pub fn enumerate_paths(
    mdp: &TabularMdp,
    alpha: &[f64],
    pi: &TabularPolicy,
    k: usize,
    max_paths: usize,
) -> Result<Vec<(KStepPath, f64)>> {
    check_dim(mdp.n_states(), alpha.len())?;
    check_dim(mdp.n_states(), pi.n_states())?;
    let branching = (mdp.n_actions() * mdp.n_states()) as f64;
    let worst_case = mdp.n_states() as f64 * branching.powi(k as i32 + 1);
    if worst_case > max_paths as f64 {
        return Err(Error::Resource(format!(
            "exhaustive enumeration of {worst_case:.3e} paths exceeds the cap of {max_paths}"
        )));
    }

    struct Walker<'a> {
        mdp: &'a TabularMdp,
        pi: &'a TabularPolicy,
        steps: usize,
        states: Vec<usize>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        out: Vec<(KStepPath, f64)>,
    }

    impl Walker<'_> {
        fn walk(&mut self, prob: f64) {
            if self.actions.len() == self.steps {
                let path = KStepPath {
                    states: self.states.clone(),
                    actions: self.actions.clone(),
                    rewards: self.rewards.clone(),
                };
                self.out.push((path, prob));
                return;
            }
            let s = *self.states.last().expect("path starts with a state");
            for a in 0..self.mdp.n_actions() {
                let pa = self.pi.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                self.actions.push(a);
                self.rewards.push(self.mdp.reward(s, a));
                for (s2, &p) in self.mdp.next_dist(s, a).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    self.states.push(s2);
                    self.walk(prob * pa * p);
                    self.states.pop();
                }
                self.actions.pop();
                self.rewards.pop();
            }
        }
    }

    let mut walker = Walker {
        mdp,
        pi,
        steps: k + 1,
        states: Vec::with_capacity(k + 2),
        actions: Vec::with_capacity(k + 1),
        rewards: Vec::with_capacity(k + 1),
        out: Vec::new(),
    };
    for (s0, &a0) in alpha.iter().enumerate() {
        if a0 == 0.0 {
            continue;
        }
        walker.states.push(s0);
        walker.walk(a0);
        walker.states.pop();
    }
    Ok(walker.out)
}

/// How the path expectation in `L_k` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathEvaluation {
    /// Exhaustive enumeration, refused above `max_paths` paths.
    Exact { max_paths: usize },
    /// Plain Monte Carlo over `samples` sampled paths.
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for PathEvaluation {
    fn default() -> Self {
        PathEvaluation::Exact {
            max_paths: DEFAULT_MAX_PATHS,
        }
    }
}

/// A value with its standard error (zero for exact evaluations).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// `L_k(V, alpha, pi)` by exact path enumeration with the default cap.
pub fn multi_step_lagrangian(
    mdp: &TabularMdp,
    v: &ValueVector,
    alpha: &InitialWeighting,
    pi: &TabularPolicy,
    k: usize,
) -> Result<f64> {
    Ok(multi_step_lagrangian_with(mdp, v, alpha, pi, k, PathEvaluation::default())?.value)
}

/// `(1 - gamma^{k+1}) E_mu[V] + E^pi_alpha[delta_k]`, evaluated as requested.
pub fn multi_step_lagrangian_with(
    mdp: &TabularMdp,
    v: &ValueVector,
    alpha: &InitialWeighting,
    pi: &TabularPolicy,
    k: usize,
    eval: PathEvaluation,
) -> Result<Estimate> {
    check_game(mdp, v, alpha, pi)?;
    let gamma = mdp.gamma();
    let base = (1.0 - gamma.powi(k as i32 + 1)) * v.expect(mdp.mu());
    let value_at = |s: usize| v[s];
    match eval {
        PathEvaluation::Exact { max_paths } => {
            let paths = enumerate_paths(mdp, &alpha.alpha, pi, k, max_paths)?;
            let expectation: f64 = paths
                .iter()
                .map(|(path, prob)| prob * delta_k(value_at, path, gamma))
                .sum();
            Ok(Estimate {
                value: base + expectation,
                std_error: 0.0,
            })
        }
        PathEvaluation::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(Error::InvalidArgument(
                    "Monte Carlo evaluation needs at least two samples".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut mean, mut m2) = (0.0, 0.0);
            for n in 1..=samples {
                let path = sample_path(mdp, &alpha.alpha, pi, k, &mut rng);
                let d = delta_k(value_at, &path, gamma);
                let diff = d - mean;
                mean += diff / n as f64;
                m2 += diff * (d - mean);
            }
            let var = m2 / (samples - 1) as f64;
            Ok(Estimate {
                value: base + mean,
                std_error: (var / samples as f64).sqrt(),
            })
        }
    }
}

/// Inverse-CDF draw from a discrete distribution given `u` in `[0, 1)`.
pub fn sample_index(dist: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off: fall back to the last state with mass.
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws one k-step path from `alpha` under `pi`.
pub fn sample_path<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    alpha: &[f64],
    pi: &TabularPolicy,
    k: usize,
    rng: &mut R,
) -> KStepPath {
    let mut s = sample_index(alpha, rng.random());
    let mut path = KStepPath {
        states: vec![s],
        actions: Vec::with_capacity(k + 1),
        rewards: Vec::with_capacity(k + 1),
    };
    for _ in 0..=k {
        let a = sample_index(pi.row(s), rng.random());
        path.actions.push(a);
        path.rewards.push(mdp.reward(s, a));
        s = sample_index(mdp.next_dist(s, a), rng.random());
        path.states.push(s);
    }
    path
}

/// `L_r = L_k + eta_V E_mu[(V^{pi_b}(s) - V(s))^2]` with `V^{pi_b}` from an
/// exact linear solve.
#[allow(clippy::too_many_arguments)]
pub fn path_reg_lagrangian(
    mdp: &TabularMdp,
    v: &ValueVector,
    alpha: &InitialWeighting,
    pi: &TabularPolicy,
    pi_b: &TabularPolicy,
    k: usize,
    eta_v: f64,
) -> Result<f64> {
    if !(eta_v >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eta_v must be nonnegative, got {eta_v}"
        )));
    }
    let lk = multi_step_lagrangian(mdp, v, alpha, pi, k)?;
    if eta_v == 0.0 {
        return Ok(lk);
    }
    let target = policy_value(mdp, pi_b)?;
    Ok(lk + eta_v * penalty(mdp, v, &target))
}

fn penalty(mdp: &TabularMdp, v: &[f64], target: &[f64]) -> f64 {
    mdp.mu()
        .iter()
        .zip(v.iter().zip(target))
        .map(|(m, (x, t))| m * (t - x) * (t - x))
        .sum()
}

/// Distribution of `s_{k+1}` when starting from `alpha` and following `pi`.
pub fn propagate(mdp: &TabularMdp, alpha: &[f64], pi: &TabularPolicy, steps: usize) -> Vec<f64> {
    let n = mdp.n_states();
    let mut dist = alpha.to_vec();
    for _ in 0..steps {
        let mut next = vec![0.0; n];
        for (s, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for a in 0..mdp.n_actions() {
                let w = mass * pi.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (s2, p) in mdp.next_dist(s, a).iter().enumerate() {
                    next[s2] += w * p;
                }
            }
        }
        dist = next;
    }
    dist
}

/// Coefficient vector `c` of the part of `L_k` that is linear in `V`:
/// `c = (1 - gamma^{k+1}) mu + gamma^{k+1} d_{k+1} - alpha`.
pub fn linear_coefficients(
    mdp: &TabularMdp,
    alpha: &InitialWeighting,
    pi: &TabularPolicy,
    k: usize,
) -> Result<Vec<f64>> {
    check_dim(mdp.n_states(), alpha.alpha.len())?;
    check_dim(mdp.n_states(), pi.n_states())?;
    let g = mdp.gamma().powi(k as i32 + 1);
    let reach = propagate(mdp, &alpha.alpha, pi, k + 1);
    Ok(mdp
        .mu()
        .iter()
        .zip(reach.iter().zip(&alpha.alpha))
        .map(|(m, (d, a))| (1.0 - g) * m + g * d - a)
        .collect())
}

/// Hessian of `L_r` with respect to a tabular `V`: `2 eta_V diag(mu)`.
pub fn path_reg_hessian(mdp: &TabularMdp, eta_v: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        mdp.n_states(),
        mdp.mu().iter().map(|m| 2.0 * eta_v * m),
    ))
}

/// The unique minimizer of `L_r` over a tabular `V` (requires `eta_V > 0`).
///
/// Stationarity gives `c - 2 eta_V mu (V^{pi_b} - V) = 0`; states outside the
/// support of `mu` are pinned to `V^{pi_b}` when their linear coefficient
/// vanishes and make the problem unbounded otherwise.
pub fn inner_min_v_exact(
    mdp: &TabularMdp,
    alpha: &InitialWeighting,
    pi: &TabularPolicy,
    pi_b: &TabularPolicy,
    k: usize,
    eta_v: f64,
) -> Result<ValueVector> {
    if !(eta_v > 0.0) {
        return Err(Error::Singular(format!(
            "L_r is linear in V when eta_v = {eta_v}; no unique minimizer"
        )));
    }
    let c = linear_coefficients(mdp, alpha, pi, k)?;
    let target = policy_value(mdp, pi_b)?;
    let mut v = Vec::with_capacity(mdp.n_states());
    for (s, (&mu_s, &c_s)) in mdp.mu().iter().zip(&c).enumerate() {
        let curvature = 2.0 * eta_v * mu_s;
        if curvature > 0.0 {
            v.push(target[s] - c_s / curvature);
        } else if c_s.abs() <= 1e-14 {
            v.push(target[s]);
        } else {
            return Err(Error::Singular(format!(
                "state {s} has no initial mass but a nonzero linear coefficient {c_s:.3e}"
            )));
        }
    }
    Ok(ValueVector(v))
}

/// Gradient of `L_r` with respect to a tabular `V`.
#[allow(clippy::too_many_arguments)]
pub fn path_reg_gradient_v(
    mdp: &TabularMdp,
    v: &ValueVector,
    alpha: &InitialWeighting,
    pi: &TabularPolicy,
    pi_b: &TabularPolicy,
    k: usize,
    eta_v: f64,
) -> Result<Vec<f64>> {
    let c = linear_coefficients(mdp, alpha, pi, k)?;
    if eta_v == 0.0 {
        return Ok(c);
    }
    let target = policy_value(mdp, pi_b)?;
    Ok(c.iter()
        .enumerate()
        .map(|(s, c_s)| c_s - 2.0 * eta_v * mdp.mu()[s] * (target[s] - v[s]))
        .collect())
}

/// The regularized dual function `l_r(alpha, pi) = min_V L_r(V, alpha, pi)`.
///
/// With `eta_V = 0` the minimum is finite only when the flow constraints hold
/// (`c = 0`, checked to `1e-12`); otherwise this returns `-inf`.
pub fn regularized_dual(
    mdp: &TabularMdp,
    alpha: &InitialWeighting,
    pi: &TabularPolicy,
    pi_b: &TabularPolicy,
    k: usize,
    eta_v: f64,
) -> Result<f64> {
    if eta_v > 0.0 {
        let v = inner_min_v_exact(mdp, alpha, pi, pi_b, k, eta_v)?;
        return path_reg_lagrangian(mdp, &v, alpha, pi, pi_b, k, eta_v);
    }
    let c = linear_coefficients(mdp, alpha, pi, k)?;
    if c.iter().any(|x| x.abs() > 1e-12) {
        return Ok(f64::NEG_INFINITY);
    }
    // L_k no longer depends on V: evaluate it at zero.
    multi_step_lagrangian(mdp, &ValueVector::zeros(mdp.n_states()), alpha, pi, k)
}
