//! Stochastic policies with analytic scores, KL gradients and Fisher products.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::features::{FeatureMap, RbfFeatureMap};
use crate::error::{check_dim, Error, Result};
use crate::mdp::TabularPolicy;

/// A differentiable policy `pi_theta(a | s)` over a flat parameter vector.
pub trait Policy: Clone {
    type State;
    type Action: Clone;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn n_params(&self) -> usize {
        self.params().len()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.n_params(), params.len())?;
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, state: &Self::State, rng: &mut R) -> Result<Self::Action>;

    /// `log pi(a | s)`, with the score `grad_theta log pi(a | s)` written to `grad`.
    fn log_prob_and_grad(
        &self,
        state: &Self::State,
        action: &Self::Action,
        grad: &mut [f64],
    ) -> Result<f64>;

    fn log_prob(&self, state: &Self::State, action: &Self::Action) -> Result<f64> {
        let mut scratch = vec![0.0; self.n_params()];
        self.log_prob_and_grad(state, action, &mut scratch)
    }

    /// `KL(pi_self(. | s) || pi_old(. | s))` and its gradient in `self`'s parameters.
    fn kl_and_grad(&self, old: &Self, state: &Self::State, grad: &mut [f64]) -> Result<f64>;

    /// Adds `F(s) v` to `out`, where `F(s) = E_{a ~ pi(.|s)}[score score^T]`.
    fn fisher_vector_product(&self, state: &Self::State, v: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Softmax over per-state logits, `pi(a | s) ∝ exp(logits[s][a])`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSoftmaxPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
}

impl TabularSoftmaxPolicy {
    pub fn new(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidArgument("empty softmax policy".into()));
        }
        check_dim(n_states * n_actions, logits.len())?;
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidArgument("logits must be finite".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            logits,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            logits: vec![0.0; n_states * n_actions],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s < self.n_states {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "state {s} out of range for {} states",
                self.n_states
            )))
        }
    }

    /// Action probabilities at `s`.
    pub fn probs_at(&self, s: usize) -> Vec<f64> {
        softmax(&self.logits[s * self.n_actions..(s + 1) * self.n_actions])
    }

    pub fn to_tabular(&self) -> TabularPolicy {
        let probs = (0..self.n_states).flat_map(|s| self.probs_at(s)).collect();
        TabularPolicy::new(self.n_states, self.n_actions, probs).expect("softmax rows are stochastic")
    }

    /// Exact Fisher matrix block at `s`: `diag(p) - p p^T`.
    pub fn fisher_block(&self, s: usize) -> Vec<f64> {
        let p = self.probs_at(s);
        let n = self.n_actions;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = if i == j { p[i] } else { 0.0 } - p[i] * p[j];
            }
        }
        out
    }
}

/// Numerically stable softmax; the result sums to 1 up to rounding.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl Policy for TabularSoftmaxPolicy {
    type State = usize;
    type Action = usize;

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn sample<R: Rng + ?Sized>(&self, state: &usize, rng: &mut R) -> Result<usize> {
        self.check_state(*state)?;
        let p = self.probs_at(*state);
        Ok(crate::lagrangian::sample_index(&p, rng.random()))
    }

    fn log_prob_and_grad(&self, state: &usize, action: &usize, grad: &mut [f64]) -> Result<f64> {
        self.check_state(*state)?;
        check_dim(self.logits.len(), grad.len())?;
        let (s, a) = (*state, *action);
        if a >= self.n_actions {
            return Err(Error::InvalidArgument(format!("action {a} out of range")));
        }
        let p = self.probs_at(s);
        grad.fill(0.0);
        let block = &mut grad[s * self.n_actions..(s + 1) * self.n_actions];
        for (b, (g, pb)) in block.iter_mut().zip(&p).enumerate() {
            *g = f64::from(u8::from(b == a)) - pb;
        }
        Ok(p[a].ln())
    }

    fn kl_and_grad(&self, old: &Self, state: &usize, grad: &mut [f64]) -> Result<f64> {
        self.check_state(*state)?;
        check_dim(self.logits.len(), grad.len())?;
        check_dim(self.logits.len(), old.logits.len())?;
        let s = *state;
        let p = self.probs_at(s);
        let q = old.probs_at(s);
        let log_ratio: Vec<f64> = p.iter().zip(&q).map(|(p, q)| (p / q).ln()).collect();
        let kl: f64 = p
            .iter()
            .zip(&log_ratio)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, r)| p * r)
            .sum();
        grad.fill(0.0);
        let block = &mut grad[s * self.n_actions..(s + 1) * self.n_actions];
        for ((g, p), r) in block.iter_mut().zip(&p).zip(&log_ratio) {
            *g = if *p > 0.0 { p * (r - kl) } else { 0.0 };
        }
        Ok(kl)
    }

    fn fisher_vector_product(&self, state: &usize, v: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_state(*state)?;
        check_dim(self.logits.len(), v.len())?;
        check_dim(self.logits.len(), out.len())?;
        let s = *state;
        let n = self.n_actions;
        let p = self.probs_at(s);
        let vs = &v[s * n..(s + 1) * n];
        let pv: f64 = p.iter().zip(vs).map(|(p, v)| p * v).sum();
        for (o, (p, v)) in out[s * n..(s + 1) * n].iter_mut().zip(p.iter().zip(vs)) {
            *o += p * (v - pv);
        }
        Ok(())
    }
}

/// `pi(a | s) = N(W phi(s), diag(exp(2 log_std)))` over random RBF features.
///
/// Parameters are laid out as the row-major `[action_dim][n_features]` weight
/// matrix followed by `log_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianRbfPolicy {
    features: RbfFeatureMap,
    action_dim: usize,
    params: Vec<f64>,
}

impl GaussianRbfPolicy {
    /// Zero mean weights and a constant initial `log_std`.
    pub fn new(features: RbfFeatureMap, action_dim: usize, init_log_std: f64) -> Result<Self> {
        if action_dim == 0 {
            return Err(Error::InvalidArgument("action dimension must be positive".into()));
        }
        let n_w = action_dim * features.dim();
        let mut params = vec![0.0; n_w + action_dim];
        params[n_w..].fill(init_log_std);
        Ok(Self {
            features,
            action_dim,
            params,
        })
    }

    pub fn feature_map(&self) -> &RbfFeatureMap {
        &self.features
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn n_features(&self) -> usize {
        self.features.dim()
    }

    fn n_weights(&self) -> usize {
        self.action_dim * self.n_features()
    }

    pub fn log_std(&self) -> &[f64] {
        &self.params[self.n_weights()..]
    }

    /// The mean action `W phi(s)` and the features it was computed from.
    pub fn mean_and_features(&self, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let phi = self.features.features(state)?;
        let mean = self.params[..self.n_weights()]
            .chunks_exact(phi.len())
            .map(|w| w.iter().zip(&phi).map(|(w, f)| w * f).sum())
            .collect();
        Ok((mean, phi))
    }

    pub fn mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mean_and_features(state)?.0)
    }
}

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl Policy for GaussianRbfPolicy {
    type State = Vec<f64>;
    type Action = Vec<f64>;

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn sample<R: Rng + ?Sized>(&self, state: &Vec<f64>, rng: &mut R) -> Result<Vec<f64>> {
        let mean = self.mean(state)?;
        Ok(mean
            .iter()
            .zip(self.log_std())
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect())
    }

    fn log_prob_and_grad(
        &self,
        state: &Vec<f64>,
        action: &Vec<f64>,
        grad: &mut [f64],
    ) -> Result<f64> {
        check_dim(self.action_dim, action.len())?;
        check_dim(self.params.len(), grad.len())?;
        let (mean, phi) = self.mean_and_features(state)?;
        let n_w = self.n_weights();
        let nf = phi.len();
        let mut logp = 0.0;
        for j in 0..self.action_dim {
            let ls = self.params[n_w + j];
            let inv_var = (-2.0 * ls).exp();
            let diff = action[j] - mean[j];
            logp += -0.5 * diff * diff * inv_var - ls - LOG_SQRT_2PI;
            let coef = diff * inv_var;
            for (g, f) in grad[j * nf..(j + 1) * nf].iter_mut().zip(&phi) {
                *g = coef * f;
            }
            grad[n_w + j] = diff * diff * inv_var - 1.0;
        }
        Ok(logp)
    }

    fn kl_and_grad(&self, old: &Self, state: &Vec<f64>, grad: &mut [f64]) -> Result<f64> {
        check_dim(self.params.len(), old.params.len())?;
        check_dim(self.params.len(), grad.len())?;
        let (mean, phi) = self.mean_and_features(state)?;
        let old_mean = old.mean(state)?;
        let n_w = self.n_weights();
        let nf = phi.len();
        let mut kl = 0.0;
        for j in 0..self.action_dim {
            let (ls, ls_old) = (self.params[n_w + j], old.params[n_w + j]);
            let var_ratio = (2.0 * (ls - ls_old)).exp();
            let inv_var_old = (-2.0 * ls_old).exp();
            let diff = mean[j] - old_mean[j];
            kl += ls_old - ls + 0.5 * (var_ratio + diff * diff * inv_var_old) - 0.5;
            let coef = diff * inv_var_old;
            for (g, f) in grad[j * nf..(j + 1) * nf].iter_mut().zip(&phi) {
                *g = coef * f;
            }
            grad[n_w + j] = var_ratio - 1.0;
        }
        Ok(kl)
    }

    fn fisher_vector_product(&self, state: &Vec<f64>, v: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.params.len(), v.len())?;
        check_dim(self.params.len(), out.len())?;
        let phi = self.features.features(state.as_slice())?;
        let n_w = self.n_weights();
        let nf = phi.len();
        for j in 0..self.action_dim {
            let inv_var = (-2.0 * self.params[n_w + j]).exp();
            let row = j * nf..(j + 1) * nf;
            let pv: f64 = v[row.clone()].iter().zip(&phi).map(|(v, f)| v * f).sum();
            for (o, f) in out[row].iter_mut().zip(&phi) {
                *o += inv_var * pv * f;
            }
            out[n_w + j] += 2.0 * v[n_w + j];
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(seed: u64) -> GaussianRbfPolicy {
        let map = RbfFeatureMap::new(3, 20, 1.5, seed).unwrap().with_bias(true);
        let mut p = GaussianRbfPolicy::new(map, 2, -0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for x in p.params_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
        p
    }

    fn fd_check<P: Policy>(policy: &P, f: impl Fn(&P) -> f64, analytic: &[f64]) {
        let h = 1e-5;
        for i in 0..policy.n_params() {
            let (mut up, mut down) = (policy.clone(), policy.clone());
            up.params_mut()[i] += h;
            down.params_mut()[i] -= h;
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            let scale = fd.abs().max(analytic[i].abs()).max(1e-3);
            assert!(
                (fd - analytic[i]).abs() / scale < 1e-4,
                "param {i}: fd {fd} analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn gaussian_at_mean() {
        let p = gaussian(1);
        let s = vec![0.3, -0.2, 1.0];
        let a = p.mean(&s).unwrap();
        let mut g = vec![0.0; p.n_params()];
        let lp = p.log_prob_and_grad(&s, &a, &mut g).unwrap();
        let expect: f64 = p.log_std().iter().map(|ls| -0.5 * (2.0 * PI * (2.0 * ls).exp()).ln()).sum();
        assert_abs_diff_eq!(lp, expect, epsilon = 1e-12);
        let n_w = p.n_params() - 2;
        assert!(g[..n_w].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn softmax_uniform_two_actions() {
        let p = TabularSoftmaxPolicy::uniform(1, 2);
        let mut g = vec![0.0; 2];
        let lp = p.log_prob_and_grad(&0, &0, &mut g).unwrap();
        assert_abs_diff_eq!(lp, 0.5f64.ln(), epsilon = 1e-15);
        assert_eq!(g, vec![0.5, -0.5]);
    }

    #[test]
    fn scores_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100u64 {
            let p = gaussian(trial);
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = p.sample(&s, &mut rng).unwrap();
            let mut g = vec![0.0; p.n_params()];
            p.log_prob_and_grad(&s, &a, &mut g).unwrap();
            fd_check(&p, |q| q.log_prob(&s, &a).unwrap(), &g);

            let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = TabularSoftmaxPolicy::new(4, 3, logits).unwrap();
            let (st, at) = (rng.random_range(0..4), rng.random_range(0..3));
            let mut gt = vec![0.0; 12];
            t.log_prob_and_grad(&st, &at, &mut gt).unwrap();
            fd_check(&t, |q| q.log_prob(&st, &at).unwrap(), &gt);
        }
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20u64 {
            let (p, old) = (gaussian(trial), gaussian(trial + 1000));
            // Same features, different parameters.
            let mut old_same = p.clone();
            old_same.set_params(old.params()).unwrap();
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut g = vec![0.0; p.n_params()];
            let kl = p.kl_and_grad(&old_same, &s, &mut g).unwrap();
            assert!(kl >= 0.0);
            fd_check(&p, |q| q.kl_and_grad(&old_same, &s, &mut vec![0.0; q.n_params()]).unwrap(), &g);

            let t = TabularSoftmaxPolicy::new(2, 3, (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let t_old = TabularSoftmaxPolicy::new(2, 3, (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let mut gt = vec![0.0; 6];
            t.kl_and_grad(&t_old, &1, &mut gt).unwrap();
            fd_check(&t, |q| q.kl_and_grad(&t_old, &1, &mut vec![0.0; 6]).unwrap(), &gt);
        }
    }

    #[test]
    fn kl_to_self_is_zero() {
        let p = gaussian(2);
        let mut g = vec![0.0; p.n_params()];
        let kl = p.kl_and_grad(&p, &vec![0.1, 0.2, 0.3], &mut g).unwrap();
        assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-14);
        assert!(g.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn analytic_fisher_matches_score_outer_products() {
        let p = gaussian(5);
        let s = vec![0.4, -1.0, 0.2];
        let n = p.n_params();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut analytic = vec![0.0; n];
        p.fisher_vector_product(&s, &v, &mut analytic).unwrap();
        let m = 200_000;
        let mut mc = vec![0.0; n];
        let mut g = vec![0.0; n];
        for _ in 0..m {
            let a = p.sample(&s, &mut rng).unwrap();
            p.log_prob_and_grad(&s, &a, &mut g).unwrap();
            let gv: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (o, gi) in mc.iter_mut().zip(&g) {
                *o += gi * gv / m as f64;
            }
        }
        let scale = analytic.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for (a, b) in analytic.iter().zip(&mc) {
            assert!((a - b).abs() < 0.05 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn gaussian_samples_have_declared_moments() {
        let p = gaussian(7);
        let s = vec![1.0, 0.0, -0.5];
        let mean = p.mean(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| p.sample(&s, &mut rng).unwrap()).collect();
        for j in 0..2 {
            let var = (2.0 * p.log_std()[j]).exp();
            let m = draws.iter().map(|a| a[j]).sum::<f64>() / n as f64;
            assert!((m - mean[j]).abs() < 3.0 * (var / n as f64).sqrt());
            let v = draws.iter().map(|a| (a[j] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            // Var of the sample variance is 2 var^2 / (n - 1) for Gaussians.
            assert!((v - var).abs() < 3.0 * var * (2.0 / (n - 1) as f64).sqrt());
        }
    }

    #[test]
    fn softmax_probabilities_normalize() {
        let t = TabularSoftmaxPolicy::new(2, 3, vec![700.0, 0.0, -700.0, 1.0, 2.0, 3.0]).unwrap();
        for s in 0..2 {
            let p = t.probs_at(s);
            assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        }
        assert!(t.to_tabular().prob(0, 0) > 0.999);
    }
}
