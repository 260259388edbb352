//! Update machinery: stepsizes, Fisher operators, conjugate gradients, the
//! natural-gradient step, the exact KL prox-mapping and the inner value fit.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::function_approx::Policy;

/// `zeta_t = c / (n0 + t^beta)`, or `c / (n0 + 1 / t^beta)` in literal mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepsizeSchedule {
    pub c: f64,
    pub n0: f64,
    pub beta: f64,
    #[serde(default)]
    pub literal_mode: bool,
}

impl Default for StepsizeSchedule {
    fn default() -> Self {
        Self {
            c: 2.0,
            n0: 5.0,
            beta: 1.0,
            literal_mode: false,
        }
    }
}

impl StepsizeSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidArgument(format!("stepsize c must be positive, got {}", self.c)));
        }
        if !(self.n0 >= 0.0 && self.n0.is_finite()) {
            return Err(Error::InvalidArgument(format!("n0 must be nonnegative, got {}", self.n0)));
        }
        if !(0.5..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!("beta must lie in [1/2, 1], got {}", self.beta)));
        }
        Ok(())
    }

    pub fn stepsize(&self, t: usize) -> Result<f64> {
        self.validate()?;
        if t == 0 {
            return Err(Error::InvalidArgument("stepsizes are indexed from t = 1".into()));
        }
        let tb = (t as f64).powf(self.beta);
        Ok(if self.literal_mode {
            self.c / (self.n0 + 1.0 / tb)
        } else {
            self.c / (self.n0 + tb)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgConfig {
    pub max_iters: usize,
    /// Added to the Fisher operator as `damping * I`.
    pub damping: f64,
    /// Absolute residual norm at which CG stops early.
    pub residual_tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            damping: 1e-4,
            residual_tol: 1e-10,
        }
    }
}

/// A symmetric linear map on parameter space.
pub trait LinearOperator {
    fn dim(&self) -> usize;

    /// Writes `A x` into `out`.
    fn apply(&self, x: &[f64], out: &mut [f64]) -> Result<()>;
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.ncols(), x.len())?;
        check_dim(self.nrows(), out.len())?;
        let y = self * DVector::from_column_slice(x);
        out.copy_from_slice(y.as_slice());
        Ok(())
    }
}

/// `x -> sum_i w_i g_i (g_i . x) + damping x` over stored score vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalFisher {
    dim: usize,
    scores: Vec<f64>,
    weights: Vec<f64>,
    damping: f64,
}

impl EmpiricalFisher {
    /// `scores` is row-major `[n_samples][dim]`.
    pub fn from_scores(dim: usize, scores: Vec<f64>, weights: Vec<f64>, damping: f64) -> Result<Self> {
        check_dim(weights.len() * dim, scores.len())?;
        if weights.is_empty() {
            return Err(Error::InvalidArgument("Fisher estimate needs samples".into()));
        }
        if !(damping >= 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "Fisher weights and damping must be nonnegative".into(),
            ));
        }
        Ok(Self {
            dim,
            scores,
            weights,
            damping,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.weights.len()
    }
}

impl LinearOperator for EmpiricalFisher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, out.len())?;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.damping * xi;
        }
        for (g, w) in self.scores.chunks_exact(self.dim).zip(&self.weights) {
            let gx: f64 = g.iter().zip(x).map(|(a, b)| a * b).sum();
            let c = w * gx;
            for (o, gi) in out.iter_mut().zip(g) {
                *o += c * gi;
            }
        }
        Ok(())
    }
}

/// Empirical Fisher from weighted `(state, action)` samples. Weights are used
/// as given; pass `1/m` each for the plain batch average.
pub fn fisher_estimate<'a, P, I>(policy: &P, samples: I, damping: f64) -> Result<EmpiricalFisher>
where
    P: Policy,
    P::State: 'a,
    P::Action: 'a,
    I: IntoIterator<Item = (&'a P::State, &'a P::Action, f64)>,
{
    let dim = policy.n_params();
    let mut scores = Vec::new();
    let mut weights = Vec::new();
    let mut g = vec![0.0; dim];
    for (s, a, w) in samples {
        policy.log_prob_and_grad(s, a, &mut g)?;
        scores.extend_from_slice(&g);
        weights.push(w);
    }
    EmpiricalFisher::from_scores(dim, scores, weights, damping)
}

/// The exact Fisher `mean_s E_{a ~ pi(.|s)}[score score^T] + damping I` over
/// a fixed set of states.
pub struct AnalyticFisher<'a, P: Policy> {
    policy: &'a P,
    states: &'a [P::State],
    damping: f64,
}

impl<'a, P: Policy> AnalyticFisher<'a, P> {
    pub fn new(policy: &'a P, states: &'a [P::State], damping: f64) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidArgument("Fisher needs at least one state".into()));
        }
        Ok(Self {
            policy,
            states,
            damping,
        })
    }
}

impl<P: Policy> LinearOperator for AnalyticFisher<'_, P> {
    fn dim(&self) -> usize {
        self.policy.n_params()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.dim(), out.len())?;
        out.fill(0.0);
        for s in self.states {
            self.policy.fisher_vector_product(s, x, out)?;
        }
        let inv = 1.0 / self.states.len() as f64;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = *o * inv + self.damping * xi;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients from `x = 0`.
pub fn cg_solve<O: LinearOperator + ?Sized>(op: &O, rhs: &[f64], cfg: &CgConfig) -> Result<CgResult> {
    let n = op.dim();
    check_dim(n, rhs.len())?;
    if cfg.max_iters == 0 {
        return Err(Error::InvalidArgument("CG needs at least one iteration".into()));
    }
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let tol2 = cfg.residual_tol * cfg.residual_tol;
    let mut iterations = 0;
    while iterations < cfg.max_iters && rr > tol2 {
        op.apply(&p, &mut ap)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) || !pap.is_finite() {
            return Err(Error::Numerical(format!(
                "CG breakdown at iteration {iterations}: p.Ap = {pap}"
            )));
        }
        let step = rr / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        iterations += 1;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("CG produced a non-finite iterate".into()));
    }
    Ok(CgResult {
        x,
        iterations,
        residual_norm: rr.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaturalStep {
    pub params: Vec<f64>,
    /// `F^{-1} g` as returned by CG.
    pub direction: Vec<f64>,
    /// `g . F^{-1} g`.
    pub gnorm_sq: f64,
    /// Normalization was requested but `g . F^{-1} g <= 0`.
    pub fallback: bool,
}

/// `theta + zeta F^{-1} g`, scaled by `1 / sqrt(g . F^{-1} g)` when `normalize`.
pub fn natural_gradient_step<O: LinearOperator + ?Sized>(
    params: &[f64],
    g: &[f64],
    fisher: &O,
    zeta: f64,
    normalize: bool,
    cg: &CgConfig,
) -> Result<NaturalStep> {
    check_dim(params.len(), g.len())?;
    if !(zeta > 0.0) {
        return Err(Error::InvalidArgument(format!("zeta must be positive, got {zeta}")));
    }
    if g.iter().all(|x| *x == 0.0) {
        return Ok(NaturalStep {
            params: params.to_vec(),
            direction: vec![0.0; g.len()],
            gnorm_sq: 0.0,
            fallback: false,
        });
    }
    let direction = cg_solve(fisher, g, cg)?.x;
    let gnorm_sq = dot(g, &direction);
    let (scale, fallback) = if !normalize {
        (zeta, false)
    } else if gnorm_sq > 0.0 && gnorm_sq.is_finite() {
        (zeta / gnorm_sq.sqrt(), false)
    } else {
        (zeta, true)
    };
    let new = params
        .iter()
        .zip(&direction)
        .map(|(p, d)| p + scale * d)
        .collect();
    Ok(NaturalStep {
        params: new,
        direction,
        gnorm_sq,
        fallback,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub damping: f64,
}

impl Default for ProxConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            grad_tol: 1e-10,
            damping: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxResult {
    pub params: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Mean KL to `old` over `states` and its gradient in `policy`'s parameters.
fn mean_kl<P: Policy>(policy: &P, old: &P, states: &[P::State], grad: &mut [f64]) -> Result<f64> {
    let mut g = vec![0.0; grad.len()];
    grad.fill(0.0);
    let mut total = 0.0;
    for s in states {
        total += policy.kl_and_grad(old, s, &mut g)?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let inv = 1.0 / states.len() as f64;
    grad.iter_mut().for_each(|x| *x *= inv);
    Ok(total * inv)
}

/// Minimizes `-(theta - theta_old) . g + KL_hat(pi_theta || pi_old) / zeta`
/// with Fisher-preconditioned descent and backtracking.
pub fn exact_prox_pi<P: Policy>(
    old: &P,
    g: &[f64],
    zeta: f64,
    kl_states: &[P::State],
    cfg: &ProxConfig,
) -> Result<ProxResult> {
    check_dim(old.n_params(), g.len())?;
    if !(zeta > 0.0) {
        return Err(Error::InvalidArgument(format!("zeta must be positive, got {zeta}")));
    }
    if kl_states.is_empty() {
        return Err(Error::InvalidArgument("prox needs at least one KL state".into()));
    }
    let n = old.n_params();
    let theta_old = old.params().to_vec();
    let objective = |p: &P, grad: &mut [f64]| -> Result<f64> {
        let kl = mean_kl(p, old, kl_states, grad)?;
        let mut lin = 0.0;
        for i in 0..n {
            lin += (p.params()[i] - theta_old[i]) * g[i];
            grad[i] = grad[i] / zeta - g[i];
        }
        Ok(kl / zeta - lin)
    };
    let mut current = old.clone();
    let mut grad = vec![0.0; n];
    let mut f = objective(&current, &mut grad)?;
    let cg = CgConfig {
        max_iters: 10 * n.max(1),
        damping: cfg.damping,
        residual_tol: 1e-14,
    };
    let mut trial_grad = vec![0.0; n];
    for iteration in 0..cfg.max_iters {
        let gnorm = dot(&grad, &grad).sqrt();
        if gnorm <= cfg.grad_tol {
            return Ok(ProxResult {
                params: current.params().to_vec(),
                iterations: iteration,
                grad_norm: gnorm,
            });
        }
        let fisher = AnalyticFisher::new(&current, kl_states, cfg.damping)?;
        // Curvature of the objective is F / zeta; solve with F and rescale.
        let dir: Vec<f64> = cg_solve(&fisher, &grad, &cg)?.x.iter().map(|d| d * zeta).collect();
        let slope = dot(&grad, &dir);
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = current.clone();
            for (p, d) in trial.params_mut().iter_mut().zip(&dir) {
                *p -= step * d;
            }
            let f_trial = objective(&trial, &mut trial_grad)?;
            let sufficient = f_trial <= f - 1e-4 * step * slope;
            // Near the optimum the objective decrease drowns in rounding;
            // the gradient norm still measures progress there.
            let smaller_grad = dot(&trial_grad, &trial_grad).sqrt() < 0.9 * gnorm;
            if f_trial.is_finite() && (sufficient || smaller_grad) && trial.params() != current.params() {
                current = trial;
                f = f_trial;
                std::mem::swap(&mut grad, &mut trial_grad);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No decrease is representable any more; report where we stand.
            let gnorm = dot(&grad, &grad).sqrt();
            if gnorm <= cfg.grad_tol.max(1e-8) {
                return Ok(ProxResult {
                    params: current.params().to_vec(),
                    iterations: iteration + 1,
                    grad_norm: gnorm,
                });
            }
            return Err(Error::Diverged {
                iterations: iteration + 1,
                last_finite: current.params().to_vec(),
            });
        }
    }
    let gnorm = dot(&grad, &grad).sqrt();
    if gnorm <= cfg.grad_tol {
        Ok(ProxResult {
            params: current.params().to_vec(),
            iterations: cfg.max_iters,
            grad_norm: gnorm,
        })
    } else {
        Err(Error::Numerical(format!(
            "prox did not reach gradient norm {} in {} iterations (at {gnorm})",
            cfg.grad_tol, cfg.max_iters
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub params: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Gradient descent `theta <- theta - kappa(i) grad(theta)` until the gradient
/// norm drops to `grad_tol` or `max_iters` steps were taken.
pub fn fit_value<G, K>(
    initial: &[f64],
    mut grad: G,
    kappa: K,
    max_iters: usize,
    grad_tol: f64,
) -> Result<FitOutcome>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
    K: Fn(usize) -> f64,
{
    if max_iters == 0 {
        return Err(Error::InvalidArgument("fit_value needs at least one iteration".into()));
    }
    let mut theta = initial.to_vec();
    for i in 0..=max_iters {
        let g = grad(&theta)?;
        check_dim(theta.len(), g.len())?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                iterations: i,
                last_finite: theta,
            });
        }
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= grad_tol || i == max_iters {
            return Ok(FitOutcome {
                params: theta,
                converged: gnorm <= grad_tol,
                iterations: i,
                grad_norm: gnorm,
            });
        }
        let k = kappa(i + 1);
        let next: Vec<f64> = theta.iter().zip(&g).map(|(t, g)| t - k * g).collect();
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                iterations: i,
                last_finite: theta,
            });
        }
        theta = next;
    }
    unreachable!("the loop returns at i == max_iters")
}

/// Exact minimizer of `b . theta + eta sum_j m_j (y_j - phi_j . theta)^2
/// + ridge |theta - prev|^2`, the sampled regularized Lagrangian of a linear
/// value function. `features` is row-major `[n_samples][dim]`.
pub fn quadratic_value_fit(
    b: &[f64],
    features: &[f64],
    targets: &[f64],
    masses: &[f64],
    eta: f64,
    ridge: f64,
    prev: &[f64],
) -> Result<Vec<f64>> {
    let dim = b.len();
    check_dim(dim, prev.len())?;
    check_dim(targets.len() * dim, features.len())?;
    check_dim(targets.len(), masses.len())?;
    if !(eta >= 0.0 && ridge >= 0.0) {
        return Err(Error::InvalidArgument("eta and ridge must be nonnegative".into()));
    }
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for ((phi, y), m) in features.chunks_exact(dim).zip(targets).zip(masses) {
        let c = 2.0 * eta * m;
        if c == 0.0 {
            continue;
        }
        for i in 0..dim {
            if phi[i] == 0.0 {
                continue;
            }
            let ci = c * phi[i];
            rhs[i] += ci * y;
            for j in 0..dim {
                h[(i, j)] += ci * phi[j];
            }
        }
    }
    for i in 0..dim {
        h[(i, i)] += 2.0 * ridge;
        rhs[i] += 2.0 * ridge * prev[i] - b[i];
    }
    let sol = h
        .cholesky()
        .ok_or_else(|| Error::Singular("value normal equations are not positive definite".into()))?
        .solve(&rhs);
    if sol.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite value solution".into()));
    }
    Ok(sol.as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::function_approx::TabularSoftmaxPolicy;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stepsize_examples() {
        let lit = StepsizeSchedule { c: 1.0, n0: 1.0, beta: 1.0, literal_mode: true };
        assert_eq!(lit.stepsize(1).unwrap(), 0.5);
        let dec = StepsizeSchedule { c: 1.0, n0: 0.0, beta: 1.0, literal_mode: false };
        assert_eq!(dec.stepsize(4).unwrap(), 0.25);
        assert!(dec.stepsize(0).is_err());
        let d = StepsizeSchedule::default();
        let mut last = f64::INFINITY;
        for t in 1..=10_000 {
            let z = d.stepsize(t).unwrap();
            assert!(z > 0.0 && z <= last);
            last = z;
        }
        assert!(StepsizeSchedule { beta: 0.3, ..d }.stepsize(1).is_err());
    }

    #[test]
    fn cg_identity_and_2x2() {
        let id = DMatrix::<f64>::identity(3, 3);
        let out = cg_solve(&id, &[1.0, -2.0, 3.0], &CgConfig::default()).unwrap();
        assert_eq!(out.x, vec![1.0, -2.0, 3.0]);
        assert_eq!(out.iterations, 1);
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let out = cg_solve(&a, &[1.0, 2.0], &CgConfig::default()).unwrap();
        assert!(out.iterations <= 2);
        // Inverse is [[3, -1], [-1, 4]] / 11.
        assert_abs_diff_eq!(out.x[0], 1.0 / 11.0, epsilon = 1e-14);
        assert_abs_diff_eq!(out.x[1], 7.0 / 11.0, epsilon = 1e-14);
    }

    #[test]
    fn cg_random_50_dim_in_20_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 50;
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let a = &m * m.transpose() / n as f64 + DMatrix::identity(n, n);
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = cg_solve(&a, &b, &CgConfig::default()).unwrap();
        let exact = a.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
        let err = (DVector::from_column_slice(&out.x) - exact).amax();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rank_one_fisher() {
        let g = vec![1.0, 2.0, -1.0];
        let f = EmpiricalFisher::from_scores(3, g.clone(), vec![1.0], 0.1).unwrap();
        let x = [0.5, 0.0, 1.0];
        let mut out = vec![0.0; 3];
        f.apply(&x, &mut out).unwrap();
        let gx = -0.5;
        for i in 0..3 {
            assert_abs_diff_eq!(out[i], g[i] * gx + 0.1 * x[i], epsilon = 1e-15);
        }
        let orth = [2.0, -1.0, 0.0];
        f.apply(&orth, &mut out).unwrap();
        assert_eq!(out, vec![0.2, -0.1, 0.0]);
    }

    #[test]
    fn exhaustive_softmax_fisher_is_categorical_fisher() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pi = TabularSoftmaxPolicy::new(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let d = [0.2, 0.5, 0.3];
        let states = [0usize, 1, 2];
        let actions = [0usize, 1, 2];
        let mut samples = Vec::new();
        for s in &states {
            let p = pi.probs_at(*s);
            for a in &actions {
                samples.push((s, a, d[*s] * p[*a]));
            }
        }
        let f = fisher_estimate(&pi, samples, 0.0).unwrap();
        for j in 0..9 {
            let mut e = vec![0.0; 9];
            e[j] = 1.0;
            let mut col = vec![0.0; 9];
            f.apply(&e, &mut col).unwrap();
            for i in 0..9 {
                let (si, sj) = (i / 3, j / 3);
                let expect = if si == sj { d[si] * pi.fisher_block(si)[(i % 3) * 3 + j % 3] } else { 0.0 };
                assert_abs_diff_eq!(col[i], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn natural_step_examples() {
        let id = DMatrix::<f64>::identity(2, 2);
        let cg = CgConfig::default();
        let s = natural_gradient_step(&[1.0, 1.0], &[0.5, -1.0], &id, 0.1, false, &cg).unwrap();
        assert_abs_diff_eq!(s.params[0], 1.05, epsilon = 1e-15);
        assert_abs_diff_eq!(s.params[1], 0.9, epsilon = 1e-15);
        let zero = natural_gradient_step(&[1.0, 1.0], &[0.0, 0.0], &id, 0.1, true, &cg).unwrap();
        assert_eq!(zero.params, vec![1.0, 1.0]);
        let a = natural_gradient_step(&[0.0, 0.0], &[0.3, 0.4], &id, 0.1, true, &cg).unwrap();
        let b = natural_gradient_step(&[0.0, 0.0], &[3.0, 4.0], &id, 0.1, true, &cg).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(a.params[0], 0.06, epsilon = 1e-15);
    }

    #[test]
    fn prox_with_zero_gradient_stays_put() {
        let pi = TabularSoftmaxPolicy::new(2, 2, vec![0.1, -0.3, 0.7, 0.2]).unwrap();
        let out = exact_prox_pi(&pi, &[0.0; 4], 0.5, &[0, 1], &ProxConfig::default()).unwrap();
        assert_eq!(out.params, pi.params());
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn prox_shrinks_to_old_params_as_zeta_vanishes() {
        let pi = TabularSoftmaxPolicy::new(2, 2, vec![0.1, -0.3, 0.7, 0.2]).unwrap();
        let g = [0.3, -0.3, -0.2, 0.2];
        let mut last = f64::INFINITY;
        for zeta in [1e-1, 1e-2, 1e-3, 1e-4] {
            let out = exact_prox_pi(&pi, &g, zeta, &[0, 1], &ProxConfig::default()).unwrap();
            let dist = out.params.iter().zip(pi.params()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dist < last);
            last = dist;
        }
        assert!(last < 1e-3);
    }

    #[test]
    fn fit_value_vacuous_stop() {
        let out = fit_value(&[1.0, 2.0], |_| Ok(vec![5.0, 5.0]), |_| 0.1, 10, 1e9).unwrap();
        assert_eq!(out.params, vec![1.0, 2.0]);
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn fit_value_reports_divergence() {
        let err = fit_value(&[1.0], |t| Ok(vec![if t[0] > 3.0 { f64::NAN } else { -1.0 }]), |_| 1.0, 10, 1e-9)
            .unwrap_err();
        match err {
            Error::Diverged { last_finite, .. } => assert_eq!(last_finite, vec![4.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn gradient_descent_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (40, 4);
        let feats: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ms = vec![1.0 / n as f64; n];
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-0.1..0.1)).collect();
        let eta = 0.5;
        let exact = quadratic_value_fit(&b, &feats, &ys, &ms, eta, 0.0, &[0.0; 4]).unwrap();
        let grad = |t: &[f64]| -> Result<Vec<f64>> {
            let mut g = b.clone();
            for ((phi, y), m) in feats.chunks_exact(d).zip(&ys).zip(&ms) {
                let r = y - phi.iter().zip(t).map(|(a, b)| a * b).sum::<f64>();
                for i in 0..d {
                    g[i] -= 2.0 * eta * m * r * phi[i];
                }
            }
            Ok(g)
        };
        let out = fit_value(&[0.0; 4], grad, |_| 2.0, 20_000, 1e-10).unwrap();
        assert!(out.converged);
        for (a, b) in out.params.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
