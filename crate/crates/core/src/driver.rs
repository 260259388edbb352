//! The outer training loop: sample under the current policy, fit the dual
//! critic, read off the closed-form start weights, and take a KL-regularized
//! policy step. Ablated variants are configuration switches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::{make_tabular, Environment, Pendulum, PendulumParams, SpaceSpec, TabularEnv};
use crate::error::{Error, Result};
use crate::estimators::{
    derive_seed, mc_return, penalty_samples, sample_trajectories, SegmentBatch, StartMode, Trajectory,
};
use crate::function_approx::{
    median_trick_bandwidth, FeatureMap, GaussianRbfPolicy, LinearValue, OneHot, Policy, RbfFeatureMap,
    TabularSoftmaxPolicy, ValueFunction,
};
use crate::mdp::policy_return;
use crate::optimizer::{
    cg_solve, exact_prox_pi, fisher_estimate, fit_value, natural_gradient_step, quadratic_value_fit, CgConfig,
    ProxConfig, StepsizeSchedule,
};

const POLICY_FEATURE_STREAM: u64 = 0xF0;
const VALUE_FEATURE_STREAM: u64 = 0xF1;
const BANDWIDTH_STREAM: u64 = 0xF2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// `k = 0` and no path regularization.
    NoMultistep,
    /// No path regularization.
    NoPathreg,
    /// The inner fit is cut to a few gradient steps.
    NoUnbiasedV,
    /// `k = 0`, no path regularization, one inner gradient step.
    Naive,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoMultistep,
        Ablation::NoPathreg,
        Ablation::NoUnbiasedV,
        Ablation::Naive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMultistep => "no_multistep",
            Ablation::NoPathreg => "no_pathreg",
            Ablation::NoUnbiasedV => "no_unbiased_v",
            Ablation::Naive => "naive",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSolver {
    /// Closed-form least squares of the sampled objective.
    Exact,
    /// Full-batch gradient descent.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerVConfig {
    pub solver: ValueSolver,
    pub steps: usize,
    /// Gradient step, capped at the inverse of a curvature bound.
    pub kappa: f64,
    /// Proximal pull `ridge * |theta - theta_prev|^2` in the exact solve.
    pub ridge: f64,
    pub tol: f64,
    /// Gradient steps used by the under-fitted variant.
    pub biased_steps: usize,
}

impl Default for InnerVConfig {
    fn default() -> Self {
        Self {
            solver: ValueSolver::Exact,
            steps: 200,
            kappa: 0.05,
            ridge: 1e-6,
            tol: 1e-6,
            biased_steps: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyUpdate {
    NaturalGradient,
    ExactProx,
}

/// Random-feature settings for continuous environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub policy_features: usize,
    pub value_features: usize,
    /// Fixed bandwidth; the median trick on random-action rollouts otherwise.
    pub bandwidth: Option<f64>,
    pub bandwidth_scale: f64,
    pub bandwidth_rollouts: usize,
    pub init_log_std: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            policy_features: 100,
            value_features: 100,
            bandwidth: None,
            bandwidth_scale: 1.0,
            bandwidth_rollouts: 10,
            init_log_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualAcConfig {
    pub k: usize,
    pub eta_v: f64,
    pub eta_alpha: f64,
    pub eta_mu: f64,
    pub schedule: StepsizeSchedule,
    pub batch_m: usize,
    /// Discount; the environment's own when absent.
    pub gamma: Option<f64>,
    /// Episode length; the environment's own when absent.
    pub horizon: Option<usize>,
    pub inner_v: InnerVConfig,
    pub cg: CgConfig,
    pub update: PolicyUpdate,
    pub prox: ProxConfig,
    pub normalize_step: bool,
    pub start_mode: StartMode,
    /// Treat the end of an episode as a time limit and bootstrap there.
    pub time_limit_bootstrap: bool,
    pub ablation: Ablation,
    pub seed: u64,
    pub iterations: usize,
    pub features: FeatureConfig,
    pub pendulum: PendulumParams,
}

impl Default for DualAcConfig {
    fn default() -> Self {
        Self {
            k: 3,
            eta_v: 1.0,
            eta_alpha: 1000.0,
            eta_mu: 0.1,
            schedule: StepsizeSchedule::default(),
            batch_m: 24,
            gamma: None,
            horizon: None,
            inner_v: InnerVConfig::default(),
            cg: CgConfig::default(),
            update: PolicyUpdate::NaturalGradient,
            prox: ProxConfig::default(),
            normalize_step: true,
            start_mode: StartMode::Block,
            time_limit_bootstrap: true,
            ablation: Ablation::Full,
            seed: 0,
            iterations: 300,
            features: FeatureConfig::default(),
            pendulum: PendulumParams::default(),
        }
    }
}

impl DualAcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.eta_v > 0.0 && self.eta_v.is_finite()) {
            return bad(format!("eta_v must be positive, got {}", self.eta_v));
        }
        if !(self.eta_alpha > 0.0 && self.eta_alpha.is_finite()) {
            return bad(format!("eta_alpha must be positive, got {}", self.eta_alpha));
        }
        if !(self.eta_mu > 0.0 && self.eta_mu <= 1.0) {
            return bad(format!("eta_mu must lie in (0, 1], got {}", self.eta_mu));
        }
        if self.batch_m == 0 {
            return bad("batch_m must be positive".into());
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return bad(format!("gamma must lie in (0, 1), got {g}"));
            }
        }
        if self.horizon == Some(0) {
            return bad("horizon must be positive".into());
        }
        if self.inner_v.steps == 0 || self.inner_v.biased_steps == 0 {
            return bad("inner_v step counts must be positive".into());
        }
        if !(self.inner_v.kappa > 0.0 && self.inner_v.ridge >= 0.0 && self.inner_v.tol >= 0.0) {
            return bad("inner_v needs kappa > 0, ridge >= 0, tol >= 0".into());
        }
        if self.cg.max_iters == 0 || !(self.cg.damping >= 0.0) {
            return bad("cg needs max_iters > 0 and damping >= 0".into());
        }
        if self.features.policy_features == 0 || self.features.value_features == 0 {
            return bad("feature counts must be positive".into());
        }
        if !(self.features.bandwidth_scale > 0.0) || self.features.bandwidth.is_some_and(|b| !(b > 0.0)) {
            return bad("bandwidth settings must be positive".into());
        }
        self.schedule.validate()
    }

    /// The configuration with the ablation's overrides applied.
    pub fn effective(&self) -> DualAcConfig {
        let mut c = self.clone();
        match self.ablation {
            Ablation::Full | Ablation::NoUnbiasedV => {}
            Ablation::NoPathreg => c.eta_v = 0.0,
            Ablation::NoMultistep | Ablation::Naive => {
                c.k = 0;
                c.eta_v = 0.0;
            }
        }
        c
    }

    /// Inner gradient steps forced by the ablation, if any.
    pub fn forced_inner_steps(&self) -> Option<usize> {
        match self.ablation {
            Ablation::NoUnbiasedV => Some(self.inner_v.biased_steps),
            Ablation::Naive => Some(1),
            _ => None,
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Batch statistics, sampled under the policy before this iteration's update.
    pub mean_return: f64,
    pub mean_discounted_return: f64,
    pub mean_delta: f64,
    pub mean_alpha: f64,
    /// Gradient norm of the inner objective at the fitted critic.
    pub v_residual: f64,
    pub v_converged: bool,
    pub kl: f64,
    pub stepsize: f64,
    pub step_fallback: bool,
    /// Exact discounted return of the updated policy, for tabular environments.
    pub exact_return: Option<f64>,
    pub wall_time_ms: f64,
}

impl IterationRecord {
    /// The record with its timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_ms: 0.0,
            ..self.clone()
        }
    }
}

/// Steps of one iteration, in the order they ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Sample,
    FitValue,
    Alpha,
    Stepsize,
    PolicyGradient,
    PolicyUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub env: String,
    pub seed: u64,
    pub ablation: Ablation,
    pub iteration: usize,
    pub policy_params: Vec<f64>,
    pub value_params: Vec<f64>,
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub env: String,
    pub seed: u64,
    pub ablation: Ablation,
    pub gamma: f64,
    pub horizon: usize,
    pub bandwidth: Option<f64>,
    pub config: DualAcConfig,
}

/// Receives the metrics stream and checkpoints of a run.
pub trait RecordSink {
    fn begin(&mut self, _meta: &RunMetadata) -> Result<()> {
        Ok(())
    }

    fn record(&mut self, record: &IterationRecord) -> Result<()>;

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()>;
}

/// Keeps everything in memory.
#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub meta: Option<RunMetadata>,
    pub records: Vec<IterationRecord>,
    pub last_checkpoint: Option<Checkpoint>,
}

impl RecordSink for MemorySink {
    fn begin(&mut self, meta: &RunMetadata) -> Result<()> {
        self.meta = Some(meta.clone());
        Ok(())
    }

    fn record(&mut self, record: &IterationRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.last_checkpoint = Some(ckpt.clone());
        Ok(())
    }
}

/// Observations that may index a finite state space.
pub trait Observation: Clone {
    fn discrete_index(&self) -> Option<usize> {
        None
    }
}

impl Observation for usize {
    fn discrete_index(&self) -> Option<usize> {
        Some(*self)
    }
}

impl Observation for Vec<f64> {}

struct Clock {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Clock {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn elapsed_ms(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        {
            self.start.elapsed().as_secs_f64() * 1e3
        }
        #[cfg(target_arch = "wasm32")]
        {
            0.0
        }
    }
}

type Evaluator<P> = Box<dyn Fn(&P) -> Result<f64>>;

/// Training state: environment, policy, dual critic and iteration count.
pub struct Trainer<E: Environment, P, F> {
    env: E,
    policy: P,
    value: LinearValue<F>,
    cfg: DualAcConfig,
    gamma: f64,
    horizon: usize,
    n_discrete: Option<usize>,
    iteration: usize,
    trace: Vec<Phase>,
    evaluator: Option<Evaluator<P>>,
}

impl<E, P, F> Trainer<E, P, F>
where
    E: Environment,
    E::Obs: Observation,
    P: Policy<State = E::Obs, Action = E::Action>,
    F: FeatureMap<E::Obs> + Clone,
{
    pub fn new(env: E, policy: P, value: LinearValue<F>, cfg: &DualAcConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = env.spec();
        let n_discrete = match spec.space {
            SpaceSpec::Discrete { n_states, .. } => Some(n_states),
            SpaceSpec::Continuous { .. } => None,
        };
        Ok(Self {
            env,
            policy,
            value,
            cfg: cfg.effective(),
            gamma: cfg.gamma.unwrap_or(spec.gamma_hint),
            horizon: cfg.horizon.unwrap_or(spec.horizon),
            n_discrete,
            iteration: 0,
            trace: Vec::new(),
            evaluator: None,
        })
    }

    /// Installs an exact return evaluator, reported as `exact_return`.
    pub fn with_evaluator(mut self, f: impl Fn(&P) -> Result<f64> + 'static) -> Self {
        self.evaluator = Some(Box::new(f));
        self
    }

    pub fn policy(&self) -> &P {
        &self.policy
    }

    pub fn value(&self) -> &LinearValue<F> {
        &self.value
    }

    pub fn config(&self) -> &DualAcConfig {
        &self.cfg
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Phases of the most recent iteration, in order.
    pub fn last_trace(&self) -> &[Phase] {
        &self.trace
    }

    pub fn evaluate(&self) -> Option<Result<f64>> {
        self.evaluator.as_ref().map(|f| f(&self.policy))
    }

    pub fn restore(&mut self, iteration: usize, policy_params: &[f64], value_params: &[f64]) -> Result<()> {
        self.policy.set_params(policy_params)?;
        crate::error::check_dim(self.value.weights().len(), value_params.len())?;
        self.value.weights_mut().copy_from_slice(value_params);
        self.iteration = iteration;
        Ok(())
    }

    pub fn sample(&mut self, m: usize, seed: u64) -> Result<Vec<Trajectory<E::Obs, E::Action>>> {
        let mut trajs = sample_trajectories(&mut self.env, &self.policy, m, self.horizon, seed)?;
        if self.cfg.time_limit_bootstrap {
            for t in &mut trajs {
                t.done = false;
            }
        }
        Ok(trajs)
    }

    /// Runs one outer iteration. On error the state is left unchanged.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let t = self.iteration + 1;
        self.step_inner(t).map_err(|e| match e {
            e @ Error::Iteration { .. } => e,
            other => Error::Iteration {
                iteration: t,
                reason: other.to_string(),
            },
        })
    }

    fn alpha_tilde(&self, batch: &SegmentBatch<'_, E::Obs, E::Action>, deltas: &[f64]) -> Result<Vec<f64>> {
        let eta = self.cfg.eta_alpha;
        match self.n_discrete {
            Some(n) => {
                let means = batch.mean_by_start(deltas, n, |s| s.discrete_index().unwrap_or(usize::MAX))?;
                let per_state: Vec<f64> = means.into_iter().map(|m| m.unwrap_or(0.0).max(0.0) / eta).collect();
                Ok(batch
                    .segments()
                    .iter()
                    .map(|seg| per_state[batch.start_state(seg).discrete_index().expect("keyed above")])
                    .collect())
            }
            None => Ok(deltas.iter().map(|d| d.max(0.0) / eta).collect()),
        }
    }

    /// Returns the fitted weights, the inner gradient norm and whether it
    /// reached tolerance.
    fn fit_critic(
        &self,
        batch: &SegmentBatch<'_, E::Obs, E::Action>,
        trajs: &[Trajectory<E::Obs, E::Action>],
    ) -> Result<(Vec<f64>, f64, bool)> {
        let cfg = &self.cfg;
        let prev = self.value.weights().to_vec();
        let penalty = if cfg.eta_v > 0.0 {
            let prev_value = &self.value;
            let boot = |s: &E::Obs| prev_value.value(s);
            penalty_samples(trajs, self.gamma, cfg.start_mode, Some(&boot))?
        } else {
            Vec::new()
        };
        let forced = cfg.forced_inner_steps();
        let use_gd = cfg.eta_v == 0.0 || forced.is_some() || cfg.inner_v.solver == ValueSolver::Sgd;
        let mut probe = self.value.clone();
        if use_gd {
            let steps = forced.unwrap_or(cfg.inner_v.steps);
            // Cap the step by the inverse of a trace bound on the penalty's
            // curvature so plain descent cannot blow up.
            let fmap = self.value.feature_map();
            let mut row = vec![0.0; prev.len()];
            let mut curvature = 0.0;
            for p in &penalty {
                fmap.features_into(&p.state, &mut row)?;
                curvature += 2.0 * cfg.eta_v * p.mass * row.iter().map(|x| x * x).sum::<f64>();
            }
            let kappa = if curvature > 0.0 {
                cfg.inner_v.kappa.min(1.0 / curvature)
            } else {
                cfg.inner_v.kappa
            };
            let mut scratch = self.value.clone();
            let out = fit_value(
                &prev,
                |theta| {
                    scratch.weights_mut().copy_from_slice(theta);
                    batch.grad_v(&scratch, &penalty, cfg.eta_v)
                },
                |_| kappa,
                steps,
                cfg.inner_v.tol,
            )?;
            return Ok((out.params, out.grad_norm, out.converged));
        }
        let fmap = self.value.feature_map();
        let dim = prev.len();
        let b = batch.linear_coefficient(|s, out| fmap.features_into(s, out), dim)?;
        let mut feats = vec![0.0; penalty.len() * dim];
        for (row, p) in feats.chunks_exact_mut(dim).zip(&penalty) {
            fmap.features_into(&p.state, row)?;
        }
        let targets: Vec<f64> = penalty.iter().map(|p| p.target).collect();
        let masses: Vec<f64> = penalty.iter().map(|p| p.mass).collect();
        let ridge = cfg.inner_v.ridge;
        let theta = quadratic_value_fit(&b, &feats, &targets, &masses, cfg.eta_v, ridge, &prev)?;
        probe.weights_mut().copy_from_slice(&theta);
        let mut g = batch.grad_v(&probe, &penalty, cfg.eta_v)?;
        for ((gi, th), pr) in g.iter_mut().zip(&theta).zip(&prev) {
            *gi += 2.0 * ridge * (th - pr);
        }
        let resid = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !resid.is_finite() {
            return Err(Error::Numerical("inner value fit produced non-finite weights".into()));
        }
        let converged = resid <= cfg.inner_v.tol.max(1e-9 * (1.0 + norm(&theta)));
        Ok((theta, resid, converged))
    }

    fn step_inner(&mut self, t: usize) -> Result<IterationRecord> {
        let clock = Clock::start();
        self.trace.clear();
        let cfg = self.cfg.clone();

        self.trace.push(Phase::Sample);
        let trajs = self.sample(cfg.batch_m, derive_seed(cfg.seed, t as u64))?;
        let mut batch = SegmentBatch::new(&trajs, self.gamma, cfg.k, cfg.start_mode)?;

        self.trace.push(Phase::FitValue);
        let prev_deltas = batch.deltas(&batch.state_values(&self.value)?);
        let prev_alpha = self.alpha_tilde(&batch, &prev_deltas)?;
        batch.set_weights(start_weights(&batch, &prev_alpha, cfg.eta_mu))?;
        let (v_params, v_residual, v_converged) = self.fit_critic(&batch, &trajs)?;
        let mut value = self.value.clone();
        value.weights_mut().copy_from_slice(&v_params);

        self.trace.push(Phase::Alpha);
        let deltas = batch.deltas(&batch.state_values(&value)?);
        let alpha = self.alpha_tilde(&batch, &deltas)?;

        self.trace.push(Phase::Stepsize);
        let zeta = cfg.schedule.stepsize(t)?;

        self.trace.push(Phase::PolicyGradient);
        batch.set_weights(start_weights(&batch, &alpha, cfg.eta_mu))?;
        let g = batch.grad_pi(&deltas, &self.policy)?;

        self.trace.push(Phase::PolicyUpdate);
        let n_steps: usize = trajs.iter().map(|tr| tr.len()).sum();
        let w = 1.0 / n_steps as f64;
        let samples = trajs
            .iter()
            .flat_map(|tr| tr.states.iter().zip(&tr.actions).map(move |(s, a)| (s, a, w)));
        let fisher = fisher_estimate(&self.policy, samples, cfg.cg.damping)?;
        let (new_params, fallback) = match cfg.update {
            PolicyUpdate::NaturalGradient => {
                let step = natural_gradient_step(self.policy.params(), &g, &fisher, zeta, cfg.normalize_step, &cfg.cg)?;
                (step.params, step.fallback)
            }
            PolicyUpdate::ExactProx => {
                let mut z = zeta;
                let mut fallback = false;
                if cfg.normalize_step && g.iter().any(|x| *x != 0.0) {
                    let dir = cg_solve(&fisher, &g, &cfg.cg)?.x;
                    let q: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
                    if q > 0.0 && q.is_finite() {
                        z = zeta / q.sqrt();
                    } else {
                        fallback = true;
                    }
                }
                let states: Vec<E::Obs> = trajs.iter().flat_map(|tr| tr.states[..tr.len()].iter().cloned()).collect();
                (exact_prox_pi(&self.policy, &g, z, &states, &cfg.prox)?.params, fallback)
            }
        };
        if new_params.iter().any(|x| !x.is_finite()) {
            return Err(Error::Iteration {
                iteration: t,
                reason: "policy update produced non-finite parameters".into(),
            });
        }
        let mut new_policy = self.policy.clone();
        new_policy.set_params(&new_params)?;

        let mut scratch = vec![0.0; new_params.len()];
        let mut kl = 0.0;
        for tr in &trajs {
            for s in &tr.states[..tr.len()] {
                kl += new_policy.kl_and_grad(&self.policy, s, &mut scratch)?;
            }
        }
        kl *= w;

        let m = trajs.len() as f64;
        let mass_total: f64 = batch.segments().iter().map(|s| s.mass).sum();
        let record = IterationRecord {
            iteration: t,
            mean_return: trajs.iter().map(|tr| tr.undiscounted_return()).sum::<f64>() / m,
            mean_discounted_return: trajs.iter().map(|tr| mc_return(tr, self.gamma, None)).sum::<f64>() / m,
            mean_delta: batch.segments().iter().zip(&deltas).map(|(s, d)| s.mass * d).sum::<f64>() / mass_total,
            mean_alpha: batch.segments().iter().zip(&alpha).map(|(s, a)| s.mass * a).sum::<f64>() / mass_total,
            v_residual,
            v_converged,
            kl,
            stepsize: zeta,
            step_fallback: fallback,
            exact_return: match &self.evaluator {
                Some(f) => Some(f(&new_policy)?),
                None => None,
            },
            wall_time_ms: 0.0,
        };

        self.policy = new_policy;
        self.value = value;
        self.iteration = t;
        Ok(IterationRecord {
            wall_time_ms: clock.elapsed_ms(),
            ..record
        })
    }
}

/// `alpha_tilde + eta_mu`, rescaled to unit mean under the sampling masses so
/// that the weighted start distribution is again a probability distribution.
fn start_weights<S, A>(batch: &SegmentBatch<'_, S, A>, alpha: &[f64], eta_mu: f64) -> Vec<f64> {
    let segs = batch.segments();
    let mass: f64 = segs.iter().map(|s| s.mass).sum();
    let total: f64 = segs.iter().zip(alpha).map(|(s, a)| s.mass * (a + eta_mu)).sum();
    alpha.iter().map(|a| (a + eta_mu) * mass / total).collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub type TabularTrainer = Trainer<TabularEnv, TabularSoftmaxPolicy, OneHot>;
pub type PendulumTrainer = Trainer<Pendulum, GaussianRbfPolicy, RbfFeatureMap>;

/// A trainer for any registered environment.
pub enum AnyTrainer {
    Tabular(TabularTrainer),
    Pendulum(PendulumTrainer),
}

/// Episode length that keeps the discounted tail below `1e-4`.
fn effective_horizon(gamma: f64) -> usize {
    ((1e-4f64).ln() / gamma.ln()).ceil().max(1.0) as usize
}

/// Resolves a registered tabular name or `mdp:<path>`, applying the gamma and
/// horizon overrides of `cfg`.
pub fn tabular_env(name: &str, cfg: &DualAcConfig) -> Result<TabularEnv> {
    let base = match name.strip_prefix("mdp:") {
        Some(path) => {
            let mdp = crate::io::load_mdp(path)?;
            let h = effective_horizon(mdp.gamma());
            TabularEnv::new(mdp, h)?
        }
        None => make_tabular(name)?,
    };
    let mdp = match cfg.gamma {
        Some(g) => base.mdp().with_gamma(g)?,
        None => base.mdp().clone(),
    };
    TabularEnv::new(mdp, cfg.horizon.unwrap_or(base.horizon()))
}

/// Median pairwise distance of observations from uniformly random torques.
pub fn pendulum_bandwidth(params: &PendulumParams, rollouts: usize, seed: u64) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let mut env = Pendulum::new(params.clone())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Vec::with_capacity(rollouts * params.horizon);
    for l in 0..rollouts.max(1) {
        obs.push(env.reset(derive_seed(seed, l as u64)));
        loop {
            let u = rng.random_range(-params.max_torque..=params.max_torque);
            let out = env.step(&vec![u])?;
            obs.push(out.observation);
            if out.done {
                break;
            }
        }
    }
    median_trick_bandwidth(&obs, seed)
}

impl AnyTrainer {
    pub fn new(cfg: &DualAcConfig, env_name: &str) -> Result<Self> {
        Self::build(cfg, env_name, None)
    }

    fn build(cfg: &DualAcConfig, env_name: &str, bandwidth: Option<f64>) -> Result<Self> {
        cfg.validate()?;
        if env_name == "pendulum" {
            let mut params = cfg.pendulum.clone();
            if let Some(h) = cfg.horizon {
                params.horizon = h;
            }
            let bw = match bandwidth.or(cfg.features.bandwidth) {
                Some(b) => b,
                None => {
                    pendulum_bandwidth(&params, cfg.features.bandwidth_rollouts, derive_seed(cfg.seed, BANDWIDTH_STREAM))?
                        * cfg.features.bandwidth_scale
                }
            };
            let env = Pendulum::new(params)?;
            let pf = RbfFeatureMap::new(3, cfg.features.policy_features, bw, derive_seed(cfg.seed, POLICY_FEATURE_STREAM))?;
            let vf = RbfFeatureMap::new(3, cfg.features.value_features, bw, derive_seed(cfg.seed, VALUE_FEATURE_STREAM))?
                .with_bias(true);
            let policy = GaussianRbfPolicy::new(pf, 1, cfg.features.init_log_std)?;
            let value = LinearValue::zeros::<Vec<f64>>(vf);
            return Ok(AnyTrainer::Pendulum(Trainer::new(env, policy, value, cfg)?));
        }
        let env = tabular_env(env_name, cfg)?;
        let mdp = env.mdp().clone();
        let policy = TabularSoftmaxPolicy::uniform(mdp.n_states(), mdp.n_actions());
        let value = LinearValue::zeros::<usize>(OneHot { n: mdp.n_states() });
        let trainer = Trainer::new(env, policy, value, cfg)?
            .with_evaluator(move |p: &TabularSoftmaxPolicy| policy_return(&mdp, &p.to_tabular()));
        Ok(AnyTrainer::Tabular(trainer))
    }

    pub fn from_checkpoint(cfg: &DualAcConfig, ckpt: &Checkpoint) -> Result<Self> {
        let cfg = DualAcConfig {
            seed: ckpt.seed,
            ablation: ckpt.ablation,
            ..cfg.clone()
        };
        let mut trainer = Self::build(&cfg, &ckpt.env, ckpt.bandwidth)?;
        match &mut trainer {
            AnyTrainer::Tabular(t) => t.restore(ckpt.iteration, &ckpt.policy_params, &ckpt.value_params)?,
            AnyTrainer::Pendulum(t) => t.restore(ckpt.iteration, &ckpt.policy_params, &ckpt.value_params)?,
        }
        Ok(trainer)
    }

    pub fn step(&mut self) -> Result<IterationRecord> {
        match self {
            AnyTrainer::Tabular(t) => t.step(),
            AnyTrainer::Pendulum(t) => t.step(),
        }
    }

    pub fn iteration(&self) -> usize {
        match self {
            AnyTrainer::Tabular(t) => t.iteration(),
            AnyTrainer::Pendulum(t) => t.iteration(),
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            AnyTrainer::Tabular(t) => t.gamma(),
            AnyTrainer::Pendulum(t) => t.gamma(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            AnyTrainer::Tabular(t) => t.horizon(),
            AnyTrainer::Pendulum(t) => t.horizon(),
        }
    }

    pub fn bandwidth(&self) -> Option<f64> {
        match self {
            AnyTrainer::Tabular(_) => None,
            AnyTrainer::Pendulum(t) => Some(t.policy().feature_map().bandwidth()),
        }
    }

    pub fn checkpoint(&self, env_name: &str) -> Checkpoint {
        let (cfg, policy_params, value_params) = match self {
            AnyTrainer::Tabular(t) => (t.config(), t.policy().params().to_vec(), t.value().weights().to_vec()),
            AnyTrainer::Pendulum(t) => (t.config(), t.policy().params().to_vec(), t.value().weights().to_vec()),
        };
        Checkpoint {
            env: env_name.to_string(),
            seed: cfg.seed,
            ablation: cfg.ablation,
            iteration: self.iteration(),
            policy_params,
            value_params,
            bandwidth: self.bandwidth(),
        }
    }
}

/// Trains for `cfg.iterations` iterations, streaming records and a checkpoint
/// after each one into `sink`.
pub fn run_experiment(cfg: &DualAcConfig, env_name: &str, sink: &mut dyn RecordSink) -> Result<Vec<IterationRecord>> {
    let mut trainer = AnyTrainer::new(cfg, env_name)?;
    sink.begin(&RunMetadata {
        env: env_name.to_string(),
        seed: cfg.seed,
        ablation: cfg.ablation,
        gamma: trainer.gamma(),
        horizon: trainer.horizon(),
        bandwidth: trainer.bandwidth(),
        config: cfg.clone(),
    })?;
    sink.checkpoint(&trainer.checkpoint(env_name))?;
    let mut records = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let rec = trainer.step()?;
        sink.record(&rec)?;
        sink.checkpoint(&trainer.checkpoint(env_name))?;
        records.push(rec);
    }
    Ok(records)
}

/// Final performance of a run: the mean over the last `window` records of the
/// exact return when available, otherwise of the batch return.
pub fn final_return(records: &[IterationRecord], window: usize) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let tail = &records[records.len().saturating_sub(window.max(1))..];
    let pick = |r: &IterationRecord| r.exact_return.unwrap_or(r.mean_return);
    Some(tail.iter().map(pick).sum::<f64>() / tail.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub final_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mean: f64,
    /// Standard error of the mean over seeds.
    pub half_width: f64,
    pub n: usize,
}

impl VariantSummary {
    pub fn overlaps(&self, other: &VariantSummary) -> bool {
        (self.mean - other.mean).abs() <= self.half_width + other.half_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub env: String,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<VariantSummary>,
}

impl AblationTable {
    pub fn get(&self, variant: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }
}

pub fn summarize(variant: &str, values: &[f64]) -> VariantSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let half_width = if n > 1 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    VariantSummary {
        variant: variant.to_string(),
        mean,
        half_width,
        n,
    }
}

/// The variants run by [`ablation_suite`]: the base configuration as `full`,
/// `full_k10`/`full_k50` where they differ from it and fit in the horizon, and
/// each ablation.
pub fn ablation_variants(base: &DualAcConfig, horizon: usize) -> Vec<(String, DualAcConfig)> {
    let mut out = vec![(
        "full".to_string(),
        DualAcConfig {
            ablation: Ablation::Full,
            ..base.clone()
        },
    )];
    for k in [10usize, 50] {
        if k != base.k && k < horizon {
            out.push((
                format!("full_k{k}"),
                DualAcConfig {
                    k,
                    ablation: Ablation::Full,
                    ..base.clone()
                },
            ));
        }
    }
    for a in &Ablation::ALL[1..] {
        out.push((
            a.name().to_string(),
            DualAcConfig {
                ablation: *a,
                ..base.clone()
            },
        ));
    }
    out
}

/// Runs every variant for every seed; `window` is the number of final
/// iterations averaged when no exact return is available.
pub fn ablation_suite(base: &DualAcConfig, env_name: &str, seeds: &[u64], window: usize) -> Result<AblationTable> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("ablation needs at least two seeds".into()));
    }
    let horizon = AnyTrainer::new(base, env_name)?.horizon();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (label, cfg) in ablation_variants(base, horizon) {
        let mut finals = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run_cfg = DualAcConfig { seed, ..cfg.clone() };
            let mut sink = MemorySink::default();
            let records = run_experiment(&run_cfg, env_name, &mut sink).map_err(|e| match e {
                Error::Iteration { iteration, reason } => Error::Iteration {
                    iteration,
                    reason: format!("{label} seed {seed}: {reason}"),
                },
                other => other,
            })?;
            let f = final_return(&records, window)
                .ok_or_else(|| Error::InvalidArgument("ablation runs need at least one iteration".into()))?;
            rows.push(AblationRow {
                variant: label.clone(),
                seed,
                final_return: f,
            });
            finals.push(f);
        }
        summary.push(summarize(&label, &finals));
    }
    Ok(AblationTable {
        env: env_name.to_string(),
        rows,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::tabular::single_state_mdp;

    fn quick(iterations: usize) -> DualAcConfig {
        DualAcConfig {
            iterations,
            batch_m: 8,
            ..Default::default()
        }
    }

    #[test]
    fn ablation_overrides() {
        let base = DualAcConfig::default();
        let eff = |a| DualAcConfig { ablation: a, ..base.clone() }.effective();
        assert_eq!(eff(Ablation::Full), base);
        assert_eq!((eff(Ablation::NoMultistep).k, eff(Ablation::NoMultistep).eta_v), (0, 0.0));
        assert_eq!((eff(Ablation::NoPathreg).k, eff(Ablation::NoPathreg).eta_v), (base.k, 0.0));
        assert_eq!((eff(Ablation::Naive).k, eff(Ablation::Naive).eta_v), (0, 0.0));
        assert_eq!(DualAcConfig { ablation: Ablation::Naive, ..base.clone() }.forced_inner_steps(), Some(1));
        let biased = DualAcConfig { ablation: Ablation::NoUnbiasedV, ..base.clone() };
        assert_eq!(biased.effective().eta_v, base.eta_v);
        assert_eq!(biased.forced_inner_steps(), Some(2));
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            DualAcConfig { eta_v: 0.0, ..Default::default() },
            DualAcConfig { eta_mu: 1.5, ..Default::default() },
            DualAcConfig { batch_m: 0, ..Default::default() },
            DualAcConfig { gamma: Some(1.0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn single_state_critic_reaches_fixed_point() {
        let mdp = single_state_mdp(0.9);
        let env = TabularEnv::new(mdp, 200).unwrap();
        let cfg = DualAcConfig {
            eta_v: 1.0,
            batch_m: 4,
            start_mode: StartMode::Initial,
            time_limit_bootstrap: false,
            inner_v: InnerVConfig {
                ridge: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let policy = TabularSoftmaxPolicy::uniform(1, 1);
        let value = LinearValue::zeros::<usize>(OneHot { n: 1 });
        let mut tr = Trainer::new(env, policy, value, &cfg).unwrap();
        let rec = tr.step().unwrap();
        let v_star = 1.0 / (1.0 - 0.9);
        // The 200-step return truncates the geometric tail by 0.9^200 < 1e-9.
        assert!((tr.value().weights()[0] - v_star).abs() < 1e-6, "{:?}", tr.value().weights());
        assert!(rec.v_converged);
        assert_eq!(tr.policy().params(), &[0.0]);
    }

    #[test]
    fn phases_run_in_algorithm_order() {
        let mut t = AnyTrainer::new(&quick(1), "chain2").unwrap();
        t.step().unwrap();
        let AnyTrainer::Tabular(t) = t else { unreachable!() };
        assert_eq!(
            t.last_trace(),
            &[
                Phase::Sample,
                Phase::FitValue,
                Phase::Alpha,
                Phase::Stepsize,
                Phase::PolicyGradient,
                Phase::PolicyUpdate
            ]
        );
    }

    #[test]
    fn zero_iterations_give_only_the_initial_checkpoint() {
        let mut sink = MemorySink::default();
        let recs = run_experiment(&quick(0), "chain2", &mut sink).unwrap();
        assert!(recs.is_empty() && sink.records.is_empty());
        assert_eq!(sink.last_checkpoint.unwrap().iteration, 0);
    }

    #[test]
    fn unknown_env_is_reported() {
        assert!(matches!(AnyTrainer::new(&quick(1), "cartpole"), Err(Error::UnknownEnv(_))));
    }

    #[test]
    fn variants_respect_the_horizon() {
        let names = |cfg: &DualAcConfig, h| ablation_variants(cfg, h).into_iter().map(|v| v.0).collect::<Vec<_>>();
        let base = DualAcConfig::default();
        assert_eq!(names(&base, 10), ["full", "no_multistep", "no_pathreg", "no_unbiased_v", "naive"]);
        assert_eq!(names(&base, 50)[..2], ["full", "full_k10"]);
        assert_eq!(names(&base, 200)[..3], ["full", "full_k10", "full_k50"]);
        let k10 = DualAcConfig { k: 10, ..base };
        assert_eq!(names(&k10, 200)[..2], ["full", "full_k50"]);
    }

    #[test]
    fn summary_statistics() {
        let s = summarize("x", &[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.half_width - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
