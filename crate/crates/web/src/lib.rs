//! Browser demo on a slippery gridworld: solve it exactly, then watch a dual
//! actor-critic agent learn it a few iterations at a time.
//!
//! The plain functions and [`Session`] are usable natively; the
//! `wasm_bindgen` exports only convert errors into JS exceptions.

use serde_json::json;
use wasm_bindgen::prelude::*;

use dual_ac::driver::{DualAcConfig, IterationRecord, TabularTrainer, Trainer};
use dual_ac::envs::tabular::{gridworld_mdp, TabularEnv};
use dual_ac::function_approx::{LinearValue, OneHot, TabularSoftmaxPolicy};
use dual_ac::mdp::{duality_gap, policy_return, LpOracle, TabularMdp, TabularPolicy};
use dual_ac::{Error, Result};

pub const MAX_SIZE: usize = 10;

pub fn build_mdp(size: usize, slip: f64, gamma: f64) -> Result<TabularMdp> {
    if size > MAX_SIZE {
        return Err(Error::InvalidArgument(format!("grid side {size} exceeds {MAX_SIZE}")));
    }
    gridworld_mdp(size, 0.9, slip)?.with_gamma(gamma)
}

fn modes(policy: &TabularPolicy) -> Vec<usize> {
    (0..policy.n_states()).map(|s| policy.mode(s)).collect()
}

/// Exact solution as JSON: `values`, greedy `actions` (0 up, 1 right, 2 down,
/// 3 left), `optimal_return` from the top-left corner and the LP `duality_gap`.
pub fn oracle_report(size: usize, slip: f64, gamma: f64) -> Result<String> {
    let mdp = build_mdp(size, slip, gamma)?;
    let oracle = LpOracle::solve(&mdp, 1e-12)?;
    Ok(json!({
        "size": size,
        "values": oracle.v_star.0,
        "actions": modes(&oracle.pi_star),
        "optimal_return": policy_return(&mdp, &oracle.pi_star)?,
        "duality_gap": duality_gap(&mdp, &oracle.v_star, &oracle.rho_star)?,
    })
    .to_string())
}

pub struct Session {
    size: usize,
    mdp: TabularMdp,
    optimal: f64,
    trainer: TabularTrainer,
    history: Vec<IterationRecord>,
}

impl Session {
    pub fn new(size: usize, slip: f64, gamma: f64, seed: u64, k: usize, eta_v: f64) -> Result<Self> {
        let mdp = build_mdp(size, slip, gamma)?;
        let optimal = policy_return(&mdp, &LpOracle::solve(&mdp, 1e-12)?.pi_star)?;
        let cfg = DualAcConfig {
            seed,
            k,
            eta_v,
            ..DualAcConfig::default()
        };
        cfg.validate()?;
        let env = TabularEnv::new(mdp.clone(), 4 * size * size)?;
        let policy = TabularSoftmaxPolicy::uniform(mdp.n_states(), mdp.n_actions());
        let value = LinearValue::zeros::<usize>(OneHot { n: mdp.n_states() });
        let eval_mdp = mdp.clone();
        let trainer = Trainer::new(env, policy, value, &cfg)?
            .with_evaluator(move |p: &TabularSoftmaxPolicy| policy_return(&eval_mdp, &p.to_tabular()));
        Ok(Self {
            size,
            mdp,
            optimal,
            trainer,
            history: Vec::new(),
        })
    }

    /// Runs `n` more iterations and returns [`Session::snapshot`].
    pub fn advance(&mut self, n: usize) -> Result<String> {
        for _ in 0..n {
            let rec = self.trainer.step()?;
            self.history.push(rec);
        }
        self.snapshot()
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    pub fn optimal(&self) -> f64 {
        self.optimal
    }

    /// Current state as JSON: learned `values`, greedy `actions` with their
    /// `confidence`, and the exact `returns` after every iteration so far.
    pub fn snapshot(&self) -> Result<String> {
        let policy = self.trainer.policy().to_tabular();
        let actions = modes(&policy);
        let confidence: Vec<f64> = actions.iter().enumerate().map(|(s, &a)| policy.prob(s, a)).collect();
        let returns: Vec<f64> = self.history.iter().filter_map(|r| r.exact_return).collect();
        Ok(json!({
            "size": self.size,
            "iteration": self.trainer.iteration(),
            "values": self.trainer.value().weights(),
            "actions": actions,
            "confidence": confidence,
            "returns": returns,
            "current_return": policy_return(&self.mdp, &policy)?,
            "optimal_return": self.optimal,
            "kl": self.history.last().map(|r| r.kl),
        })
        .to_string())
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn solve(size: usize, slip: f64, gamma: f64) -> Result<String, JsError> {
    oracle_report(size, slip, gamma).map_err(js)
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, slip: f64, gamma: f64, seed: u32, k: usize, eta_v: f64) -> Result<Demo, JsError> {
        Session::new(size, slip, gamma, seed as u64, k, eta_v).map(Demo).map_err(js)
    }

    pub fn step(&mut self, n: usize) -> Result<String, JsError> {
        self.0.advance(n).map_err(js)
    }

    pub fn snapshot(&self) -> Result<String, JsError> {
        self.0.snapshot().map_err(js)
    }
}
