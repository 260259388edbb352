//! Dual actor-critic.
//!
//! The Bellman optimality equation is written as a linear program; its
//! Lagrangian is a two-player game between a weighted actor `alpha(s) pi(a|s)`
//! and a *dual critic* `V`. This crate contains exact tabular oracles for that
//! game (operators, LP duality, Lagrangians and their minimizers), the
//! stochastic estimators and update rules used to play it from samples, and a
//! seeded training driver with ablation variants.

pub mod driver;
pub mod envs;
pub mod error;
pub mod estimators;
pub mod function_approx;
pub mod io;
pub mod lagrangian;
pub mod mdp;
pub mod optimizer;

pub use error::{Error, Result};
