//! Feature maps for linear-in-parameter models.

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Point cap for the pairwise-distance median.
pub const MEDIAN_SUBSAMPLE: usize = 1000;

/// Maps a state to a fixed-length real feature vector.
pub trait FeatureMap<S: ?Sized> {
    fn dim(&self) -> usize;

    /// Writes the features of `state` into `out` (length [`dim`](Self::dim)).
    fn features_into(&self, state: &S, out: &mut [f64]) -> Result<()>;

    fn features(&self, state: &S) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.features_into(state, &mut out)?;
        Ok(out)
    }
}

/// Indicator features of a finite state space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneHot {
    pub n: usize,
}

impl FeatureMap<usize> for OneHot {
    fn dim(&self) -> usize {
        self.n
    }

    fn features_into(&self, state: &usize, out: &mut [f64]) -> Result<()> {
        check_dim(self.n, out.len())?;
        if *state >= self.n {
            return Err(Error::InvalidArgument(format!(
                "state {state} out of range for {} states",
                self.n
            )));
        }
        out.fill(0.0);
        out[*state] = 1.0;
        Ok(())
    }
}

/// Random Fourier features `cos(w_j . s / bandwidth + b_j)` of the Gaussian
/// kernel with the given bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfFeatureMap {
    state_dim: usize,
    /// Row-major `[n_features][state_dim]`.
    frequencies: Vec<f64>,
    phases: Vec<f64>,
    bandwidth: f64,
    /// Appends a constant 1 after the random features.
    bias: bool,
}

impl RbfFeatureMap {
    /// Draws `n_features` frequencies from `N(0, I)` and phases from
    /// `U[0, 2 pi)`, deterministically from `seed`.
    pub fn new(state_dim: usize, n_features: usize, bandwidth: f64, seed: u64) -> Result<Self> {
        if state_dim == 0 || n_features == 0 {
            return Err(Error::InvalidArgument(
                "feature map needs positive state and feature dimensions".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = (0..n_features * state_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let phase = Uniform::new(0.0, 2.0 * PI).expect("valid range");
        let phases = (0..n_features).map(|_| phase.sample(&mut rng)).collect();
        Self::from_parts(state_dim, frequencies, phases, bandwidth)
    }

    pub fn from_parts(
        state_dim: usize,
        frequencies: Vec<f64>,
        phases: Vec<f64>,
        bandwidth: f64,
    ) -> Result<Self> {
        check_dim(phases.len() * state_dim, frequencies.len())?;
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        Ok(Self {
            state_dim,
            frequencies,
            phases,
            bandwidth,
            bias: false,
        })
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn n_features(&self) -> usize {
        self.phases.len()
    }

    /// Output length, counting the bias entry.
    pub fn dim(&self) -> usize {
        self.phases.len() + usize::from(self.bias)
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
}

impl FeatureMap<[f64]> for RbfFeatureMap {
    fn dim(&self) -> usize {
        RbfFeatureMap::dim(self)
    }

    fn features_into(&self, state: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.state_dim, state.len())?;
        check_dim(self.dim(), out.len())?;
        let inv_bw = 1.0 / self.bandwidth;
        for (j, (w, b)) in self
            .frequencies
            .chunks_exact(self.state_dim)
            .zip(&self.phases)
            .enumerate()
        {
            let dot: f64 = w.iter().zip(state).map(|(w, s)| w * s).sum();
            out[j] = (dot * inv_bw + b).cos();
        }
        if self.bias {
            out[self.phases.len()] = 1.0;
        }
        Ok(())
    }
}

impl FeatureMap<Vec<f64>> for RbfFeatureMap {
    fn dim(&self) -> usize {
        RbfFeatureMap::dim(self)
    }

    fn features_into(&self, state: &Vec<f64>, out: &mut [f64]) -> Result<()> {
        FeatureMap::<[f64]>::features_into(self, state.as_slice(), out)
    }
}

/// Median pairwise Euclidean distance, over at most [`MEDIAN_SUBSAMPLE`]
/// points chosen deterministically from `seed` when the sample is larger.
pub fn median_trick_bandwidth(states: &[Vec<f64>], seed: u64) -> Result<f64> {
    if states.len() < 2 {
        return Err(Error::InvalidArgument(
            "median trick needs at least two points".into(),
        ));
    }
    let dim = states[0].len();
    if states.iter().any(|s| s.len() != dim) {
        return Err(Error::InvalidArgument("points have mixed dimensions".into()));
    }
    let chosen: Vec<&Vec<f64>> = if states.len() > MEDIAN_SUBSAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, states.len(), MEDIAN_SUBSAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &states[i]).collect()
    } else {
        states.iter().collect()
    };
    let mut dists = Vec::with_capacity(chosen.len() * (chosen.len() - 1) / 2);
    for (i, a) in chosen.iter().enumerate() {
        for b in &chosen[i + 1..] {
            dists.push(
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt(),
            );
        }
    }
    let mid = dists.len() / 2;
    let (_, &mut upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if dists.len() % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if median > 0.0 {
        Ok(median)
    } else {
        Err(Error::InvalidArgument(
            "median pairwise distance is zero; points are (mostly) identical".into(),
        ))
    }
}
