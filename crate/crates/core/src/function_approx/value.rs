//! Linear value functions `V(s) = w . phi(s)`.

use super::features::{FeatureMap, OneHot};
use crate::error::{check_dim, Error, Result};

/// A value function over states of type `S` with a flat parameter vector.
pub trait ValueFunction<S: ?Sized> {
    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// `V(s)`, with `grad_theta V(s)` written to `grad`.
    fn value_and_grad(&self, state: &S, grad: &mut [f64]) -> Result<f64>;

    fn value(&self, state: &S) -> Result<f64> {
        let mut scratch = vec![0.0; self.params().len()];
        self.value_and_grad(state, &mut scratch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearValue<F> {
    features: F,
    weights: Vec<f64>,
}

/// One weight per state.
pub type TabularValue = LinearValue<OneHot>;

impl<F> LinearValue<F> {
    pub fn zeros<S: ?Sized>(features: F) -> Self
    where
        F: FeatureMap<S>,
    {
        let weights = vec![0.0; features.dim()];
        Self { features, weights }
    }

    pub fn with_weights<S: ?Sized>(features: F, weights: Vec<f64>) -> Result<Self>
    where
        F: FeatureMap<S>,
    {
        check_dim(features.dim(), weights.len())?;
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("value weights must be finite".into()));
        }
        Ok(Self { features, weights })
    }

    pub fn feature_map(&self) -> &F {
        &self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }
}

impl TabularValue {
    pub fn tabular(values: Vec<f64>) -> Self {
        Self {
            features: OneHot { n: values.len() },
            weights: values,
        }
    }
}

impl<S: ?Sized, F: FeatureMap<S>> ValueFunction<S> for LinearValue<F> {
    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn value_and_grad(&self, state: &S, grad: &mut [f64]) -> Result<f64> {
        self.features.features_into(state, grad)?;
        Ok(grad.iter().zip(&self.weights).map(|(f, w)| f * w).sum())
    }
}
