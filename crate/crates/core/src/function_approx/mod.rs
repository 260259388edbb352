//! Policy and value parameterizations with hand-derived gradients.

pub mod features;
pub mod policy;
pub mod value;

pub use features::{median_trick_bandwidth, FeatureMap, OneHot, RbfFeatureMap};
pub use policy::{softmax, GaussianRbfPolicy, Policy, TabularSoftmaxPolicy};
pub use value::{LinearValue, TabularValue, ValueFunction};
