pub mod dual;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod harness;
pub mod identities;
pub mod operators;
pub mod scalar;
pub mod spectral;
pub mod rng;
pub mod stochastic;
