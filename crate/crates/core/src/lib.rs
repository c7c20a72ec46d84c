//! Tensor Ising models on the Boolean hypercube.
//!
//! The crate collects exact (enumeration-based) tools for Gibbs measures
//! `mu(x) ∝ exp(H(x))` on `{-1,1}^n`:
//!
//! * [`spin_space`]: configurations, discrete derivatives, dense measures.
//! * [`tensor_core`]: symmetric fourth-order tensors, flattenings, norms.
//! * [`glauber`]: heat-bath Glauber dynamics, spectral gaps, Dirichlet forms.
//! * [`dobrushin`]: influence/derivative matrices and spectral-gap certificates.
//! * [`tsl`]: tensorized stochastic localization and the decomposition pipeline.
//! * [`curie_weiss`]: the tensor Curie–Weiss magnetization chain.

pub mod curie_weiss;
pub mod dobrushin;
pub mod error;
pub mod glauber;
pub mod linalg;
pub mod rng;
pub mod spin_space;
pub mod tensor_core;
pub mod tsl;

pub use error::{Error, Result};
