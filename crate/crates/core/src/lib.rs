//! Amortized safe active learning.
//!
//! Gaussian-process task simulation with Fourier-feature function samples,
//! differentiable acquisition objectives, a budget-aware neural query policy
//! with its training loop, conventional GP-based baselines and analytic
//! benchmark problems.

pub mod autodiff;
pub mod baselines;
pub mod benchmarks;
pub mod error;
pub mod gp;
pub mod gradcheck;
pub mod instrument;
pub mod objectives;
pub mod optim;
pub mod policy;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
