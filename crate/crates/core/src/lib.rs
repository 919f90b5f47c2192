//! Safe chance-constrained policy optimisation for uncertain batch processes.
//!
//! The crate trains control policies offline against a Gaussian-process
//! state-space model, tightens affine state constraints with
//! Cantelli-Chebyshev backoffs inside a penalty-shaped PPO objective, and
//! tunes the backoff multipliers with Bayesian optimisation. A stochastic
//! fed-batch lutein photo-production simulator acts as the "real" process
//! for data generation and validation.

pub mod autodiff;
pub mod bo;
pub mod constraints;
pub mod env;
pub mod error;
pub mod gp;
pub mod policy;
pub mod realization;
pub mod rng;
pub mod sobol;
pub mod special;

pub use constraints::{BackoffMultipliers, ConstraintSpec, PenaltyConfig, SatisfactionEstimate};
pub use error::CoreError;
pub use gp::{Dataset, GpModel, GpStateSpaceModel, KernelHyperparams, KernelKind};
pub use policy::{Arch, ObsSpec, PolicyParams, PpoConfig, ValueParams};
pub use realization::{ConditionedGp, Trajectory};
