//! Probability of the surrogate paradox in a new study that measured only
//! the surrogate, estimated from a Gaussian-process functional class fitted
//! to completed studies.

pub mod elliott;
pub mod error;
pub mod gp_likelihood;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod mle;
pub mod optim;
pub mod parallel;
pub mod resilience;
pub mod rng;
pub mod sim_harness;
pub mod spline_basis;
pub mod stats;

pub use error::{Error, Result};
pub use gp_likelihood::{Group, GroupParams, NewStudySurrogates, StudyData};
pub use kernel::KernelParams;
pub use mle::{FitOptions, FittedGroupModel};
pub use resilience::{EstimateMethod, ResilienceEstimate};
pub use spline_basis::{BasisConfig, BasisSpec};
