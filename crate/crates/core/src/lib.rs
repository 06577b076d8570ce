//! Variational policy distillation on exactly enumerable toy environments.
//!
//! The crate holds the autoregressive policy store, the verifiable
//! environments, an exact-enumeration oracle, the E-step and M-step of the
//! co-evolutionary EM loop, the reinforcement-learning and distillation
//! baselines, and the trainer that ties them together.

pub mod baselines;
pub mod checks;
pub mod env;
pub mod error;
pub mod estep;
pub mod math;
pub mod mstep;
pub mod oracle;
pub mod plot;
pub mod policy;
pub mod report;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
