//! Autoregressive categorical policy over a small vocabulary.
//!
//! A single [`PolicyParams`] store serves as both student and teacher: the
//! teacher is the same parameters evaluated with feedback tokens prepended
//! to the context.

mod context;
mod params;
mod sample;
mod snapshot;
mod vocab;

pub use context::Context;
pub use params::{softmax_masked, FeatureSpec, GradientRecord, ParamId, PolicyKind, PolicyParams};
pub(crate) use params::standard_normal;
pub use sample::{greedy_decode, sample_trajectory, Trajectory};
pub use snapshot::{MAGIC, VERSION};
pub use vocab::{Emission, Special, Token, Vocabulary};
