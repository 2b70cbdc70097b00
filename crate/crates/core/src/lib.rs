//! Intervention target identification from paired observational and
//! interventional data.
//!
//! The crate covers the whole synthetic pipeline: random structural causal
//! models and corpora ([`scm`], [`corpus`]), summary statistics and tests
//! ([`stats`]), FCI on sampled variable subsets ([`discovery`]) cached as
//! [`features`], the attention model that predicts targets ([`model`]),
//! classical baselines ([`baselines`]) and ranking metrics ([`eval`]).

mod error;
pub mod baselines;
pub mod corpus;
pub mod discovery;
pub mod eval;
pub mod features;
pub mod model;
pub mod scm;
pub mod stats;

pub use error::{CoreError, Result};
