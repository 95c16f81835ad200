//! Simulator grounding through learned action transformations.
//!
//! The crate pairs a simulator with a mismatched "real" environment and
//! learns an action transformer that makes simulated transitions look real,
//! either adversarially ([`adversarial`]) or with the forward/inverse-model
//! and action-noise baselines ([`baselines`]). Tabular instances come with
//! exact oracles ([`mdp`], [`grounding`]) that the sampled procedures are
//! checked against.

pub mod adversarial;
pub mod baselines;
pub mod envs;
pub mod error;
pub mod grounding;
pub mod harness;
pub mod mdp;
pub mod nn;
pub mod oracles;

pub use error::{Error, Result};
