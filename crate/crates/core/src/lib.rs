//! Data-poisoning attacks, machine-unlearning methods and the statistics used
//! to check whether unlearning actually removed a poison's influence.
//!
//! Modules build on each other bottom-up: [`diffcore`] (models, gradients,
//! training) → [`datakit`] → [`attacks`] → [`unlearn`] → [`evaluate`] →
//! [`hypotheses`].

pub mod attacks;
pub mod datakit;
pub mod diffcore;
pub mod error;
pub mod evaluate;
pub mod hypotheses;
pub mod rng;
pub mod unlearn;

pub use error::{Error, Result};
