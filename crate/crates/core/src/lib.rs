//! Federated training of a semantic-communication autoencoder over a simulated
//! Rayleigh fading channel, with exact epoch-budget client selection and
//! fairness/efficiency metrics.

pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod selection;
pub mod semcom;

pub use error::{Error, Result};
