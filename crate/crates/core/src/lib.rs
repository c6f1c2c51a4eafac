//! Bell inequality violations with threshold photon detectors.
//!
//! The crate computes CH and post-selected CHSH values when each party's
//! detectors only fire above a photon-number threshold and the source emits
//! several entangled pairs per round, and optimizes those values over
//! measurement settings, state entanglement and noise.

pub mod bell;
pub mod counting;
pub mod detectors;
pub mod error;
pub mod optimize;
pub mod quantum;
pub mod rng;

pub use error::{Error, Result};
