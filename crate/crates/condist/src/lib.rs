//! Distributional value iteration in a transformed outcome space.
//!
//! The crate provides exact tabular machinery for finite MDPs (value
//! iteration, distributional backups, and a conjugated backup that applies an
//! invertible monotone transform to all outcomes), discrete measures on the
//! real line with a squared Cramér distance and its analytic gradient, and a
//! small replay-trained network agent that fits free-support discrete return
//! distributions by gradient descent on that distance.

pub mod cli;
pub mod error;
pub mod mdp;
pub mod measures;
pub mod operators;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
