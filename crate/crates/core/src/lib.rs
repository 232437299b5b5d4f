//! Numerical core for batch off-policy policy optimization with state
//! distribution correction.
//!
//! Everything in this crate is pure computation over caller-owned data and
//! caller-owned random number generators. It builds without `std` (only
//! `alloc` is required); file formats, the checkpoint directory and the
//! command line live in the companion `opposd-lab` crate.
//!
//! Module map:
//!
//! - [`nn`]: dense MLPs with ReLU hidden layers, softmax/softplus/linear heads,
//!   manual backpropagation, Adam, entropy and finite-difference checks.
//! - [`mdp`]: tabular MDPs with exact value, occupancy and gradient oracles,
//!   the augmented (support-restricted) MDP and the aliased hard example.
//! - [`env`]: simulators used for data collection (cart-pole, tabular).
//! - [`data`]: logged trajectories, padding, epsilon smoothing, normalization
//!   and the discounted-timestep mini-batch sampler.
//! - [`ratio`]: kernel estimation of the state distribution ratio.
//! - [`critic`]: importance-weighted lambda-return value learning.
//! - [`actor`]: behavior cloning, corrected and uncorrected actor gradients and
//!   the full training loop.
//! - [`oppe`]: ratio-based off-policy evaluation and checkpoint selection.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod actor;
pub mod critic;
pub mod data;
pub mod env;
pub mod error;
pub mod mdp;
pub mod nn;
pub mod oppe;
pub mod ratio;
pub mod rng;

mod math;

pub use error::{Error, Result};
