//! File formats, checkpoint store and command runner around `opposd-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset_file;
pub mod error;
pub mod gradcheck;
pub mod matfile;
pub mod mdp_file;
pub mod metrics;
pub mod runner;

pub use error::{LabError, LabResult};
