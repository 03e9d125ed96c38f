//! Forward, backward and bidirectional value functions for tabular policy
//! evaluation: exact solvers, eligibility-trace learners, and an experiment
//! harness for the chain and two-state benchmarks.

pub mod diagnostics;
pub mod error;
pub mod exact;
pub mod features;
pub mod harness;
pub mod learners;
pub mod mdp;
pub mod net;
pub mod reports;

pub use error::{Error, Result};
