// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inverse optimal stopping: learn stopping rules from expert trajectories.

#![forbid(unsafe_code)]

pub mod data;
pub mod env;
pub mod error;
pub mod config;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod smdp;
pub mod smote;
pub mod train;

pub use error::{Error, Result};
