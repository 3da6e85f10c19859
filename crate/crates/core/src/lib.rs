//! Backward-factorized variational inference for finite state space models.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches the
//! file system, threads or the clock lives in the `ssvae` companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod bounds;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod math;
pub mod optim;
pub mod rng;
pub mod ssm;
pub mod variational;

pub use error::{Error, Result};

/// Default cap on the number of enumerated sequences or latent paths.
pub const DEFAULT_ENUM_CAP: usize = 1_000_000;
