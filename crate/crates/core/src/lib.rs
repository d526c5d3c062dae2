//! Negative-aware diffusion for temporal knowledge graph extrapolation.
//!
//! The crate is `no_std` with `alloc`. File formats, configuration and the
//! command-line driver live in the companion `nadex` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernel;
pub mod negsample;
pub mod objectives;
pub mod synthetic;

pub use error::{Error, Result};

/// Random number generator used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;
