//! Budget-constrained low-rank distillation.
//!
//! The crate is `no_std` (with `alloc`) so the algorithmic pieces can be
//! embedded anywhere; IO, configuration files and the command line live in
//! the companion `budlora` crate.
//!
//! Layout:
//! - [`numerics`]: matrices, seeded RNG, truncated SVD, reverse-mode tape, gradient checks
//! - [`gatedlora`]: the gated low-rank linear module
//! - [`budget`]: cosine dense-budget schedule and the greedy retention controller
//! - [`model`]: toy decoder-only transformer and student construction
//! - [`distill`]: KD objective, optimizer, LR schedule, synthetic corpus and training loop
//! - [`compress`]: post-training gate hardening and deployment conversion
//! - [`accounting`]: MAC / parameter tallies and training-compute proxies
//! - [`evalharness`]: perplexity and few-shot probe suite

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod accounting;
pub mod budget;
pub mod compress;
pub mod distill;
mod error;
pub mod evalharness;
pub mod exec;
pub mod gatedlora;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
pub use exec::{Executor, Serial};
pub use numerics::{Matrix, Real, Rng};
