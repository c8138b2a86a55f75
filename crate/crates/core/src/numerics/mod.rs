//! Dense numeric kernel shared by every other module.

mod gradcheck;
mod matrix;
mod real;
mod rng;
mod svd;
pub mod tape;

pub use gradcheck::grad_check;
pub use matrix::Matrix;
pub use real::Real;
pub use rng::{hash64, Rng};
pub use svd::{singular_values, truncated_svd, Svd};
pub use tape::{Grads, Tape, Var};
