//! Numeric substrate: dense 64-bit matrices, a seeded splittable RNG, and a
//! finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod rng;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use matrix::{Matrix, NORM_EPS};
pub use rng::Rng;
