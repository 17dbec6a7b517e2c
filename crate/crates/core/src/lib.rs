//! Reference-governor based constrained control for stochastic linear systems
//! with multiple operating modes.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches files,
//! threads or the command line lives in the `aorg` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
#[macro_use]
extern crate std;

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;

pub mod admissible;
pub mod aorg;
pub mod error;
pub mod ftc;
pub mod linalg;
pub mod lp;
pub(crate) mod math;
pub mod mmae;
pub mod model;
pub mod polytope;
pub mod qp;
pub mod recovery;
pub mod sim;
pub mod stochastics;

pub use error::{Error, Result};
