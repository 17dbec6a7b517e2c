//! Configuration, file formats, Monte Carlo harness and command line for
//! `aorg-core`.

pub mod app;
pub mod config;
pub mod error;
pub mod io;
pub mod mc;
pub mod oracle;
pub mod report;

pub use error::{AppError, ErrorKind};
