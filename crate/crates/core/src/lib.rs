//! Multicontinuum homogenization for time-fractional diffusion in
//! high-contrast media.

pub mod caputo;
pub mod cells;
pub mod config;
pub mod error;
pub mod fem;
pub mod grid;
pub mod fine;
pub mod macro_solver;
pub mod media;
pub mod metrics;
pub mod pipeline;
pub mod stepper;
pub mod upscale;

pub use error::{Error, Result};
