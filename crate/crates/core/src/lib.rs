//! One-step generators distilled from diffusion teachers with score identity
//! distillation, optionally with an adversarial term on the fake score
//! network's encoder.

pub mod analytic;
pub mod checkpoint;
pub mod config;
pub mod diffmath;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod plot;
pub mod presets;
pub mod schedule;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
