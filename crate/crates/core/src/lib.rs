//! Masked discrete diffusion with reward-posterior fine-tuning.

pub mod baselines;
pub mod checks;
pub mod denoiser;
pub mod error;
pub mod forward;
pub mod math;
pub mod objectives;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod sequence;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
