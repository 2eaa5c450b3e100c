//! Comparison methods: best-of-N, value-guided particle sampling and the
//! relative trajectory balance loss.

mod guidance;
mod rtb;
mod trajectory;

pub use guidance::{best_of_n, guided_particle_sample, ParticleStats, Selection};
pub use rtb::{rtb_loss, RtbLoss, DEFAULT_DETACH_FRACTION};
pub use trajectory::{simulate_trajectory, Trajectory};
