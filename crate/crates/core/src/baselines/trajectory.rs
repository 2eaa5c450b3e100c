use rand::Rng;

use crate::denoiser::{reverse_step, transition_logprob, DenoiserModel};
use crate::error::{Error, Result};
use crate::forward::consistent_masked;
use crate::schedule::NoiseSchedule;
use crate::sequence::{is_neg_inf, MaskedSample, Sequence, TimeGrid, Vocabulary};

/// A reverse path `x_1 → … → x_0` with the log-probability of every step
/// under the model that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<MaskedSample>,
    log_probs: Vec<f64>,
}

impl Trajectory {
    /// Validates: starts at `t = 1`, ends clean at `t = 0`, strictly
    /// decreasing times, and no position is ever re-masked.
    pub fn new(states: Vec<MaskedSample>, log_probs: Vec<f64>, vocab: Vocabulary) -> Result<Self> {
        if states.len() < 2 || log_probs.len() + 1 != states.len() {
            return Err(Error::InvalidInput(format!(
                "trajectory needs k + 1 states for k steps, got {} states and {} log-probs",
                states.len(),
                log_probs.len()
            )));
        }
        let (first, last) = (&states[0], &states[states.len() - 1]);
        if first.t != 1.0 || last.t != 0.0 {
            return Err(Error::InvalidSample(format!(
                "trajectory must run from t = 1 to t = 0, got {} to {}",
                first.t, last.t
            )));
        }
        if !last.seq.is_clean(vocab) {
            return Err(Error::InvalidSample(format!("final state {} is not clean", last.seq)));
        }
        for (i, w) in states.windows(2).enumerate() {
            if !(w[1].t < w[0].t) {
                return Err(Error::InvalidSample(format!("times not decreasing at step {i}")));
            }
            if w[0].len() != w[1].len() || !consistent_masked(&w[0].seq, &w[1].seq, vocab) {
                return Err(Error::InvalidSample(format!(
                    "step {i} changes a visible token: {} -> {}",
                    w[0].seq, w[1].seq
                )));
            }
        }
        Ok(Self { states, log_probs })
    }

    pub fn states(&self) -> &[MaskedSample] {
        &self.states
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn steps(&self) -> usize {
        self.log_probs.len()
    }

    pub fn endpoint(&self) -> &Sequence {
        &self.states[self.states.len() - 1].seq
    }

    /// Log-probability of the whole path under the generating model.
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Runs the reverse chain of `model` on `grid`, one model call per step.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    model: &DenoiserModel,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Trajectory> {
    let vocab = model.vocab();
    let mut x = MaskedSample::all_masked(model.seq_len(), vocab);
    let mut states = vec![x.clone()];
    let mut log_probs = Vec::with_capacity(grid.steps());
    for i in (1..=grid.steps()).rev() {
        let mu = model.predict_mean(&x)?;
        let next = reverse_step(&mu, &x, grid.time(i - 1), schedule, rng)?;
        let lp = transition_logprob(&mu, &x, &next, schedule)?;
        if is_neg_inf(lp) {
            return Err(Error::InvalidSample("sampled a zero-probability transition".into()));
        }
        log_probs.push(lp);
        states.push(next.clone());
        x = next;
    }
    if !x.seq.is_clean(vocab) {
        return Err(Error::Domain(
            "schedule leaves masked tokens at t = 0; trajectories need alpha(0) = 1".into(),
        ));
    }
    Trajectory::new(states, log_probs, vocab)
}
