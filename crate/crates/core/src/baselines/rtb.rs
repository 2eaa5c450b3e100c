//! Relative trajectory balance:
//! `(log Z + Σ log q(x_{i−1}|x_i) − Σ log p^pre(x_{i−1}|x_i) − log R(x_0))²`.

use rand::seq::index::sample;
use rand::Rng;

use super::Trajectory;
use crate::denoiser::{transition_logprob, transition_logprob_grad, DenoiserModel, LogitGrad};
use crate::error::{Error, Result};
use crate::objectives::{CallCounter, RewardModel};
use crate::schedule::NoiseSchedule;
use crate::sequence::is_neg_inf;

/// Share of steps whose gradient is dropped.
pub const DEFAULT_DETACH_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct RtbLoss {
    pub value: f64,
    /// Gradient with respect to the parameters of `q`.
    pub grad: Vec<f64>,
    /// Gradient with respect to the scalar `log Z`.
    pub grad_log_z: f64,
    pub residual: f64,
}

/// RTB loss of one trajectory. `round(detach_fraction · T)` uniformly chosen
/// steps contribute to the value but not to the gradient of `q`.
#[allow(clippy::too_many_arguments)]
pub fn rtb_loss<R: Rng + ?Sized>(
    q: &DenoiserModel,
    pre: &DenoiserModel,
    reward: &RewardModel,
    log_z: f64,
    traj: &Trajectory,
    detach_fraction: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
    counter: &mut CallCounter,
) -> Result<RtbLoss> {
    if !(0.0..1.0).contains(&detach_fraction) {
        return Err(Error::InvalidInput(format!("detach fraction must lie in [0, 1), got {detach_fraction}")));
    }
    let states = traj.states();
    let from = &states[..states.len() - 1];
    let fwd = q.forward(from)?;
    counter.add_finetuned(from.len());
    let p_mus = pre.predict_batch(from)?;
    counter.add_pretrained(from.len());
    counter.add_reward(1);

    let mut ratio = 0.0;
    for (j, pair) in states.windows(2).enumerate() {
        let lp = transition_logprob(&p_mus[j], &pair[0], &pair[1], schedule)?;
        if is_neg_inf(lp) {
            return Err(Error::InvalidSample(format!(
                "invalid trajectory: step {j} ({} -> {}) is impossible under the pretrained model",
                pair[0].seq, pair[1].seq
            )));
        }
        let lq = transition_logprob(&fwd.outputs[j], &pair[0], &pair[1], schedule)?;
        if is_neg_inf(lq) {
            return Err(Error::InvalidSample(format!("invalid trajectory: step {j} is impossible under q")));
        }
        ratio += lq - lp;
    }
    let r = log_z + ratio - reward.log_reward(traj.endpoint())?;

    let steps = from.len();
    let n_detach = ((detach_fraction * steps as f64).round() as usize).min(steps);
    let mut detached = vec![false; steps];
    for j in sample(rng, steps, n_detach) {
        detached[j] = true;
    }
    let grads: Vec<LogitGrad> = states
        .windows(2)
        .zip(&fwd.outputs)
        .zip(&detached)
        .map(|((pair, mu), &off)| {
            let mut g = LogitGrad::for_output(mu);
            if !off {
                transition_logprob_grad(mu, &pair[0], &pair[1], 2.0 * r, &mut g);
            }
            g
        })
        .collect();
    Ok(RtbLoss {
        value: r * r,
        grad: q.backward(&fwd, &grads),
        grad_log_z: 2.0 * r,
        residual: r,
    })
}
