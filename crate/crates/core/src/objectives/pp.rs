//! Single-step posterior-predictive losses.
//!
//! For a clean `x_0` and its corruption `x_t` the residual is
//!
//! ```text
//! r = log q(x_0|x_t) − log p^pre(x_0|x_t) − log R(x_0) + log Z(x_t)
//! ```
//!
//! and the loss is `r²`. The variants differ in where `log Z` comes from: a
//! learned head (LB) or an importance-sampled estimate (IS).

use rand::Rng;

use super::logz::{logz_is_with, logz_mc};
use super::{CallCounter, LogZHead, LossGrad, RewardModel};
use crate::denoiser::{endpoint_logprob, endpoint_logprob_grad, Adam, DenoiserModel, DenoiserOutput, LogitGrad};
use crate::error::{Error, Result};
use crate::forward::mask_forward;
use crate::schedule::NoiseSchedule;
use crate::sequence::{is_neg_inf, MaskedSample, Sequence};

/// Corrupts each clean sequence at an independent `t ~ U[0, 1]`.
pub fn noised_batch<R: Rng + ?Sized>(
    x0s: &[Sequence],
    schedule: &NoiseSchedule,
    vocab: crate::sequence::Vocabulary,
    rng: &mut R,
) -> Result<Vec<(Sequence, MaskedSample)>> {
    x0s.iter()
        .map(|x0| {
            let t: f64 = rng.gen();
            Ok((x0.clone(), mask_forward(x0, t, schedule, vocab, rng)?))
        })
        .collect()
}

fn residual(
    q_mu: &DenoiserOutput,
    p_mu: &DenoiserOutput,
    reward: &RewardModel,
    x0: &Sequence,
    xt: &MaskedSample,
    log_z: f64,
) -> Result<f64> {
    let lq = endpoint_logprob(q_mu, xt, x0)?;
    let lp = endpoint_logprob(p_mu, xt, x0)?;
    if is_neg_inf(lq) || is_neg_inf(lp) {
        return Err(Error::InvalidSample(format!("endpoint {x0} is unreachable from {}", xt.seq)));
    }
    Ok(lq - lp - reward.log_reward(x0)? + log_z)
}

/// `r²` for one pair, with gradients into `q` only.
pub fn ddpp_single_step_loss(
    q: &DenoiserModel,
    pre: &DenoiserModel,
    reward: &RewardModel,
    x0: &Sequence,
    xt: &MaskedSample,
    log_z: f64,
) -> Result<LossGrad> {
    let fwd = q.forward(std::slice::from_ref(xt))?;
    let p_mu = pre.predict_mean(xt)?;
    let q_mu = &fwd.outputs[0];
    let r = residual(q_mu, &p_mu, reward, x0, xt, log_z)?;
    let mut g = LogitGrad::for_output(q_mu);
    endpoint_logprob_grad(q_mu, xt, x0, 2.0 * r, &mut g);
    Ok(LossGrad {
        value: r * r,
        grad: q.backward(&fwd, &[g]),
    })
}

/// Summary of one posterior-predictive training step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpStepStats {
    /// Mean squared residual over the used batch elements.
    pub loss: f64,
    /// Mean `log Z` value used.
    pub mean_log_z: f64,
    /// Elements dropped as invalid samples.
    pub skipped: usize,
    /// IS estimates that fell back to plain Monte Carlo.
    pub fallbacks: usize,
}

fn apply(model: &mut DenoiserModel, opt: &mut Adam, grad: &[f64]) -> Result<()> {
    opt.step(model.params_mut(), grad)
}

/// Accumulates residual gradients into `q`; returns per-element residuals
/// (`None` for skipped elements).
fn residuals(
    q_mus: &[DenoiserOutput],
    p_mus: &[DenoiserOutput],
    reward: &RewardModel,
    batch: &[(Sequence, MaskedSample)],
    log_z: &[f64],
) -> Result<Vec<Option<f64>>> {
    let mut out = Vec::with_capacity(batch.len());
    for (i, (x0, xt)) in batch.iter().enumerate() {
        match residual(&q_mus[i], &p_mus[i], reward, x0, xt, log_z[i]) {
            Ok(r) => out.push(Some(r)),
            Err(Error::InvalidSample(_)) => out.push(None),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// One step of the learned-bound variant: `log Z` comes from `head`.
///
/// During warmup only the head moves. Otherwise `q` and the head take one
/// joint step, each with its own optimizer.
#[allow(clippy::too_many_arguments)]
pub fn ddpp_lb_train_step(
    q: &mut DenoiserModel,
    q_opt: &mut Adam,
    head: &mut LogZHead,
    pre: &DenoiserModel,
    reward: &RewardModel,
    batch: &[(Sequence, MaskedSample)],
    warmup: bool,
    counter: &mut CallCounter,
) -> Result<PpStepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    let xts: Vec<MaskedSample> = batch.iter().map(|(_, xt)| xt.clone()).collect();
    let fwd = q.forward(&xts)?;
    counter.add_finetuned(xts.len());
    let p_mus = pre.predict_batch(&xts)?;
    counter.add_pretrained(xts.len());
    counter.add_reward(xts.len());
    let (log_z, tape) = head.forward(&xts)?;
    let rs = residuals(&fwd.outputs, &p_mus, reward, batch, &log_z)?;

    let used = rs.iter().filter(|r| r.is_some()).count();
    let mut stats = PpStepStats {
        skipped: batch.len() - used,
        ..Default::default()
    };
    if used == 0 {
        return Ok(stats);
    }
    let scale = 1.0 / used as f64;
    let mut dz = vec![0.0; batch.len()];
    let mut grads = Vec::with_capacity(batch.len());
    for (i, ((x0, xt), r)) in batch.iter().zip(&rs).enumerate() {
        let mut g = LogitGrad::for_output(&fwd.outputs[i]);
        if let Some(r) = *r {
            stats.loss += scale * r * r;
            stats.mean_log_z += scale * log_z[i];
            dz[i] = 2.0 * r * scale;
            if !warmup {
                endpoint_logprob_grad(&fwd.outputs[i], xt, x0, 2.0 * r * scale, &mut g);
            }
        }
        grads.push(g);
    }
    let head_grad = head.backward(&tape, &dz);
    if !warmup {
        let q_grad = q.backward(&fwd, &grads);
        apply(q, q_opt, &q_grad)?;
    }
    head.step(&head_grad)?;
    Ok(stats)
}

/// One step of the importance-sampled variant with the current `q` as the
/// proposal (`m` draws per element). Falls back to plain Monte Carlo when
/// every importance weight vanishes.
#[allow(clippy::too_many_arguments)]
pub fn ddpp_is_train_step<R: Rng + ?Sized>(
    q: &mut DenoiserModel,
    q_opt: &mut Adam,
    pre: &DenoiserModel,
    reward: &RewardModel,
    batch: &[(Sequence, MaskedSample)],
    m: usize,
    rng: &mut R,
    counter: &mut CallCounter,
) -> Result<PpStepStats> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    let xts: Vec<MaskedSample> = batch.iter().map(|(_, xt)| xt.clone()).collect();
    let fwd = q.forward(&xts)?;
    counter.add_finetuned(xts.len());
    let mut stats = PpStepStats::default();
    let mut log_z = Vec::with_capacity(batch.len());
    let mut p_mus = Vec::with_capacity(batch.len());
    for (xt, q_mu) in xts.iter().zip(&fwd.outputs) {
        match logz_is_with(q_mu, pre, xt, m, reward, rng, counter) {
            Ok((lz, p_mu)) => {
                log_z.push(lz);
                p_mus.push(p_mu);
            }
            Err(Error::Degenerate(_)) => {
                stats.fallbacks += 1;
                log_z.push(logz_mc(pre, xt, m, reward, rng, counter)?);
                p_mus.push(pre.predict_mean(xt)?);
            }
            Err(e) => return Err(e),
        }
    }
    counter.add_reward(xts.len());
    let rs = residuals(&fwd.outputs, &p_mus, reward, batch, &log_z)?;
    let used = rs.iter().filter(|r| r.is_some()).count();
    stats.skipped = batch.len() - used;
    if used == 0 {
        return Ok(stats);
    }
    let scale = 1.0 / used as f64;
    let mut grads = Vec::with_capacity(batch.len());
    for (i, ((x0, xt), r)) in batch.iter().zip(&rs).enumerate() {
        let mut g = LogitGrad::for_output(&fwd.outputs[i]);
        if let Some(r) = *r {
            stats.loss += scale * r * r;
            stats.mean_log_z += scale * log_z[i];
            endpoint_logprob_grad(&fwd.outputs[i], xt, x0, 2.0 * r * scale, &mut g);
        }
        grads.push(g);
    }
    let q_grad = q.backward(&fwd, &grads);
    apply(q, q_opt, &q_grad)?;
    Ok(stats)
}
