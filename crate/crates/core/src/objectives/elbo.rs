//! Masked-diffusion ELBO: `w(t) · Σ_{i masked} −log μ[i][x_0^i]` with
//! `w(t) = −α'_t / (1 − α_t)`.

use rand::Rng;

use super::LossGrad;
use crate::denoiser::{DenoiserModel, LogitGrad};
use crate::error::{Error, Result};
use crate::forward::mask_forward;
use crate::math::mean_se;
use crate::schedule::NoiseSchedule;
use crate::sequence::{MaskedSample, Sequence};

const MAX_TIME_RETRIES: usize = 64;

/// Draws `t ~ U[0, 1]` together with its ELBO weight, rejecting times where
/// `1 − α_t` vanishes numerically.
pub fn draw_elbo_time<R: Rng + ?Sized>(schedule: &NoiseSchedule, rng: &mut R) -> Result<(f64, f64)> {
    for _ in 0..MAX_TIME_RETRIES {
        let t: f64 = rng.gen();
        let one_minus = 1.0 - schedule.alpha(t)?;
        if one_minus > 1e-12 {
            let w = schedule.elbo_weight(t)?;
            if w.is_finite() {
                return Ok((t, w));
            }
        }
    }
    Err(Error::Domain(format!(
        "no usable ELBO time in {MAX_TIME_RETRIES} draws"
    )))
}

/// The ELBO integrand at a fixed corruption `xt` of `x0`.
pub fn elbo_term(
    model: &DenoiserModel,
    x0: &Sequence,
    xt: &MaskedSample,
    schedule: &NoiseSchedule,
) -> Result<LossGrad> {
    let w = schedule.elbo_weight(xt.t)?;
    let fwd = model.forward(std::slice::from_ref(xt))?;
    let mu = &fwd.outputs[0];
    let mut g = LogitGrad::for_output(mu);
    let value = accumulate(mu, xt, x0, w, 1.0, &mut g)?;
    let grad = model.backward(&fwd, &[g]);
    Ok(LossGrad { value, grad })
}

fn accumulate(
    mu: &crate::denoiser::DenoiserOutput,
    xt: &MaskedSample,
    x0: &Sequence,
    w: f64,
    scale: f64,
    g: &mut LogitGrad,
) -> Result<f64> {
    let k = mu.num_clean() as u32;
    let mut value = 0.0;
    for (i, (&a, &b)) in xt.tokens().iter().zip(x0.tokens()).enumerate() {
        if a == k {
            value -= mu.log_prob(i, b);
            g.add_log_prob(mu, i, b, -w * scale);
        } else if a != b {
            return Err(Error::InvalidInput(format!("x_t = {} is not a corruption of {x0}", xt.seq)));
        }
    }
    Ok(w * value)
}

/// Single-sample negative-ELBO estimate for one clean sequence.
pub fn elbo_loss<R: Rng + ?Sized>(
    model: &DenoiserModel,
    x0: &Sequence,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossGrad> {
    elbo_loss_batch(model, std::slice::from_ref(x0), schedule, rng)
}

/// Mean single-sample negative-ELBO estimate over a batch, one forward pass.
pub fn elbo_loss_batch<R: Rng + ?Sized>(
    model: &DenoiserModel,
    x0s: &[Sequence],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossGrad> {
    if x0s.is_empty() {
        return Err(Error::InvalidInput("empty ELBO batch".into()));
    }
    let vocab = model.vocab();
    let mut xts = Vec::with_capacity(x0s.len());
    let mut weights = Vec::with_capacity(x0s.len());
    for x0 in x0s {
        let (t, w) = draw_elbo_time(schedule, rng)?;
        xts.push(mask_forward(x0, t, schedule, vocab, rng)?);
        weights.push(w);
    }
    let fwd = model.forward(&xts)?;
    let scale = 1.0 / x0s.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(x0s.len());
    for (((mu, xt), x0), &w) in fwd.outputs.iter().zip(&xts).zip(x0s).zip(&weights) {
        let mut g = LogitGrad::for_output(mu);
        value += scale * accumulate(mu, xt, x0, w, scale, &mut g)?;
        grads.push(g);
    }
    let grad = model.backward(&fwd, &grads);
    Ok(LossGrad { value, grad })
}

/// Monte-Carlo negative ELBO of a dataset, `draws` corruptions in total
/// cycling through `data`. Returns (mean, standard error) in nats per
/// sequence.
pub fn elbo_nll_estimate<R: Rng + ?Sized>(
    model: &DenoiserModel,
    data: &[Sequence],
    schedule: &NoiseSchedule,
    draws: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if data.is_empty() || draws == 0 {
        return Err(Error::InvalidInput("ELBO estimate needs data and draws".into()));
    }
    let vocab = model.vocab();
    const CHUNK: usize = 1024;
    let mut values = Vec::with_capacity(draws);
    let mut idx = 0usize;
    while values.len() < draws {
        let m = CHUNK.min(draws - values.len());
        let mut xts = Vec::with_capacity(m);
        let mut ws = Vec::with_capacity(m);
        let mut x0s = Vec::with_capacity(m);
        for _ in 0..m {
            let x0 = &data[idx % data.len()];
            idx += 1;
            let (t, w) = draw_elbo_time(schedule, rng)?;
            xts.push(mask_forward(x0, t, schedule, vocab, rng)?);
            ws.push(w);
            x0s.push(x0);
        }
        let mus = model.predict_batch(&xts)?;
        for (((mu, xt), x0), w) in mus.iter().zip(&xts).zip(x0s).zip(ws) {
            let k = mu.num_clean() as u32;
            let nll: f64 = xt
                .tokens()
                .iter()
                .zip(x0.tokens())
                .enumerate()
                .filter(|(_, (&a, _))| a == k)
                .map(|(i, (_, &b))| -mu.log_prob(i, b))
                .sum();
            values.push(w * nll);
        }
    }
    Ok(mean_se(&values))
}
