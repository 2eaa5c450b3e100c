//! Estimators of `log Z_{π_t}(x_t) = log Σ_{x_0} p^pre_t(x_0|x_t) R(x_0)`.

use rand::Rng;

use super::{CallCounter, RewardModel};
use crate::denoiser::{endpoint_logprob, sample_endpoint, DenoiserModel, DenoiserOutput};
use crate::error::{Error, Result};
use crate::math::log_mean_exp;
use crate::sequence::{is_neg_inf, MaskedSample, Sequence};

/// Plain Monte-Carlo estimate from `m` single-step endpoint draws of the
/// pretrained model. One pretrained evaluation serves the whole draw batch.
pub fn logz_mc<R: Rng + ?Sized>(
    pre: &DenoiserModel,
    xt: &MaskedSample,
    m: usize,
    reward: &RewardModel,
    rng: &mut R,
    counter: &mut CallCounter,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidInput("Monte-Carlo estimate needs M >= 1".into()));
    }
    let mu = pre.predict_mean(xt)?;
    counter.add_pretrained(1);
    let log_r = (0..m)
        .map(|_| reward.log_reward(&sample_endpoint(&mu, xt, rng)))
        .collect::<Result<Vec<_>>>()?;
    counter.add_reward(m);
    Ok(log_mean_exp(&log_r))
}

/// Importance-sampled estimate with the endpoint posterior of `proposal`.
pub fn logz_is<R: Rng + ?Sized>(
    pre: &DenoiserModel,
    proposal: &DenoiserModel,
    xt: &MaskedSample,
    m: usize,
    reward: &RewardModel,
    rng: &mut R,
    counter: &mut CallCounter,
) -> Result<f64> {
    let q_mu = proposal.predict_mean(xt)?;
    counter.add_finetuned(1);
    Ok(logz_is_with(&q_mu, pre, xt, m, reward, rng, counter)?.0)
}

/// IS estimate given the proposal's posterior at `xt`. Every draw is scored
/// under its own pretrained evaluation (`m` pretrained calls); the first of
/// those outputs is returned for reuse.
pub(crate) fn logz_is_with<R: Rng + ?Sized>(
    q_mu: &DenoiserOutput,
    pre: &DenoiserModel,
    xt: &MaskedSample,
    m: usize,
    reward: &RewardModel,
    rng: &mut R,
    counter: &mut CallCounter,
) -> Result<(f64, DenoiserOutput)> {
    if m == 0 {
        return Err(Error::InvalidInput("importance sampling needs M >= 1".into()));
    }
    let draws: Vec<Sequence> = (0..m).map(|_| sample_endpoint(q_mu, xt, rng)).collect();
    let mut pre_mus = pre.predict_batch(&vec![xt.clone(); m])?;
    counter.add_pretrained(m);
    counter.add_reward(m);
    let mut log_w = Vec::with_capacity(m);
    for (x0, pmu) in draws.iter().zip(&pre_mus) {
        let lp = endpoint_logprob(pmu, xt, x0)?;
        let lq = endpoint_logprob(q_mu, xt, x0)?;
        log_w.push(if is_neg_inf(lp) || is_neg_inf(lq) {
            crate::sequence::NEG_INF
        } else {
            lp + reward.log_reward(x0)? - lq
        });
    }
    if log_w.iter().all(|&w| is_neg_inf(w)) {
        return Err(Error::Degenerate(format!("all {m} importance weights vanish at x_t = {}", xt.seq)));
    }
    pre_mus.truncate(1);
    Ok((log_mean_exp(&log_w), pre_mus.pop().expect("m >= 1")))
}

/// `C* = mean(log p^pre + log R − log q)`, the minimizer over `C` of
/// [`pp_batch_loss`].
pub fn lemma1_constant(log_ratios: &[f64]) -> Result<f64> {
    if log_ratios.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if let Some(bad) = log_ratios.iter().find(|r| is_neg_inf(**r) || !r.is_finite()) {
        return Err(Error::InvalidSample(format!("log ratio {bad} is not finite")));
    }
    Ok(log_ratios.iter().sum::<f64>() / log_ratios.len() as f64)
}

/// Batch posterior-predictive loss as a function of the constant `c`:
/// `(1/N) Σ (c − a_j)²` where `a_j` are the log ratios.
pub fn pp_batch_loss(log_ratios: &[f64], c: f64) -> f64 {
    log_ratios.iter().map(|a| (c - a).powi(2)).sum::<f64>() / log_ratios.len() as f64
}

/// Optimal closed-form constant for a batch of endpoints drawn from `q`.
pub fn lemma1_optimal_logz(
    q: &DenoiserModel,
    pre: &DenoiserModel,
    reward: &RewardModel,
    xt: &MaskedSample,
    endpoints: &[Sequence],
) -> Result<f64> {
    if endpoints.is_empty() {
        return Err(Error::InvalidInput("closed-form estimate needs at least one endpoint".into()));
    }
    let q_mu = q.predict_mean(xt)?;
    let p_mu = pre.predict_mean(xt)?;
    let ratios = endpoints
        .iter()
        .map(|x0| {
            let lq = endpoint_logprob(&q_mu, xt, x0)?;
            let lp = endpoint_logprob(&p_mu, xt, x0)?;
            if is_neg_inf(lq) || is_neg_inf(lp) {
                return Err(Error::InvalidSample(format!("endpoint {x0} has zero probability")));
            }
            Ok(lp + reward.log_reward(x0)? - lq)
        })
        .collect::<Result<Vec<_>>>()?;
    lemma1_constant(&ratios)
}
