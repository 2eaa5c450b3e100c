//! Reverse-KL objective with discrete gradient estimators.
//!
//! For a corruption `x_t` of an on-policy sample, `K` endpoints `D` are drawn
//! from `q(·|x_t)` as one-hot rows and scored by
//!
//! ```text
//! f(D) = ⟨D, log q − log p^pre⟩ − R̃(D)
//! ```
//!
//! where `R̃` is the relaxed log reward. `log Z` is a constant and is
//! dropped. The gradient has two parts: the explicit dependence of `log q`
//! at fixed `D`, and `∂f/∂D` carried back through the sampling step by the
//! estimator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CallCounter, LossGrad, RewardModel};
use crate::denoiser::{DenoiserModel, DenoiserOutput, LogitGrad};
use crate::error::{Error, Result};
use crate::forward::mask_forward;
use crate::rng::categorical;
use crate::schedule::NoiseSchedule;
use crate::sequence::{MaskedSample, Sequence};

pub const DEFAULT_KL_DRAWS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradEstimator {
    /// Backward pass through `softmax` at the model's probabilities.
    #[default]
    StraightThrough,
    /// Second-order correction (temperature 1): `2 J(π₁) − ½ J(π₀)` with
    /// `π₁ = (D + π₀) / 2`.
    Reinmax,
}

impl GradEstimator {
    /// The smooth point `π(θ)` whose Jacobian the estimator uses, evaluated
    /// at logits with probabilities `p` and anchored at the sample `d` with
    /// anchor probabilities `p0`.
    fn relaxed_point(&self, p: &[f64], p0: &[f64], d: &[f64]) -> Vec<f64> {
        match self {
            GradEstimator::StraightThrough => p.to_vec(),
            GradEstimator::Reinmax => {
                // π₁' = softmax(log π₁(θ₀) − θ₀ + θ) ∝ π₁(θ₀) · p / p0
                let mut pi1: Vec<f64> = p
                    .iter()
                    .zip(p0)
                    .zip(d)
                    .map(|((&pv, &p0v), &dv)| 0.5 * (dv + p0v) * pv / p0v)
                    .collect();
                let s: f64 = pi1.iter().sum();
                pi1.iter_mut().for_each(|x| *x /= s);
                pi1.iter().zip(p).map(|(a, b)| 2.0 * a - 0.5 * b).collect()
            }
        }
    }

    fn pullback(&self, g: &mut LogitGrad, p: &[f64], d: &[f64], i: usize, upstream: &[f64], scale: f64) {
        match self {
            GradEstimator::StraightThrough => g.add_softmax_pullback(p, i, upstream, scale),
            GradEstimator::Reinmax => {
                let pi1: Vec<f64> = d.iter().zip(p).map(|(a, b)| 0.5 * (a + b)).collect();
                g.add_softmax_pullback(&pi1, i, upstream, 2.0 * scale);
                g.add_softmax_pullback(p, i, upstream, -0.5 * scale);
            }
        }
    }
}

/// One discrete endpoint draw: the sampled clean token of every position.
#[derive(Debug, Clone, PartialEq)]
pub struct KlDraw {
    pub tokens: Vec<u32>,
}

fn one_hot(k: usize, v: u32) -> Vec<f64> {
    let mut r = vec![0.0; k];
    r[v as usize] = 1.0;
    r
}

/// Surrogate value and logit gradient for fixed draws.
///
/// With `anchor = None` the value is `mean f(D)` and the gradient is the
/// estimator's. With `anchor = Some(μ₀)` the relaxed rows are
/// `D + π(θ) − π(θ₀)`; this smooth function has the value `mean f(D)` and,
/// at `θ = θ₀`, exactly the estimator's gradient, which makes the gradient
/// checkable by finite differences.
#[allow(clippy::too_many_arguments)]
fn surrogate_rows(
    q_mu: &DenoiserOutput,
    p_mu: &DenoiserOutput,
    reward: &RewardModel,
    xt: &MaskedSample,
    draws: &[KlDraw],
    estimator: GradEstimator,
    anchor: Option<&DenoiserOutput>,
    scale: f64,
    g: &mut LogitGrad,
) -> Result<f64> {
    let k = q_mu.num_clean();
    let n = xt.len();
    let masked: Vec<usize> = (0..n).filter(|&i| xt.tokens()[i] as usize == k).collect();
    let mut value = 0.0;
    for draw in draws {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let d = one_hot(k, draw.tokens[i]);
                match anchor {
                    Some(a) if masked.contains(&i) => {
                        let pt = estimator.relaxed_point(q_mu.row(i), a.row(i), &d);
                        let p0 = estimator.relaxed_point(a.row(i), a.row(i), &d);
                        d.iter().zip(pt.iter().zip(&p0)).map(|(dv, (x, y))| dv + x - y).collect()
                    }
                    _ => d,
                }
            })
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let (r_val, r_grad) = reward.relaxed_log_reward(&refs)?;
        let mut f = -r_val;
        for &i in &masked {
            let lq = q_mu.log_row(i);
            let lp = p_mu.log_row(i);
            f += rows[i].iter().zip(lq.iter().zip(lp)).map(|(d, (a, b))| d * (a - b)).sum::<f64>();
            // explicit log q dependence at fixed rows
            let direct: Vec<f64> = rows[i].clone();
            g.add_log_row(q_mu, i, &direct.iter().map(|x| x * scale).collect::<Vec<_>>());
            // ∂f/∂D_i through the estimator
            let upstream: Vec<f64> = (0..k).map(|u| (lq[u] - lp[u]) - r_grad[i][u]).collect();
            let d = one_hot(k, draw.tokens[i]);
            let base = anchor.map_or(q_mu.row(i), |a| a.row(i));
            estimator.pullback(g, base, &d, i, &upstream, scale);
        }
        value += scale * f;
    }
    Ok(value)
}

/// Value and estimator gradient of the surrogate for given draws, anchored
/// at `anchor` (see the module docs). Used for gradient verification.
#[allow(clippy::too_many_arguments)]
pub fn kl_surrogate(
    q: &DenoiserModel,
    pre: &DenoiserModel,
    reward: &RewardModel,
    xt: &MaskedSample,
    draws: &[KlDraw],
    estimator: GradEstimator,
    anchor: Option<&DenoiserOutput>,
) -> Result<LossGrad> {
    let fwd = q.forward(std::slice::from_ref(xt))?;
    let p_mu = pre.predict_mean(xt)?;
    let mut g = LogitGrad::for_output(&fwd.outputs[0]);
    let value = surrogate_rows(
        &fwd.outputs[0],
        &p_mu,
        reward,
        xt,
        draws,
        estimator,
        anchor,
        1.0 / draws.len().max(1) as f64,
        &mut g,
    )?;
    Ok(LossGrad {
        value,
        grad: q.backward(&fwd, &[g]),
    })
}

fn draw_endpoints<R: Rng + ?Sized>(mu: &DenoiserOutput, xt: &MaskedSample, k: usize, rng: &mut R) -> Vec<KlDraw> {
    let kk = mu.num_clean() as u32;
    (0..k)
        .map(|_| KlDraw {
            tokens: xt
                .tokens()
                .iter()
                .enumerate()
                .map(|(i, &a)| if a == kk { categorical(mu.row(i), rng) as u32 } else { a })
                .collect(),
        })
        .collect()
}

/// Reverse-KL loss over a batch of on-policy clean samples `x0s` (treated as
/// fixed), with `k` estimator-differentiated endpoint draws per sample.
#[allow(clippy::too_many_arguments)]
pub fn ddpp_kl_loss<R: Rng + ?Sized>(
    q: &DenoiserModel,
    pre: &DenoiserModel,
    reward: &RewardModel,
    x0s: &[Sequence],
    k: usize,
    estimator: GradEstimator,
    schedule: &NoiseSchedule,
    rng: &mut R,
    counter: &mut CallCounter,
) -> Result<LossGrad> {
    if !reward.has_relaxed() {
        return Err(Error::Config(format!("reward '{}' is not differentiable", reward.name())));
    }
    if x0s.is_empty() || k == 0 {
        return Err(Error::InvalidInput("KL loss needs samples and K >= 1".into()));
    }
    let vocab = q.vocab();
    let xts = x0s
        .iter()
        .map(|x0| {
            let t: f64 = rng.gen();
            mask_forward(x0, t, schedule, vocab, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let fwd = q.forward(&xts)?;
    counter.add_finetuned(xts.len());
    let p_mus = pre.predict_batch(&xts)?;
    counter.add_pretrained(xts.len());
    let scale = 1.0 / (x0s.len() * k) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(xts.len());
    for ((xt, q_mu), p_mu) in xts.iter().zip(&fwd.outputs).zip(&p_mus) {
        let draws = draw_endpoints(q_mu, xt, k, rng);
        counter.add_reward(k);
        let mut g = LogitGrad::for_output(q_mu);
        value += surrogate_rows(q_mu, p_mu, reward, xt, &draws, estimator, None, scale, &mut g)?;
        if !g.is_finite() {
            return Err(Error::Training(format!(
                "estimator {estimator:?} produced a non-finite gradient at x_t = {}",
                xt.seq
            )));
        }
        grads.push(g);
    }
    Ok(LossGrad {
        value,
        grad: q.backward(&fwd, &grads),
    })
}
