//! Sub-trajectory loss over bridge-sampled reverse transitions.
//!
//! Along a path `x_t → … → x_0` drawn from the forward bridge, the
//! log-ratio `Σ [log q(x_{s−γ}|x_s) − log p^pre(x_{s−γ}|x_s)]` of the two
//! reverse chains must equal `log R(x_0) − log Z(x_t)` at the optimum.
//! `SinglePair` estimates the path sum from one uniformly placed step scaled
//! by the number of steps `t/γ`; `FullPath` sums every step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CallCounter, RewardModel};
use crate::denoiser::{transition_logprob, DenoiserModel, LogitGrad};
use crate::error::{Error, Result};
use crate::forward::bridge_sample;
use crate::schedule::NoiseSchedule;
use crate::sequence::{is_neg_inf, MaskedSample, Sequence};

/// Squared residual, its `q` gradient and the signed residual (whose double
/// is the gradient with respect to `log Z`).
#[derive(Debug, Clone, PartialEq)]
pub struct SubTrajectoryLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubTrajectoryMode {
    #[default]
    SinglePair,
    FullPath,
}

/// `(factor · Σ_path [log q − log p^pre] + log Z − log R(x_0))²` along a
/// fixed path of states with strictly decreasing times.
#[allow(clippy::too_many_arguments)]
pub fn subtrajectory_path_loss(
    q: &DenoiserModel,
    pre: &DenoiserModel,
    reward: &RewardModel,
    x0: &Sequence,
    path: &[MaskedSample],
    factor: f64,
    log_z: f64,
    schedule: &NoiseSchedule,
    counter: &mut CallCounter,
) -> Result<SubTrajectoryLoss> {
    if path.len() < 2 {
        return Err(Error::InvalidInput("a path needs at least two states".into()));
    }
    let from = &path[..path.len() - 1];
    let fwd = q.forward(from)?;
    counter.add_finetuned(from.len());
    let p_mus = pre.predict_batch(from)?;
    counter.add_pretrained(from.len());
    let mut ratio = 0.0;
    for (j, pair) in path.windows(2).enumerate() {
        let lq = transition_logprob(&fwd.outputs[j], &pair[0], &pair[1], schedule)?;
        let lp = transition_logprob(&p_mus[j], &pair[0], &pair[1], schedule)?;
        if is_neg_inf(lq) || is_neg_inf(lp) {
            return Err(Error::InvalidSample(format!(
                "transition {} -> {} has zero probability",
                pair[0].seq, pair[1].seq
            )));
        }
        ratio += lq - lp;
    }
    let r = factor * ratio + log_z - reward.log_reward(x0)?;
    let grads: Vec<LogitGrad> = path
        .windows(2)
        .zip(&fwd.outputs)
        .map(|(pair, mu)| {
            let mut g = LogitGrad::for_output(mu);
            crate::denoiser::transition_logprob_grad(mu, &pair[0], &pair[1], 2.0 * r * factor, &mut g);
            g
        })
        .collect();
    Ok(SubTrajectoryLoss {
        value: r * r,
        grad: q.backward(&fwd, &grads),
        residual: r,
    })
}

/// Draws the bridge states the loss is evaluated on.
fn draw_path<R: Rng + ?Sized>(
    x0: &Sequence,
    xt: &MaskedSample,
    gamma: f64,
    mode: SubTrajectoryMode,
    schedule: &NoiseSchedule,
    vocab: crate::sequence::Vocabulary,
    rng: &mut R,
) -> Result<(Vec<MaskedSample>, f64)> {
    let t = xt.t;
    match mode {
        SubTrajectoryMode::SinglePair => {
            let s = if t - gamma <= 1e-12 { t } else { rng.gen_range(gamma..=t) };
            let xs = bridge_sample(x0, xt, s, schedule, vocab, rng)?;
            let lo = (s - gamma).max(0.0);
            let xl = bridge_sample(x0, &xs, lo, schedule, vocab, rng)?;
            Ok((vec![xs, xl], t / gamma))
        }
        SubTrajectoryMode::FullPath => {
            let mut path = vec![xt.clone()];
            let mut cur = t;
            while cur > 0.0 {
                let next = if cur - gamma <= 1e-12 { 0.0 } else { cur - gamma };
                let last = path.last().expect("nonempty");
                path.push(bridge_sample(x0, last, next, schedule, vocab, rng)?);
                cur = next;
            }
            Ok((path, 1.0))
        }
    }
}

/// Sub-trajectory loss for one `(x_0, x_t)` pair with step width `gamma`.
#[allow(clippy::too_many_arguments)]
pub fn ddpp_subtrajectory_loss<R: Rng + ?Sized>(
    q: &DenoiserModel,
    pre: &DenoiserModel,
    reward: &RewardModel,
    x0: &Sequence,
    xt: &MaskedSample,
    gamma: f64,
    log_z: f64,
    mode: SubTrajectoryMode,
    schedule: &NoiseSchedule,
    rng: &mut R,
    counter: &mut CallCounter,
) -> Result<SubTrajectoryLoss> {
    if !(gamma > 0.0) || gamma > xt.t + 1e-12 {
        return Err(Error::Domain(format!("need 0 < gamma <= t, got gamma = {gamma}, t = {}", xt.t)));
    }
    let (path, factor) = draw_path(x0, xt, gamma, mode, schedule, q.vocab(), rng)?;
    subtrajectory_path_loss(q, pre, reward, x0, &path, factor, log_z, schedule, counter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{grad_check_model, Architecture, MlpConfig, TabularConfig};
    use crate::forward::mask_forward;
    use crate::objectives::{ConstantReward, TableReward};
    use crate::rng::seeded;
    use crate::sequence::Vocabulary;

    fn model_with(probs: &[f64]) -> DenoiserModel {
        let v = Vocabulary::new(probs.len() + 1).unwrap();
        let mut m = DenoiserModel::new(&Architecture::Tabular(TabularConfig::default()), v, 1, &mut seeded(0)).unwrap();
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        m.as_tabular_mut().unwrap().set_masked_logits(0, &logits);
        m
    }

    /// Binary tiny instance: p^pre = [0.7, 0.3], R = [1, 3].
    fn binary() -> (DenoiserModel, DenoiserModel, RewardModel, f64) {
        let pre = model_with(&[0.7, 0.3]);
        let z = 0.7 + 0.9;
        let exact = model_with(&[0.7 / z, 0.9 / z]);
        let r = RewardModel::new(TableReward::from_rewards(1, 2, &[1.0, 3.0]).unwrap());
        (pre, exact, r, f64::ln(z))
    }

    #[test]
    fn identical_processes_have_zero_residual() {
        let pre = model_with(&[0.5, 0.3, 0.2]);
        let r = RewardModel::new(ConstantReward(0.0));
        let v = Vocabulary::new(4).unwrap();
        let mut rng = seeded(0);
        for mode in [SubTrajectoryMode::SinglePair, SubTrajectoryMode::FullPath] {
            for _ in 0..50 {
                let x0 = Sequence::from_raw(vec![rng.gen_range(0..3)]);
                let xt = mask_forward(&x0, 1.0, &NoiseSchedule::Linear, v, &mut rng).unwrap();
                let l = ddpp_subtrajectory_loss(&pre, &pre, &r, &x0, &xt, 0.25, 0.0, mode, &NoiseSchedule::Linear, &mut rng, &mut CallCounter::new()).unwrap();
                assert!(l.value < 1e-24);
            }
        }
    }

    #[test]
    fn single_step_matched_case() {
        let (pre, exact, r, log_z) = binary();
        let v = Vocabulary::new(3).unwrap();
        let xt = MaskedSample::new(Sequence::new(vec![2], v).unwrap(), 0.25).unwrap();
        let mut rng = seeded(1);
        for x in 0..2u32 {
            let x0 = Sequence::from_raw(vec![x]);
            let l = ddpp_subtrajectory_loss(&exact, &pre, &r, &x0, &xt, 0.25, log_z, SubTrajectoryMode::SinglePair, &NoiseSchedule::Linear, &mut rng, &mut CallCounter::new()).unwrap();
            assert!(l.value < 1e-20, "{}", l.value);
        }
    }

    /// E[loss] over forward pairs `x_0 ~ π_0`, `t` on the T = 4 grid.
    fn expected_loss(q: &DenoiserModel, pre: &DenoiserModel, r: &RewardModel, log_z: f64, mode: SubTrajectoryMode, draws: usize) -> f64 {
        let v = Vocabulary::new(3).unwrap();
        let mut rng = seeded(11);
        let z = 1.6;
        let pi = [0.7 / z, 0.9 / z];
        let mut total = 0.0;
        for _ in 0..draws {
            let x0 = Sequence::from_raw(vec![crate::rng::categorical(&pi, &mut rng) as u32]);
            let t = rng.gen_range(1..=4) as f64 / 4.0;
            let xt = mask_forward(&x0, t, &NoiseSchedule::Linear, v, &mut rng).unwrap();
            // the constant is log Z(x_t): log Z for masked, log R(x) when visible
            let lz = if xt.seq.mask_count(v) == 1 { log_z } else { r.log_reward(&x0).unwrap() };
            let l = ddpp_subtrajectory_loss(q, pre, r, &x0, &xt, 0.25, lz, mode, &NoiseSchedule::Linear, &mut rng, &mut CallCounter::new()).unwrap();
            total += l.value;
        }
        total / draws as f64
    }

    #[test]
    fn full_path_optimum_and_perturbation() {
        let (pre, exact, r, log_z) = binary();
        let at_opt = expected_loss(&exact, &pre, &r, log_z, SubTrajectoryMode::FullPath, 100_000);
        assert!(at_opt <= 1e-3, "{at_opt}");
        let perturbed = model_with(&[0.5, 0.5]);
        let off = expected_loss(&perturbed, &pre, &r, log_z, SubTrajectoryMode::FullPath, 100_000);
        assert!(off > at_opt && off > 1e-3, "{off}");
    }

    #[test]
    fn single_pair_is_unbiased_for_the_path_sum() {
        // With factor t/γ, the single-pair log ratio averages to the full-path one.
        let (pre, _, _, _) = binary();
        let q = model_with(&[0.2, 0.8]);
        let flat = RewardModel::new(ConstantReward(0.0));
        let v = Vocabulary::new(3).unwrap();
        let x0 = Sequence::from_raw(vec![1]);
        let xt = MaskedSample::all_masked(1, v);
        let mut rng = seeded(3);
        let n = 40_000;
        let mut single = Vec::with_capacity(n);
        for _ in 0..n {
            // log Z = log R = 0, so the residual is the scaled log ratio
            let a = ddpp_subtrajectory_loss(&q, &pre, &flat, &x0, &xt, 0.25, 0.0, SubTrajectoryMode::SinglePair, &NoiseSchedule::Linear, &mut rng, &mut CallCounter::new()).unwrap();
            single.push(a.residual);
        }
        let full = ddpp_subtrajectory_loss(&q, &pre, &flat, &x0, &xt, 0.25, 0.0, SubTrajectoryMode::FullPath, &NoiseSchedule::Linear, &mut rng, &mut CallCounter::new()).unwrap();
        let (m, se) = crate::math::mean_se(&single);
        let target = full.residual;
        assert!((target - (0.8f64 / 0.3).ln()).abs() < 1e-12);
        assert!((m - target).abs() < 4.0 * se, "{m} vs {target} (se {se})");
    }

    #[test]
    fn path_gradient_matches_differences() {
        let v = Vocabulary::new(4).unwrap();
        let cfg = MlpConfig { embed_dim: 3, time_dim: 4, hidden: 6 };
        let q = DenoiserModel::new(&Architecture::Mlp(cfg), v, 2, &mut seeded(8)).unwrap();
        let pre = DenoiserModel::new(&Architecture::Mlp(cfg), v, 2, &mut seeded(9)).unwrap();
        let r = RewardModel::new(TableReward::new(2, 3, (0..9).map(|i| 0.1 * i as f64).collect()).unwrap());
        let x0 = Sequence::clean(vec![1, 2], v).unwrap();
        let path = vec![
            MaskedSample::new(Sequence::new(vec![3, 3], v).unwrap(), 0.75).unwrap(),
            MaskedSample::new(Sequence::new(vec![1, 3], v).unwrap(), 0.5).unwrap(),
            MaskedSample::new(Sequence::new(vec![1, 2], v).unwrap(), 0.0).unwrap(),
        ];
        let err = grad_check_model(
            &q,
            |m| subtrajectory_path_loss(m, &pre, &r, &x0, &path, 1.5, 0.2, &NoiseSchedule::Linear, &mut CallCounter::new()).map(|l| (l.value, l.grad)),
            1e-4,
            10_000,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
