//! The parametrized reverse process: transition laws, endpoint likelihoods and
//! ancestral sampling.

use rand::Rng;

use super::{DenoiserModel, DenoiserOutput, LogitGrad};
use crate::error::{Error, Result};
use crate::rng::categorical;
use crate::schedule::NoiseSchedule;
use crate::sequence::{MaskedSample, Sequence, TimeGrid, NEG_INF};

/// Probability that a masked token is revealed between `t_from` and the
/// earlier time `t_to`: `(α_to - α_from) / (1 - α_from)`.
pub fn unmask_probability(schedule: &NoiseSchedule, t_from: f64, t_to: f64) -> Result<f64> {
    let a_from = schedule.alpha(t_from)?;
    let a_to = schedule.alpha(t_to)?;
    if a_from >= 1.0 {
        return Ok(1.0);
    }
    Ok(((a_to - a_from) / (1.0 - a_from)).clamp(0.0, 1.0))
}

/// Per-position law of `x_{t_to}` given `x_t` and `μ`, as rows over all `d`
/// categories (the mask category last).
pub fn reverse_transition_dist(
    mu: &DenoiserOutput,
    xt: &MaskedSample,
    t_to: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<Vec<f64>>> {
    if !(t_to < xt.t) || t_to < 0.0 {
        return Err(Error::Domain(format!(
            "reverse transition needs 0 <= t_to < t, got t_to = {t_to}, t = {}",
            xt.t
        )));
    }
    check_shape(mu, xt.len())?;
    let k = mu.num_clean();
    let reveal = unmask_probability(schedule, xt.t, t_to)?;
    Ok(xt
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            let mut row = vec![0.0; k + 1];
            if tok as usize == k {
                for (r, &m) in row.iter_mut().zip(mu.row(i)) {
                    *r = reveal * m;
                }
                row[k] = 1.0 - reveal;
            } else {
                row[tok as usize] = 1.0;
            }
            row
        })
        .collect())
}

fn check_shape(mu: &DenoiserOutput, n: usize) -> Result<()> {
    if mu.seq_len() != n {
        return Err(Error::InvalidInput(format!(
            "denoiser output has {} rows, sequence has {n} positions",
            mu.seq_len()
        )));
    }
    Ok(())
}

/// Draws `x_{t_to}` from the reverse transition.
///
/// Consumes one uniform per masked position, in position order.
pub fn reverse_step<R: Rng + ?Sized>(
    mu: &DenoiserOutput,
    xt: &MaskedSample,
    t_to: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<MaskedSample> {
    let rows = reverse_transition_dist(mu, xt, t_to, schedule)?;
    let k = mu.num_clean() as u32;
    let tokens = xt
        .tokens()
        .iter()
        .zip(&rows)
        .map(|(&tok, row)| if tok == k { categorical(row, rng) as u32 } else { tok })
        .collect();
    Ok(MaskedSample {
        seq: Sequence::from_raw(tokens),
        t: t_to,
    })
}

/// `log q(x_to | x_from)` under the transition parametrized by `mu`
/// (evaluated at `x_from`). Returns [`NEG_INF`] for impossible moves.
pub fn transition_logprob(
    mu: &DenoiserOutput,
    x_from: &MaskedSample,
    x_to: &MaskedSample,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    check_shape(mu, x_from.len())?;
    if x_to.len() != x_from.len() {
        return Err(Error::InvalidInput("transition endpoints differ in length".into()));
    }
    let k = mu.num_clean() as u32;
    let reveal = unmask_probability(schedule, x_from.t, x_to.t)?;
    let mut total = 0.0;
    for (i, (&a, &b)) in x_from.tokens().iter().zip(x_to.tokens()).enumerate() {
        let lp = if a != k {
            if a == b {
                0.0
            } else {
                return Ok(NEG_INF);
            }
        } else if b == k {
            safe_ln(1.0 - reveal)
        } else {
            let m = mu.log_prob(i, b);
            if reveal <= 0.0 || crate::sequence::is_neg_inf(m) {
                return Ok(NEG_INF);
            }
            reveal.ln() + m
        };
        if crate::sequence::is_neg_inf(lp) {
            return Ok(NEG_INF);
        }
        total += lp;
    }
    Ok(total)
}

fn safe_ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        NEG_INF
    }
}

/// Adds `w * ∂ transition_logprob / ∂ logits` for the model that produced `mu`.
/// Only reveal events depend on `μ`.
pub(crate) fn transition_logprob_grad(
    mu: &DenoiserOutput,
    x_from: &MaskedSample,
    x_to: &MaskedSample,
    w: f64,
    grad: &mut LogitGrad,
) {
    let k = mu.num_clean() as u32;
    for (i, (&a, &b)) in x_from.tokens().iter().zip(x_to.tokens()).enumerate() {
        if a == k && b != k {
            grad.add_log_prob(mu, i, b, w);
        }
    }
}

/// `Σ_{i masked in x_t} log μ[i][x_0^i]`; [`NEG_INF`] if `x_0` contradicts a
/// visible token of `x_t`.
pub fn endpoint_logprob(mu: &DenoiserOutput, xt: &MaskedSample, x0: &Sequence) -> Result<f64> {
    check_shape(mu, xt.len())?;
    if x0.len() != xt.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: x_t has {}, x_0 has {}",
            xt.len(),
            x0.len()
        )));
    }
    let k = mu.num_clean() as u32;
    if let Some(&bad) = x0.tokens().iter().find(|&&v| v >= k) {
        return Err(Error::InvalidInput(format!("x_0 must be clean, found token {bad}")));
    }
    let mut total = 0.0;
    for (i, (&a, &b)) in xt.tokens().iter().zip(x0.tokens()).enumerate() {
        if a == k {
            let m = mu.log_prob(i, b);
            if crate::sequence::is_neg_inf(m) {
                return Ok(NEG_INF);
            }
            total += m;
        } else if a != b {
            return Ok(NEG_INF);
        }
    }
    Ok(total)
}

/// Adds `w * ∂ endpoint_logprob / ∂ logits`.
pub fn endpoint_logprob_grad(
    mu: &DenoiserOutput,
    xt: &MaskedSample,
    x0: &Sequence,
    w: f64,
    grad: &mut LogitGrad,
) {
    let k = mu.num_clean() as u32;
    for (i, (&a, &b)) in xt.tokens().iter().zip(x0.tokens()).enumerate() {
        if a == k {
            grad.add_log_prob(mu, i, b, w);
        }
    }
}

/// Draws a clean endpoint from the factorized posterior `Cat(x_0; μ)`.
pub fn sample_endpoint<R: Rng + ?Sized>(mu: &DenoiserOutput, xt: &MaskedSample, rng: &mut R) -> Sequence {
    let k = mu.num_clean() as u32;
    let tokens = xt
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, &a)| if a == k { categorical(mu.row(i), rng) as u32 } else { a })
        .collect();
    Sequence::from_raw(tokens)
}

/// Per-run record of an ancestral pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SamplerStats {
    /// Model evaluations in each reverse step, from `t = 1` downwards.
    pub calls_per_step: Vec<u64>,
    /// States `x_1, x_{(T-1)/T}, ..., x_0`.
    pub states: Vec<MaskedSample>,
}

/// Ancestral sampling on `grid` from the all-mask state.
pub fn ancestral_sample<R: Rng + ?Sized>(
    model: &DenoiserModel,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Sequence> {
    ancestral_sample_with(model, grid, schedule, rng, None)
}

pub fn ancestral_sample_with<R: Rng + ?Sized>(
    model: &DenoiserModel,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    rng: &mut R,
    mut stats: Option<&mut SamplerStats>,
) -> Result<Sequence> {
    let vocab = model.vocab();
    let mut x = MaskedSample::all_masked(model.seq_len(), vocab);
    if let Some(s) = stats.as_deref_mut() {
        s.states.push(x.clone());
    }
    for i in (1..=grid.steps()).rev() {
        let mu = model.predict_mean(&x)?;
        let next = reverse_step(&mu, &x, grid.time(i - 1), schedule, rng)?;
        debug_assert!(crate::forward::consistent_masked(&x.seq, &next.seq, vocab));
        x = next;
        if let Some(s) = stats.as_deref_mut() {
            s.calls_per_step.push(1);
            s.states.push(x.clone());
        }
    }
    if x.seq.mask_count(vocab) > 0 {
        // Only reachable when α(t(0)) < 1; the forced draw is part of the
        // last step.
        let forced = MaskedSample {
            seq: x.seq.clone(),
            t: grid.time(1),
        };
        let mu = model.predict_mean(&forced)?;
        x = MaskedSample {
            seq: sample_endpoint(&mu, &forced, rng),
            t: 0.0,
        };
        if let Some(s) = stats.as_deref_mut() {
            *s.calls_per_step.last_mut().expect("at least one step") += 1;
            *s.states.last_mut().expect("at least one state") = x.clone();
        }
    }
    Ok(x.seq)
}

/// Draws `count` independent ancestral samples.
///
/// Same law as [`ancestral_sample`], but a step only evaluates the model for
/// the samples that reveal at least one position in it, and evaluations are
/// batched. The reveal decision does not depend on `μ`, so it is drawn first.
pub fn sample_batch<R: Rng + ?Sized>(
    model: &DenoiserModel,
    count: usize,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<Sequence>> {
    let vocab = model.vocab();
    let n = model.seq_len();
    let mask = vocab.mask_id();
    let mut states: Vec<Vec<u32>> = vec![vec![mask; n]; count];
    let mut pending: Vec<usize> = Vec::new();
    let mut reveal_sets: Vec<Vec<usize>> = Vec::new();
    for i in (1..=grid.steps()).rev() {
        let (t, s) = (grid.time(i), grid.time(i - 1));
        let p = unmask_probability(schedule, t, s)?;
        pending.clear();
        reveal_sets.clear();
        for (idx, st) in states.iter().enumerate() {
            let reveal: Vec<usize> = (0..n)
                .filter(|&j| st[j] == mask && rng.gen::<f64>() < p)
                .collect();
            if !reveal.is_empty() {
                pending.push(idx);
                reveal_sets.push(reveal);
            }
        }
        reveal_into(model, &mut states, &pending, &reveal_sets, t, rng)?;
    }
    // Forced final reveal, as in `ancestral_sample`.
    pending.clear();
    reveal_sets.clear();
    for (idx, st) in states.iter().enumerate() {
        let reveal: Vec<usize> = (0..n).filter(|&j| st[j] == mask).collect();
        if !reveal.is_empty() {
            pending.push(idx);
            reveal_sets.push(reveal);
        }
    }
    reveal_into(model, &mut states, &pending, &reveal_sets, grid.time(1), rng)?;
    Ok(states.into_iter().map(Sequence::from_raw).collect())
}

const EVAL_CHUNK: usize = 512;

fn reveal_into<R: Rng + ?Sized>(
    model: &DenoiserModel,
    states: &mut [Vec<u32>],
    pending: &[usize],
    reveal_sets: &[Vec<usize>],
    t: f64,
    rng: &mut R,
) -> Result<()> {
    for (chunk_idx, chunk) in pending.chunks(EVAL_CHUNK).enumerate() {
        let inputs: Vec<MaskedSample> = chunk
            .iter()
            .map(|&idx| MaskedSample {
                seq: Sequence::from_raw(states[idx].clone()),
                t,
            })
            .collect();
        let outs = model.predict_batch(&inputs)?;
        for (j, (&idx, mu)) in chunk.iter().zip(&outs).enumerate() {
            for &pos in &reveal_sets[chunk_idx * EVAL_CHUNK + j] {
                states[idx][pos] = categorical(mu.row(pos), rng) as u32;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Architecture, TabularConfig};
    use crate::rng::seeded;
    use crate::sequence::{is_neg_inf, Vocabulary};
    use approx::assert_relative_eq;

    fn vocab(d: usize) -> Vocabulary {
        Vocabulary::new(d).unwrap()
    }

    #[test]
    fn transition_dist_example() {
        // α(0.4) = 0.6, α(0.6) = 0.4 under the linear schedule.
        let mu = DenoiserOutput::from_probs(vec![vec![0.5, 0.25, 0.25]]).unwrap();
        let v = vocab(4);
        let xt = MaskedSample::new(Sequence::new(vec![3], v).unwrap(), 0.6).unwrap();
        let rows = reverse_transition_dist(&mu, &xt, 0.4, &NoiseSchedule::Linear).unwrap();
        assert_relative_eq!(rows[0][3], 2.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(rows[0][0], 1.0 / 6.0, max_relative = 1e-12);
        assert_relative_eq!(rows[0][1], 1.0 / 12.0, max_relative = 1e-12);
        assert!((rows[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transition_zero_width_limit_and_visible_rows() {
        let mu = DenoiserOutput::from_probs(vec![vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
        let v = vocab(3);
        let xt = MaskedSample::new(Sequence::new(vec![2, 1], v).unwrap(), 0.6).unwrap();
        let rows = reverse_transition_dist(&mu, &xt, 0.6 - 1e-13, &NoiseSchedule::Linear).unwrap();
        assert!((rows[0][2] - 1.0).abs() < 1e-9);
        assert_eq!(rows[1], vec![0.0, 1.0, 0.0]);
        assert!(reverse_transition_dist(&mu, &xt, 0.6, &NoiseSchedule::Linear).is_err());
        assert!(reverse_transition_dist(&mu, &xt, 0.7, &NoiseSchedule::Linear).is_err());
    }

    #[test]
    fn transition_rows_normalize() {
        let mu = DenoiserOutput::from_probs(vec![vec![0.2, 0.3, 0.5]; 3]).unwrap();
        let v = vocab(4);
        let s = NoiseSchedule::default_log_linear();
        for toks in [[3, 3, 3], [0, 3, 2], [1, 1, 1]] {
            let xt = MaskedSample::new(Sequence::new(toks.to_vec(), v).unwrap(), 0.8).unwrap();
            for &to in &[0.0, 0.3, 0.79] {
                for row in reverse_transition_dist(&mu, &xt, to, &s).unwrap() {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn endpoint_logprob_cases() {
        let v = vocab(5);
        let mu = DenoiserOutput::from_probs(vec![vec![0.25; 4], vec![0.1, 0.2, 0.3, 0.4]]).unwrap();
        let vis = MaskedSample::new(Sequence::new(vec![1, 2], v).unwrap(), 0.3).unwrap();
        let x0 = Sequence::clean(vec![1, 2], v).unwrap();
        assert_eq!(endpoint_logprob(&mu, &vis, &x0).unwrap(), 0.0);

        let one = MaskedSample::new(Sequence::new(vec![4, 2], v).unwrap(), 0.3).unwrap();
        let lp = endpoint_logprob(&mu, &one, &x0).unwrap();
        assert_relative_eq!(lp, 0.25f64.ln(), max_relative = 1e-12);
        assert!((lp + 1.3863).abs() < 1e-4);

        let other = Sequence::clean(vec![1, 3], v).unwrap();
        assert!(is_neg_inf(endpoint_logprob(&mu, &one, &other).unwrap()));
        let short = Sequence::clean(vec![1], v).unwrap();
        assert!(endpoint_logprob(&mu, &one, &short).is_err());
    }

    fn tiny_model(d: usize, seed: u64) -> DenoiserModel {
        let mut m = DenoiserModel::new(
            &Architecture::Tabular(TabularConfig { buckets: 2 }),
            vocab(d),
            1,
            &mut seeded(0),
        )
        .unwrap();
        let mut rng = seeded(seed);
        m.params_mut().iter_mut().for_each(|p| *p = rng.gen_range(-1.5..1.5));
        m
    }

    #[test]
    fn single_step_law_matches_mu() {
        let m = tiny_model(4, 3);
        let v = m.vocab();
        let grid = TimeGrid::new(1).unwrap();
        let mu = m.predict_mean(&MaskedSample::all_masked(1, v)).unwrap();
        let mut rng = seeded(17);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let x = ancestral_sample(&m, &grid, &NoiseSchedule::Linear, &mut rng).unwrap();
            counts[x.tokens()[0] as usize] += 1;
        }
        let tv: f64 = 0.5
            * (0..3)
                .map(|j| (counts[j] as f64 / n as f64 - mu.row(0)[j]).abs())
                .sum::<f64>();
        assert!(tv <= 0.02, "tv = {tv}");
    }

    #[test]
    fn trajectories_never_remask() {
        let m = tiny_model(5, 8);
        let grid = TimeGrid::new(6).unwrap();
        let v = m.vocab();
        let mut rng = seeded(4);
        for _ in 0..200 {
            let mut stats = SamplerStats::default();
            let x = ancestral_sample_with(&m, &grid, &NoiseSchedule::default_log_linear(), &mut rng, Some(&mut stats))
                .unwrap();
            assert!(x.is_clean(v));
            assert_eq!(stats.calls_per_step, vec![1; 6]);
            for w in stats.states.windows(2) {
                assert!(w[1].t < w[0].t);
                assert!(crate::forward::consistent_masked(&w[0].seq, &w[1].seq, v));
            }
        }
    }

    #[test]
    fn batch_sampler_matches_sequential_law() {
        let m = tiny_model(4, 21);
        let grid = TimeGrid::new(3).unwrap();
        let s = NoiseSchedule::Linear;
        let mut rng = seeded(2);
        let n = 60_000;
        let mut a = [0usize; 3];
        let mut b = [0usize; 3];
        for _ in 0..n {
            a[ancestral_sample(&m, &grid, &s, &mut rng).unwrap().tokens()[0] as usize] += 1;
        }
        for x in sample_batch(&m, n, &grid, &s, &mut rng).unwrap() {
            b[x.tokens()[0] as usize] += 1;
        }
        for j in 0..3 {
            let (pa, pb) = (a[j] as f64 / n as f64, b[j] as f64 / n as f64);
            let se = (pa * (1.0 - pa) / n as f64 * 2.0).sqrt();
            assert!((pa - pb).abs() < 4.0 * se + 1e-9, "{pa} vs {pb}");
        }
    }
}
