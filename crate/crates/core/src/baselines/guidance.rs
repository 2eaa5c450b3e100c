use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{reverse_step, sample_batch, DenoiserModel};
use crate::error::{Error, Result};
use crate::objectives::RewardModel;
use crate::rng::categorical;
use crate::schedule::NoiseSchedule;
use crate::sequence::{MaskedSample, Sequence, TimeGrid};

/// Draws `n` pretrained samples and keeps the highest-reward one (first on
/// ties).
pub fn best_of_n<R: Rng + ?Sized>(
    pre: &DenoiserModel,
    reward: &RewardModel,
    n: usize,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Sequence> {
    if n == 0 {
        return Err(Error::InvalidInput("best-of-n needs n >= 1".into()));
    }
    let samples = sample_batch(pre, n, grid, schedule, rng)?;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, s) in samples.iter().enumerate() {
        let score = reward.log_reward(s)?;
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(samples.into_iter().nth(best).expect("n >= 1"))
}

/// How the particle sampler picks among scored candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Highest score, uniform among ties.
    #[default]
    Argmax,
    /// Resample proportionally to `exp(score)`.
    Softmax,
}

/// Model-call record of one guided run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParticleStats {
    /// The evaluation at the all-mask start state.
    pub setup_calls: u64,
    /// Evaluations in each reverse step, from `t = 1` downwards.
    pub calls_per_step: Vec<u64>,
}

fn select<R: Rng + ?Sized>(scores: &[f64], rule: Selection, rng: &mut R) -> usize {
    if scores.len() == 1 {
        return 0;
    }
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match rule {
        Selection::Argmax => {
            let ties: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] == top).collect();
            if ties.len() == 1 {
                ties[0]
            } else {
                ties[rng.gen_range(0..ties.len())]
            }
        }
        Selection::Softmax => {
            let w: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|x| x / z).collect();
            categorical(&p, rng)
        }
    }
}

/// Value-guided sampling with one active state.
///
/// Each reverse step draws `n_particles` candidates from the current
/// transition law, evaluates the model at every candidate and scores it by
/// the reward of its argmax decode. The chosen candidate's evaluation is the
/// next step's transition law, so a step costs exactly `n_particles` calls.
#[allow(clippy::too_many_arguments)]
pub fn guided_particle_sample<R: Rng + ?Sized>(
    pre: &DenoiserModel,
    reward: &RewardModel,
    n_particles: usize,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    selection: Selection,
    rng: &mut R,
    mut stats: Option<&mut ParticleStats>,
) -> Result<Sequence> {
    if n_particles == 0 {
        return Err(Error::InvalidInput("particle guidance needs at least one particle".into()));
    }
    let mut x = MaskedSample::all_masked(pre.seq_len(), pre.vocab());
    let mut mu = pre.predict_mean(&x)?;
    if let Some(s) = stats.as_deref_mut() {
        s.setup_calls += 1;
    }
    for i in (1..=grid.steps()).rev() {
        let t_to = grid.time(i - 1);
        let candidates = (0..n_particles)
            .map(|_| reverse_step(&mu, &x, t_to, schedule, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut mus = pre.predict_batch(&candidates)?;
        let scores = mus
            .iter()
            .map(|m| reward.log_reward(&Sequence::from_raw(m.argmax())))
            .collect::<Result<Vec<_>>>()?;
        let pick = select(&scores, selection, rng);
        mu = mus.swap_remove(pick);
        x = candidates.into_iter().nth(pick).expect("pick < n_particles");
        if let Some(s) = stats.as_deref_mut() {
            s.calls_per_step.push(n_particles as u64);
        }
    }
    Ok(x.seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ancestral_sample, Architecture, TabularConfig};
    use crate::objectives::{ConstantReward, TableReward};
    use crate::oracle::{empirical_histogram, exact_endpoint_law, expected_best_of_n, tv_distance, Binning};
    use crate::rng::seeded;
    use crate::sequence::Vocabulary;

    fn tiny_pre() -> DenoiserModel {
        let v = Vocabulary::new(4).unwrap();
        let mut m = DenoiserModel::new(&Architecture::Tabular(TabularConfig::default()), v, 1, &mut seeded(0)).unwrap();
        m.as_tabular_mut().unwrap().set_masked_logits(0, &[0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()]);
        m
    }

    fn two_position_pre() -> DenoiserModel {
        let cfg = crate::denoiser::MlpConfig { embed_dim: 4, time_dim: 4, hidden: 8 };
        DenoiserModel::new(&Architecture::Mlp(cfg), Vocabulary::new(4).unwrap(), 2, &mut seeded(3)).unwrap()
    }

    #[test]
    fn single_sample_best_of_n_is_a_plain_sample() {
        let pre = two_position_pre();
        let r = RewardModel::new(TableReward::new(2, 3, (0..9).map(|i| i as f64).collect()).unwrap());
        let grid = TimeGrid::new(5).unwrap();
        for seed in 0..20 {
            let a = best_of_n(&pre, &r, 1, &grid, &NoiseSchedule::Linear, &mut seeded(seed)).unwrap();
            let b = sample_batch(&pre, 1, &grid, &NoiseSchedule::Linear, &mut seeded(seed)).unwrap();
            assert_eq!(a, b[0]);
        }
    }

    #[test]
    fn best_of_n_picks_first_maximum() {
        // a point-mass model always returns the same sample
        let v = Vocabulary::new(3).unwrap();
        let mut m = DenoiserModel::new(&Architecture::Tabular(TabularConfig::default()), v, 1, &mut seeded(0)).unwrap();
        m.as_tabular_mut().unwrap().set_masked_logits(0, &[0.0, -200.0]);
        let r = RewardModel::new(ConstantReward(0.0));
        let s = best_of_n(&m, &r, 7, &TimeGrid::new(3).unwrap(), &NoiseSchedule::Linear, &mut seeded(1)).unwrap();
        assert_eq!(s.tokens(), &[0]);
    }

    #[test]
    fn best_of_n_matches_order_statistics() {
        let pre = tiny_pre();
        let r = RewardModel::new(TableReward::new(1, 3, vec![0.0, 1.0, 2.0]).unwrap());
        let grid = TimeGrid::new(4).unwrap();
        let law = exact_endpoint_law(&pre, &grid, &NoiseSchedule::Linear).unwrap();
        let mut rng = seeded(5);
        let mut prev = f64::NEG_INFINITY;
        for n in [1, 4, 10] {
            let vals: Vec<f64> = (0..10_000)
                .map(|_| r.log_reward(&best_of_n(&pre, &r, n, &grid, &NoiseSchedule::Linear, &mut rng).unwrap()).unwrap())
                .collect();
            let (m, se) = crate::math::mean_se(&vals);
            let exact = expected_best_of_n(&law, &r, n).unwrap();
            assert!((m - exact).abs() <= 3.0 * se.max(1e-3), "n = {n}: {m} vs {exact}");
            assert!(m >= prev - 3.0 * se);
            prev = m;
        }
    }

    #[test]
    fn one_particle_is_ancestral_sampling() {
        let pre = two_position_pre();
        let r = RewardModel::new(TableReward::new(2, 3, (0..9).map(|i| (i % 4) as f64).collect()).unwrap());
        let grid = TimeGrid::new(6).unwrap();
        for schedule in [NoiseSchedule::Linear, NoiseSchedule::default_log_linear()] {
            for seed in 0..50 {
                let a = guided_particle_sample(&pre, &r, 1, &grid, &schedule, Selection::Argmax, &mut seeded(seed), None).unwrap();
                let b = ancestral_sample(&pre, &grid, &schedule, &mut seeded(seed)).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn constant_reward_keeps_the_pretrained_law() {
        let pre = tiny_pre();
        let r = RewardModel::new(ConstantReward(0.0));
        let grid = TimeGrid::new(4).unwrap();
        let mut rng = seeded(9);
        let samples: Vec<Sequence> = (0..100_000)
            .map(|_| guided_particle_sample(&pre, &r, 4, &grid, &NoiseSchedule::Linear, Selection::Argmax, &mut rng, None).unwrap())
            .collect();
        let law = exact_endpoint_law(&pre, &grid, &NoiseSchedule::Linear).unwrap();
        let tv = tv_distance(&empirical_histogram(&samples, Binning::Identity).unwrap(), &law);
        assert!(tv <= 0.02, "{tv}");
    }

    #[test]
    fn selection_rules() {
        let mut rng = seeded(0);
        assert_eq!(select(&[-1.0, 2.0, 0.5], Selection::Argmax, &mut rng), 1);
        let mut hits = [0usize; 3];
        for _ in 0..3000 {
            hits[select(&[1.0, 1.0, 0.0], Selection::Argmax, &mut rng)] += 1;
        }
        assert_eq!(hits[2], 0);
        assert!(hits[0] > 1300 && hits[1] > 1300);
        let mut soft = [0usize; 2];
        for _ in 0..20_000 {
            soft[select(&[0.0, 2f64.ln()], Selection::Softmax, &mut rng)] += 1;
        }
        assert!((soft[1] as f64 / 20_000.0 - 2.0 / 3.0).abs() < 0.02);
    }

    #[test]
    fn calls_per_step() {
        let pre = two_position_pre();
        let r = RewardModel::new(ConstantReward(0.0));
        let mut stats = ParticleStats::default();
        guided_particle_sample(&pre, &r, 10, &TimeGrid::new(7).unwrap(), &NoiseSchedule::Linear, Selection::Argmax, &mut seeded(0), Some(&mut stats)).unwrap();
        assert_eq!(stats.setup_calls, 1);
        assert_eq!(stats.calls_per_step, vec![10; 7]);
    }

    #[test]
    fn guidance_raises_high_reward_fraction() {
        let pre = tiny_pre();
        // binary: only token 2 (prior mass 0.2) is rewarded
        let r = RewardModel::new(TableReward::new(1, 3, vec![-30.0, -30.0, 0.0]).unwrap());
        let grid = TimeGrid::new(4).unwrap();
        let mut rng = seeded(2);
        let hits = (0..10_000)
            .filter(|_| {
                guided_particle_sample(&pre, &r, 10, &grid, &NoiseSchedule::Linear, Selection::Argmax, &mut rng, None)
                    .unwrap()
                    .tokens()[0]
                    == 2
            })
            .count();
        assert!(hits as f64 / 1e4 > 0.5, "{hits}");
    }
}
