use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{check_rows, Reward, LOG_REWARD_FLOOR};
use crate::oracle::DistTable;
use crate::sequence::{Sequence, Vocabulary};

/// Sixteen squares on a 128 × 128 grid, with a half-plane reward.
///
/// A point is the two-token sequence `(x⁰, x¹)`. The prior is uniform over
/// the squares with a small density `eps_prior` (relative to inside cells)
/// everywhere else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridTask {
    pub side: u32,
    pub squares_per_axis: u32,
    pub square: u32,
    pub period: u32,
    pub offset: u32,
    pub eps_prior: f64,
    pub threshold: u32,
    pub relaxation: GridRelaxation,
}

/// Smooth extension of the half-plane log reward to simplex rows. Both
/// agree with the hard reward on one-hot rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridRelaxation {
    /// `log max(e^{-30}, m)` where `m` is the row-0 mass at or above the
    /// threshold: the log of the expected indicator.
    #[default]
    LogMass,
    /// `Σ_v row₀[v] · log R(v) = −30 (1 − m)`: linear in the rows, so the
    /// straight-through estimator is unbiased for it. Under `LogMass` the
    /// straight-through gradient vanishes at every below-threshold one-hot
    /// and is 1 above it, which stalls reverse-KL training at a half-plane
    /// fraction `m` solving `logit(m) = m` (≈ 0.66 from a balanced start).
    Linear,
}

impl Default for GridTask {
    fn default() -> Self {
        Self {
            side: 128,
            squares_per_axis: 4,
            square: 16,
            period: 32,
            offset: 8,
            eps_prior: 1e-4,
            threshold: 64,
            relaxation: GridRelaxation::LogMass,
        }
    }
}

impl GridTask {
    pub fn validate(&self) -> Result<()> {
        let last = self.offset + (self.squares_per_axis - 1) * self.period + self.square;
        if self.side < 2 || self.squares_per_axis == 0 || self.square == 0 || self.square > self.period || last > self.side {
            return Err(Error::Config(format!("squares do not fit on the grid: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.eps_prior) {
            return Err(Error::Config(format!("eps_prior must lie in [0, 1], got {}", self.eps_prior)));
        }
        if self.threshold > self.side {
            return Err(Error::Config(format!("threshold {} exceeds side {}", self.threshold, self.side)));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.side as usize + 1).expect("side >= 2")
    }

    pub fn seq_len(&self) -> usize {
        2
    }

    fn in_band(&self, c: u32) -> bool {
        c >= self.offset && {
            let r = c - self.offset;
            r / self.period < self.squares_per_axis && r % self.period < self.square
        }
    }

    pub fn in_square(&self, x: u32, y: u32) -> bool {
        x < self.side && y < self.side && self.in_band(x) && self.in_band(y)
    }

    fn inside_cells(&self) -> f64 {
        (self.squares_per_axis * self.squares_per_axis * self.square * self.square) as f64
    }

    fn cells(&self) -> f64 {
        (self.side * self.side) as f64
    }

    /// Weight of the uniform-over-grid component that makes the outside
    /// density exactly `eps_prior` times the inside density.
    pub fn mixture_weight(&self) -> f64 {
        let r = self.cells() / self.inside_cells();
        let e = self.eps_prior;
        r * e / (1.0 + (r - 1.0) * e)
    }

    pub fn prior_sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequence {
        let (x, y) = if rng.gen::<f64>() < self.mixture_weight() {
            (rng.gen_range(0..self.side), rng.gen_range(0..self.side))
        } else {
            let corner = |k: u32, u: u32| self.offset + k * self.period + u;
            let (i, j) = (rng.gen_range(0..self.squares_per_axis), rng.gen_range(0..self.squares_per_axis));
            (
                corner(i, rng.gen_range(0..self.square)),
                corner(j, rng.gen_range(0..self.square)),
            )
        };
        Sequence::from_raw(vec![x, y])
    }

    /// The prior as an explicit table over all cells, row-major in `x⁰`.
    pub fn prior_table(&self) -> DistTable {
        let z = self.inside_cells() + (self.cells() - self.inside_cells()) * self.eps_prior;
        let mut support = Vec::with_capacity(self.cells() as usize);
        let mut probs = Vec::with_capacity(self.cells() as usize);
        for x in 0..self.side {
            for y in 0..self.side {
                support.push(Sequence::from_raw(vec![x, y]));
                probs.push(if self.in_square(x, y) { 1.0 } else { self.eps_prior } / z);
            }
        }
        DistTable::from_weights(support, probs).expect("valid table")
    }

    pub fn reward(&self) -> GridReward {
        GridReward {
            side: self.side,
            threshold: self.threshold,
            relaxation: self.relaxation,
        }
    }
}

/// `log R = 0` when `x⁰ ≥ threshold`, the floor otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridReward {
    pub side: u32,
    pub threshold: u32,
    pub relaxation: GridRelaxation,
}

impl GridReward {
    fn check(&self, x0: &Sequence) -> Result<()> {
        if x0.len() != 2 || x0.tokens().iter().any(|&t| t >= self.side) {
            return Err(Error::InvalidInput(format!("{x0} is not a clean grid point")));
        }
        Ok(())
    }
}

impl Reward for GridReward {
    fn name(&self) -> &str {
        "grid-half-plane"
    }

    fn raw_log_reward(&self, x0: &Sequence) -> Result<f64> {
        self.check(x0)?;
        Ok(if x0.tokens()[0] >= self.threshold { 0.0 } else { LOG_REWARD_FLOOR })
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    /// See [`GridRelaxation`]. `LogMass` is evaluated as
    /// `log(f + (1 − f) m)` with `f = e^{-30}`, the log of the expected
    /// floored reward.
    fn relaxed(&self, rows: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
        let k = self.side as usize;
        check_rows(rows, 2, k)?;
        let th = self.threshold as usize;
        if self.relaxation == GridRelaxation::Linear {
            let below: f64 = rows[0][..th].iter().sum();
            let mut grad = vec![vec![0.0; k]; 2];
            grad[0][..th].iter_mut().for_each(|x| *x = LOG_REWARD_FLOOR);
            return Ok((LOG_REWARD_FLOOR * below, grad));
        }
        let floor = LOG_REWARD_FLOOR.exp();
        let mass: f64 = rows[0][th..].iter().sum();
        let arg = floor + (1.0 - floor) * mass;
        let mut grad = vec![vec![0.0; k]; 2];
        if arg <= floor {
            // perturbed rows can dip below the simplex; the value saturates
            return Ok((LOG_REWARD_FLOOR, grad));
        }
        let g = (1.0 - floor) / arg;
        grad[0][th..].iter_mut().for_each(|x| *x = g);
        Ok((arg.ln(), grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::RewardModel;
    use crate::oracle::exact_target;
    use crate::rng::seeded;

    #[test]
    fn geometry() {
        let g = GridTask::default();
        g.validate().unwrap();
        assert!(g.in_square(8, 8));
        assert!(!g.in_square(0, 0));
        assert!(g.in_square(23, 104) && !g.in_square(24, 104) && !g.in_square(23, 120));
        let inside = (0..128).flat_map(|x| (0..128).map(move |y| (x, y))).filter(|&(x, y)| g.in_square(x, y)).count();
        assert_eq!(inside, 16 * 256);
    }

    #[test]
    fn prior_table_and_mixture_agree() {
        let g = GridTask::default();
        let t = g.prior_table();
        assert!((t.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let w = g.mixture_weight();
        assert!((w - 4e-4 / (1.0 + 3e-4)).abs() < 1e-15);
        // sampler cell probabilities from the mixture
        let inside = w / 16384.0 + (1.0 - w) / 4096.0;
        let outside = w / 16384.0;
        assert!((t.prob(&Sequence::from_raw(vec![8, 8])) - inside).abs() < 1e-15);
        assert!((t.prob(&Sequence::from_raw(vec![0, 0])) - outside).abs() < 1e-15);
    }

    #[test]
    fn prior_samples_land_in_squares() {
        let g = GridTask::default();
        let mut rng = seeded(0);
        let inside = (0..100_000)
            .filter(|_| {
                let s = g.prior_sample(&mut rng);
                g.in_square(s.tokens()[0], s.tokens()[1])
            })
            .count();
        assert!(inside as f64 / 1e5 >= 0.98);
        let strict = GridTask { eps_prior: 0.0, ..g };
        assert!((0..10_000).all(|_| {
            let s = strict.prior_sample(&mut rng);
            strict.in_square(s.tokens()[0], s.tokens()[1])
        }));
    }

    #[test]
    fn reward_examples() {
        let r = RewardModel::new(GridTask::default().reward());
        let p = |x, y| Sequence::from_raw(vec![x, y]);
        assert_eq!(r.log_reward(&p(64, 0)).unwrap(), 0.0);
        assert_eq!(r.log_reward(&p(63, 127)).unwrap(), -30.0);
        assert_eq!(r.log_reward(&p(100, 50)).unwrap(), 0.0);
        assert!(matches!(r.log_reward(&p(128, 0)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn relaxed_reward_matches_hard_reward_on_one_hots() {
        let r = RewardModel::new(GridTask::default().reward());
        let mut other = vec![0.0; 128];
        other[5] = 1.0;
        for v in 0..128u32 {
            let mut row = vec![0.0; 128];
            row[v as usize] = 1.0;
            let (val, _) = r.relaxed_log_reward(&[&row, &other]).unwrap();
            let hard = r.log_reward(&Sequence::from_raw(vec![v, 5])).unwrap();
            assert!((val - hard).abs() < 1e-9, "{v}: {val} vs {hard}");
        }
        let uniform = vec![1.0 / 128.0; 128];
        let (val, g) = r.relaxed_log_reward(&[&uniform, &uniform]).unwrap();
        assert!((val - 0.5f64.ln()).abs() < 1e-9);
        assert!((g[0][100] - 2.0).abs() < 1e-9 && g[0][10] == 0.0 && g[1].iter().all(|&x| x == 0.0));
        let bad = vec![0.01; 128];
        assert!(matches!(r.relaxed_log_reward(&[&bad, &uniform]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn linear_relaxation_agrees_on_one_hots() {
        let g = GridTask {
            relaxation: GridRelaxation::Linear,
            ..Default::default()
        };
        let r = RewardModel::new(g.reward());
        let mut other = vec![0.0; 128];
        other[77] = 1.0;
        for v in 0..128u32 {
            let mut row = vec![0.0; 128];
            row[v as usize] = 1.0;
            let (val, _) = r.relaxed_log_reward(&[&row, &other]).unwrap();
            assert_eq!(val, r.log_reward(&Sequence::from_raw(vec![v, 77])).unwrap());
        }
        let uniform = vec![1.0 / 128.0; 128];
        let (val, grad) = r.relaxed_log_reward(&[&uniform, &uniform]).unwrap();
        assert!((val + 15.0).abs() < 1e-9);
        assert!(grad[0][10] == -30.0 && grad[0][100] == 0.0 && grad[1].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn exact_target_concentrates_on_rewarded_squares() {
        let g = GridTask::default();
        let target = exact_target(&g.prior_table(), &RewardModel::new(g.reward())).unwrap();
        let mass: f64 = target
            .iter()
            .filter(|(s, _)| s.tokens()[0] >= 64 && g.in_square(s.tokens()[0], s.tokens()[1]))
            .map(|(_, p)| p)
            .sum();
        assert!(mass >= 0.98, "{mass}");
    }
}
