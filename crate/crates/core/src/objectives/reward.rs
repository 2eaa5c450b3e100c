//! Reward models `R(x_0)` and their relaxations.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sequence::Sequence;

/// Lower clamp applied to every log reward.
pub const LOG_REWARD_FLOOR: f64 = -30.0;

/// A raw reward function. Implementations return unscaled log rewards; the
/// temperature and the floor are applied by [`RewardModel`].
pub trait Reward: Send + Sync {
    fn name(&self) -> &str;

    fn raw_log_reward(&self, x0: &Sequence) -> Result<f64>;

    fn is_differentiable(&self) -> bool {
        false
    }

    /// Relaxed log reward of per-position probability rows (clean tokens
    /// only) and its gradient with respect to every row entry.
    fn relaxed(&self, _rows: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
        Err(Error::Config(format!("reward '{}' has no relaxation", self.name())))
    }
}

/// A shared, tempered, floored reward.
#[derive(Clone)]
pub struct RewardModel {
    inner: Arc<dyn Reward>,
    beta_inv: f64,
    shift: f64,
}

impl fmt::Debug for RewardModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RewardModel")
            .field("reward", &self.inner.name())
            .field("beta_inv", &self.beta_inv)
            .field("shift", &self.shift)
            .finish()
    }
}

impl RewardModel {
    pub fn new(reward: impl Reward + 'static) -> Self {
        Self {
            inner: Arc::new(reward),
            beta_inv: 1.0,
            shift: 0.0,
        }
    }

    /// `log R <- beta_inv * log R_raw`.
    pub fn with_temperature(mut self, beta_inv: f64) -> Result<Self> {
        if !(beta_inv > 0.0 && beta_inv.is_finite()) {
            return Err(Error::Domain(format!("reward temperature must be positive, got {beta_inv}")));
        }
        self.beta_inv = beta_inv;
        Ok(self)
    }

    /// Multiplies the reward by `exp(log_c)`. The floor moves with it so
    /// that scaling is exact.
    pub fn scaled(&self, log_c: f64) -> Self {
        Self {
            shift: self.shift + log_c,
            ..self.clone()
        }
    }

    pub fn name(&self) -> &str {
        self.inner.name()
    }

    pub fn beta_inv(&self) -> f64 {
        self.beta_inv
    }

    fn finish(&self, raw: f64) -> f64 {
        (self.beta_inv * raw).max(LOG_REWARD_FLOOR) + self.shift
    }

    pub fn log_reward(&self, x0: &Sequence) -> Result<f64> {
        Ok(self.finish(self.inner.raw_log_reward(x0)?))
    }

    pub fn has_relaxed(&self) -> bool {
        self.inner.is_differentiable()
    }

    /// Relaxed log reward and its gradient with respect to the rows.
    pub fn relaxed_log_reward(&self, rows: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
        let (raw, mut grad) = self.inner.relaxed(rows)?;
        let scaled = self.beta_inv * raw;
        if scaled < LOG_REWARD_FLOOR {
            grad.iter_mut().flatten().for_each(|g| *g = 0.0);
        } else {
            grad.iter_mut().flatten().for_each(|g| *g *= self.beta_inv);
        }
        Ok((scaled.max(LOG_REWARD_FLOOR) + self.shift, grad))
    }
}

/// Rows must sum to one; entries may dip slightly below zero because relaxed
/// points built from perturbed rows can leave the simplex by round-off.
pub(crate) fn check_rows(rows: &[&[f64]], n: usize, k: usize) -> Result<()> {
    if rows.len() != n {
        return Err(Error::InvalidInput(format!("expected {n} rows, got {}", rows.len())));
    }
    for (i, r) in rows.iter().enumerate() {
        let s: f64 = r.iter().sum();
        if r.len() != k || (s - 1.0).abs() > 1e-6 || r.iter().any(|&p| p < -1e-3) {
            return Err(Error::InvalidInput(format!(
                "row {i} is not a distribution over {k} tokens (sum {s})"
            )));
        }
    }
    Ok(())
}

/// `log R ≡ c`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantReward(pub f64);

impl Reward for ConstantReward {
    fn name(&self) -> &str {
        "constant"
    }

    fn raw_log_reward(&self, _x0: &Sequence) -> Result<f64> {
        Ok(self.0)
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn relaxed(&self, rows: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
        Ok((self.0, rows.iter().map(|r| vec![0.0; r.len()]).collect()))
    }
}

/// Explicit log rewards for every clean sequence of length `n` over `k`
/// tokens, indexed lexicographically.
///
/// The relaxation is the expected log reward under the product of the rows,
/// which is multilinear and equals the table on one-hot rows.
#[derive(Debug, Clone)]
pub struct TableReward {
    n: usize,
    k: usize,
    log_r: Vec<f64>,
}

impl TableReward {
    pub fn new(n: usize, k: usize, log_r: Vec<f64>) -> Result<Self> {
        let size = k.checked_pow(n as u32).unwrap_or(usize::MAX);
        if log_r.len() != size {
            return Err(Error::InvalidInput(format!(
                "table reward needs {size} entries for n={n}, k={k}; got {}",
                log_r.len()
            )));
        }
        if log_r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("table log rewards must be finite".into()));
        }
        Ok(Self { n, k, log_r })
    }

    /// Builds the table from positive rewards (not logs).
    pub fn from_rewards(n: usize, k: usize, rewards: &[f64]) -> Result<Self> {
        Self::new(n, k, rewards.iter().map(|r| r.ln().max(LOG_REWARD_FLOOR)).collect())
    }

    pub fn index(&self, x0: &[u32]) -> Result<usize> {
        if x0.len() != self.n {
            return Err(Error::InvalidInput(format!("expected length {}, got {}", self.n, x0.len())));
        }
        x0.iter().try_fold(0usize, |acc, &v| {
            if (v as usize) < self.k {
                Ok(acc * self.k + v as usize)
            } else {
                Err(Error::InvalidInput(format!("token {v} is not a clean token")))
            }
        })
    }
}

impl Reward for TableReward {
    fn name(&self) -> &str {
        "table"
    }

    fn raw_log_reward(&self, x0: &Sequence) -> Result<f64> {
        Ok(self.log_r[self.index(x0.tokens())?])
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn relaxed(&self, rows: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
        check_rows(rows, self.n, self.k)?;
        let (n, k) = (self.n, self.k);
        let mut value = 0.0;
        let mut grad = vec![vec![0.0; k]; n];
        let mut digits = vec![0usize; n];
        for &lr in &self.log_r {
            let w: f64 = digits.iter().enumerate().map(|(i, &v)| rows[i][v]).product();
            value += w * lr;
            for i in 0..n {
                let others: f64 = digits
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, &v)| rows[j][v])
                    .product();
                grad[i][digits[i]] += others * lr;
            }
            for d in digits.iter_mut().rev() {
                *d += 1;
                if *d < k {
                    break;
                }
                *d = 0;
            }
        }
        Ok((value, grad))
    }
}
