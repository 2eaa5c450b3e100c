use crate::denoiser::{Architecture, DenoiserModel, TabularConfig};
use crate::error::{Error, Result};
use crate::objectives::{RewardModel, TableReward};
use crate::rng::seeded;
use crate::schedule::NoiseSchedule;
use crate::sequence::{TimeGrid, Vocabulary};

/// An enumerable instance: a tabular pretrained model whose masked-position
/// posteriors are fixed rows (the same at every time and context), and a
/// table reward over all endpoints.
#[derive(Debug, Clone)]
pub struct TinyTask {
    pub pre: DenoiserModel,
    pub reward: RewardModel,
    pub grid: TimeGrid,
    pub schedule: NoiseSchedule,
}

impl TinyTask {
    /// `rows[i]` is the pretrained posterior of position `i`; `rewards` are
    /// positive values in lexicographic endpoint order.
    pub fn new(rows: &[Vec<f64>], rewards: &[f64], steps: usize) -> Result<Self> {
        let k = rows.first().map(Vec::len).unwrap_or(0);
        if k < 1 || rows.iter().any(|r| r.len() != k || r.iter().any(|&p| !(p > 0.0))) {
            return Err(Error::InvalidInput("tiny task rows must be positive and of equal width".into()));
        }
        let vocab = Vocabulary::new(k + 1)?;
        let mut pre = DenoiserModel::new(&Architecture::Tabular(TabularConfig::default()), vocab, rows.len(), &mut seeded(0))?;
        let tab = pre.as_tabular_mut().expect("tabular");
        for (i, r) in rows.iter().enumerate() {
            let logits: Vec<f64> = r.iter().map(|p| p.ln()).collect();
            tab.set_masked_logits(i, &logits);
        }
        Ok(Self {
            pre,
            reward: RewardModel::new(TableReward::from_rewards(rows.len(), k, rewards)?),
            grid: TimeGrid::new(steps)?,
            schedule: NoiseSchedule::Linear,
        })
    }

    /// `p^pre = [0.5, 0.3, 0.2]`, `R = [1, 2, 4]`, so `Z = 1.9`.
    pub fn three_point() -> Self {
        Self::new(&[vec![0.5, 0.3, 0.2]], &[1.0, 2.0, 4.0], 4).expect("valid")
    }

    /// `n = 1, d = 3, T = 4`: `p^pre = [0.7, 0.3]`, `R = [1, 3]`, so the
    /// target is `[7/16, 9/16]`.
    pub fn binary() -> Self {
        Self::new(&[vec![0.7, 0.3]], &[1.0, 3.0], 4).expect("valid")
    }

    /// Two positions over three clean tokens with a non-factorizing reward.
    pub fn pair() -> Self {
        let rewards: Vec<f64> = (0..9).map(|i| [1.0, 0.5, 4.0, 2.0, 1.0, 0.25, 3.0, 1.5, 6.0][i]).collect();
        Self::new(&[vec![0.5, 0.3, 0.2], vec![0.2, 0.5, 0.3]], &rewards, 4).expect("valid")
    }

    pub fn vocab(&self) -> Vocabulary {
        self.pre.vocab()
    }

    pub fn seq_len(&self) -> usize {
        self.pre.seq_len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_endpoint_law, exact_log_partition, exact_target};
    use crate::sequence::Sequence;

    #[test]
    fn three_point_partition() {
        let t = TinyTask::three_point();
        let law = exact_endpoint_law(&t.pre, &t.grid, &t.schedule).unwrap();
        assert!((law.prob(&Sequence::from_raw(vec![0])) - 0.5).abs() < 1e-12);
        assert!((exact_log_partition(&law, &t.reward).unwrap() - 1.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn binary_target() {
        let t = TinyTask::binary();
        let law = exact_endpoint_law(&t.pre, &t.grid, &t.schedule).unwrap();
        let target = exact_target(&law, &t.reward).unwrap();
        assert!((target.prob(&Sequence::from_raw(vec![1])) - 9.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn pair_law_factorizes() {
        let t = TinyTask::pair();
        let law = exact_endpoint_law(&t.pre, &t.grid, &t.schedule).unwrap();
        assert!((law.prob(&Sequence::from_raw(vec![2, 1])) - 0.2 * 0.5).abs() < 1e-12);
    }
}
