use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{check_rows, Reward};
use crate::sequence::{Sequence, Vocabulary};

/// Two classes of binary patterns: noisy copies of a template and of its
/// complement. A small stand-in for a two-digit binarized image set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoClassTask {
    /// Class-0 template; class 1 is its complement.
    pub template: Vec<u32>,
    /// Independent per-pixel flip probability.
    pub flip: f64,
    /// Inverse temperature of the classifier reward.
    pub beta: f64,
}

impl Default for TwoClassTask {
    fn default() -> Self {
        Self {
            template: vec![1, 1, 1, 0, 0, 0],
            flip: 0.1,
            beta: 5.0,
        }
    }
}

impl TwoClassTask {
    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(3).expect("binary vocabulary")
    }

    pub fn seq_len(&self) -> usize {
        self.template.len()
    }

    pub fn sample_class<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Sequence {
        let tokens = self
            .template
            .iter()
            .map(|&b| {
                let bit = if class == 0 { b } else { 1 - b };
                if rng.gen::<f64>() < self.flip {
                    1 - bit
                } else {
                    bit
                }
            })
            .collect();
        Sequence::from_raw(tokens)
    }

    /// `count` samples with classes drawn uniformly.
    pub fn dataset<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Sequence> {
        (0..count)
            .map(|_| {
                let c = rng.gen_range(0..2);
                self.sample_class(c, rng)
            })
            .collect()
    }

    /// Reward favouring class 0.
    pub fn reward(&self) -> LogisticTemplateReward {
        LogisticTemplateReward {
            template: self.template.clone(),
            beta: self.beta,
        }
    }
}

/// `log R(x) = log σ(β · h(x))` where `h` counts template matches minus
/// mismatches.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticTemplateReward {
    pub template: Vec<u32>,
    pub beta: f64,
}

fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Reward for LogisticTemplateReward {
    fn name(&self) -> &str {
        "logistic-template"
    }

    fn raw_log_reward(&self, x0: &Sequence) -> Result<f64> {
        if x0.len() != self.template.len() || x0.tokens().iter().any(|&t| t > 1) {
            return Err(Error::InvalidInput(format!("{x0} is not a clean binary pattern of length {}", self.template.len())));
        }
        let h: f64 = x0
            .tokens()
            .iter()
            .zip(&self.template)
            .map(|(a, b)| if a == b { 1.0 } else { -1.0 })
            .sum();
        Ok(log_sigmoid(self.beta * h))
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    /// `h` is replaced by its expectation under the rows, which is linear.
    fn relaxed(&self, rows: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
        check_rows(rows, self.template.len(), 2)?;
        let h: f64 = rows
            .iter()
            .zip(&self.template)
            .map(|(r, &b)| 2.0 * r[b as usize] - 1.0)
            .sum();
        let dz = self.beta * sigmoid(-self.beta * h);
        let grad = self
            .template
            .iter()
            .map(|&b| {
                let mut g = vec![0.0; 2];
                g[b as usize] = 2.0 * dz;
                g
            })
            .collect();
        Ok((log_sigmoid(self.beta * h), grad))
    }
}
