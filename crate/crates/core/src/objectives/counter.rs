//! Model and reward evaluation counts.

use serde::Serialize;

/// Number of single-sequence evaluations of each network and of the reward.
/// A batched forward pass over `B` inputs counts as `B` calls.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CallCounter {
    pub pretrained: u64,
    pub finetuned: u64,
    pub reward: u64,
}

impl CallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_pretrained(&mut self, n: usize) {
        self.pretrained += n as u64;
    }

    pub fn add_finetuned(&mut self, n: usize) {
        self.finetuned += n as u64;
    }

    pub fn add_reward(&mut self, n: usize) {
        self.reward += n as u64;
    }

    /// Returns the counts so far and starts a new step.
    pub fn take(&mut self) -> Self {
        std::mem::take(self)
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}
