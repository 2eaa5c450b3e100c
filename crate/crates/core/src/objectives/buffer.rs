//! Fixed-capacity replay buffer of clean sequences.

use rand::Rng;

use crate::error::{Error, Result};
use crate::sequence::Sequence;

pub const DEFAULT_CAPACITY: usize = 10_000;

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Sequence>,
    cursor: usize,
}

impl Default for ReplayBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl ReplayBuffer {
    /// # Panics
    /// If `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Current contents, oldest first.
    pub fn contents(&self) -> Vec<Sequence> {
        if self.items.len() < self.capacity {
            return self.items.clone();
        }
        let mut out = self.items[self.cursor..].to_vec();
        out.extend_from_slice(&self.items[..self.cursor]);
        out
    }

    pub fn push(&mut self, seq: Sequence) {
        if self.items.len() < self.capacity {
            self.items.push(seq);
        } else {
            self.items[self.cursor] = seq;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn extend<I: IntoIterator<Item = Sequence>>(&mut self, seqs: I) {
        seqs.into_iter().for_each(|s| self.push(s));
    }

    /// Uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<Sequence>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch)
            .map(|_| self.items[rng.gen_range(0..self.items.len())].clone())
            .collect())
    }
}
