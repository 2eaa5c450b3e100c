//! Token vocabularies, sequences and time grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stand-in for `-inf` in log-space arithmetic.
///
/// Sums of a few sentinels stay finite, so downstream arithmetic never
/// produces NaN. Use [`is_neg_inf`] to test for it.
pub const NEG_INF: f64 = -1e30;

/// Anything at or below half the sentinel is treated as `-inf`.
pub fn is_neg_inf(x: f64) -> bool {
    x <= NEG_INF * 0.5
}

/// Category count `d` including the mask token, which is always `d - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidInput(format!(
                "vocabulary needs at least 2 categories (one token plus mask), got {size}"
            )));
        }
        Ok(Self { size })
    }

    /// Total category count `d`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_id(&self) -> u32 {
        (self.size - 1) as u32
    }

    /// Number of clean (non-mask) tokens, `d - 1`.
    pub fn num_clean(&self) -> usize {
        self.size - 1
    }

    pub fn is_mask(&self, tok: u32) -> bool {
        tok == self.mask_id()
    }
}

/// A fixed-length token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sequence {
    tokens: Vec<u32>,
}

impl Sequence {
    pub fn new(tokens: Vec<u32>, vocab: Vocabulary) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("sequence must be non-empty".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab.size()) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of range for vocabulary of size {}",
                vocab.size()
            )));
        }
        Ok(Self { tokens })
    }

    /// A clean sequence: no position may hold the mask token.
    pub fn clean(tokens: Vec<u32>, vocab: Vocabulary) -> Result<Self> {
        let seq = Self::new(tokens, vocab)?;
        seq.ensure_clean(vocab)?;
        Ok(seq)
    }

    pub fn all_masked(n: usize, vocab: Vocabulary) -> Self {
        Self {
            tokens: vec![vocab.mask_id(); n],
        }
    }

    /// Builds without validation; callers guarantee ids are in range.
    pub(crate) fn from_raw(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_clean(&self, vocab: Vocabulary) -> bool {
        !self.tokens.iter().any(|&t| vocab.is_mask(t))
    }

    pub fn ensure_clean(&self, vocab: Vocabulary) -> Result<()> {
        if self.is_clean(vocab) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "expected a clean sequence, found mask token in {self}"
            )))
        }
    }

    pub fn mask_count(&self, vocab: Vocabulary) -> usize {
        self.tokens.iter().filter(|&&t| vocab.is_mask(t)).count()
    }

    pub fn check_vocab(&self, vocab: Vocabulary) -> Result<()> {
        match self.tokens.iter().find(|&&t| t as usize >= vocab.size()) {
            Some(bad) => Err(Error::InvalidInput(format!(
                "token id {bad} out of range for vocabulary of size {}",
                vocab.size()
            ))),
            None => Ok(()),
        }
    }
}

impl std::fmt::Display for Sequence {
    /// Hyphen-joined ids, e.g. `3-0-7`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// A partially masked sequence together with its corruption time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedSample {
    pub seq: Sequence,
    pub t: f64,
}

impl MaskedSample {
    pub fn new(seq: Sequence, t: f64) -> Result<Self> {
        check_time(t)?;
        Ok(Self { seq, t })
    }

    pub fn all_masked(n: usize, vocab: Vocabulary) -> Self {
        Self {
            seq: Sequence::all_masked(n, vocab),
            t: 1.0,
        }
    }

    pub fn tokens(&self) -> &[u32] {
        self.seq.tokens()
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }
}

pub(crate) fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("time {t} outside [0, 1]")))
    }
}

/// Uniform discretization of `[0, 1]` into `steps` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidInput("time grid needs at least one step".into()));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `t(i) = i / T`.
    pub fn time(&self, i: usize) -> f64 {
        if i >= self.steps {
            1.0
        } else {
            i as f64 / self.steps as f64
        }
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.steps as f64
    }
}
