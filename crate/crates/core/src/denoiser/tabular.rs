//! Lookup-table denoiser for enumerable toy instances.
//!
//! Logits are indexed by `(position, input token, time bucket)`. Because
//! visible positions are copied through, only the mask-token entries are ever
//! read; each masked position therefore sees nothing but its own index and
//! the time bucket.

use serde::{Deserialize, Serialize};

use super::{DenoiserOutput, LogitGrad};
use crate::error::{Error, Result};
use crate::sequence::{MaskedSample, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TabularConfig {
    pub buckets: usize,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self { buckets: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDenoiser {
    cfg: TabularConfig,
    vocab: Vocabulary,
    n: usize,
    params: Vec<f64>,
}

#[derive(Debug)]
pub(crate) struct TabularTape {
    /// Table offset of the logit row used for each (input, position).
    offsets: Vec<Vec<Option<usize>>>,
}

impl TabularDenoiser {
    pub fn new(cfg: TabularConfig, vocab: Vocabulary, n: usize) -> Result<Self> {
        if cfg.buckets == 0 {
            return Err(Error::InvalidInput("tabular model needs at least one time bucket".into()));
        }
        let size = n * vocab.size() * cfg.buckets * vocab.num_clean();
        Ok(Self {
            cfg,
            vocab,
            n,
            params: vec![0.0; size],
        })
    }

    pub fn config(&self) -> TabularConfig {
        self.cfg
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn seq_len(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn bucket(&self, t: f64) -> usize {
        let b = self.cfg.buckets;
        ((t * b as f64).floor() as usize).min(b - 1)
    }

    fn row_offset(&self, pos: usize, tok: u32, bucket: usize) -> usize {
        let k = self.vocab.num_clean();
        ((pos * self.vocab.size() + tok as usize) * self.cfg.buckets + bucket) * k
    }

    /// Overwrites the masked-input logits of `pos` in every time bucket.
    pub fn set_masked_logits(&mut self, pos: usize, logits: &[f64]) {
        for b in 0..self.cfg.buckets {
            self.set_masked_logits_in_bucket(pos, b, logits);
        }
    }

    pub fn set_masked_logits_in_bucket(&mut self, pos: usize, bucket: usize, logits: &[f64]) {
        let k = self.vocab.num_clean();
        assert_eq!(logits.len(), k);
        let off = self.row_offset(pos, self.vocab.mask_id(), bucket);
        self.params[off..off + k].copy_from_slice(logits);
    }

    pub(crate) fn forward(&self, xs: &[MaskedSample]) -> (Vec<DenoiserOutput>, TabularTape) {
        let k = self.vocab.num_clean();
        let mut outputs = Vec::with_capacity(xs.len());
        let mut offsets = Vec::with_capacity(xs.len());
        let mut logits = vec![0.0; self.n * k];
        for xt in xs {
            let b = self.bucket(xt.t);
            let mut offs = Vec::with_capacity(self.n);
            for (i, &tok) in xt.tokens().iter().enumerate() {
                if self.vocab.is_mask(tok) {
                    let off = self.row_offset(i, tok, b);
                    logits[i * k..(i + 1) * k].copy_from_slice(&self.params[off..off + k]);
                    offs.push(Some(off));
                } else {
                    offs.push(None);
                }
            }
            outputs.push(DenoiserOutput::from_logits(&logits, xt.tokens(), self.vocab));
            offsets.push(offs);
        }
        (outputs, TabularTape { offsets })
    }

    pub(crate) fn backward(&self, tape: &TabularTape, grads: &[LogitGrad]) -> Vec<f64> {
        let k = self.vocab.num_clean();
        let mut out = vec![0.0; self.params.len()];
        for (offs, g) in tape.offsets.iter().zip(grads) {
            for (i, off) in offs.iter().enumerate() {
                if let Some(off) = *off {
                    let src = &g.as_slice()[i * k..(i + 1) * k];
                    out[off..off + k].iter_mut().zip(src).for_each(|(o, &s)| *o += s);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_cover_unit_interval() {
        let m = TabularDenoiser::new(TabularConfig { buckets: 4 }, Vocabulary::new(3).unwrap(), 1).unwrap();
        assert_eq!(m.bucket(0.0), 0);
        assert_eq!(m.bucket(0.25), 1);
        assert_eq!(m.bucket(0.999), 3);
        assert_eq!(m.bucket(1.0), 3);
    }
}
