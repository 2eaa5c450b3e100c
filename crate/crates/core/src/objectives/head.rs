//! Learned `log Z_{π_t}(x_t)` head.
//!
//! Features: a pooled sum of position-specific token embeddings, the masked
//! fraction and `t`. One tanh hidden layer maps them to a scalar.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::sequence::{MaskedSample, Vocabulary};

/// Update rule for the head. Adam is the default and copes with residuals
/// of any scale. Plain gradient descent reaches a tight constant fit much
/// faster on small problems (Adam's sign-like early steps push every hidden
/// unit at once and leave a curved residual in `t` that is slow to unwind)
/// but its step must be matched to the residual scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadOptimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogZHeadConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub lr: f64,
    pub optimizer: HeadOptimizer,
}

impl Default for LogZHeadConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: 32,
            lr: 1e-3,
            optimizer: HeadOptimizer::Adam,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogZHead {
    cfg: LogZHeadConfig,
    vocab: Vocabulary,
    n: usize,
    params: Vec<f64>,
    opt: Adam,
}

/// Activations of one batch.
#[derive(Debug)]
pub struct HeadTape {
    tokens: Vec<Vec<u32>>,
    feats: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl LogZHead {
    pub fn new<R: Rng + ?Sized>(cfg: LogZHeadConfig, vocab: Vocabulary, n: usize, rng: &mut R) -> Result<Self> {
        if cfg.embed_dim == 0 || cfg.hidden == 0 || !(cfg.lr > 0.0) {
            return Err(Error::InvalidInput(format!("invalid logZ head config {cfg:?}")));
        }
        let mut head = Self {
            cfg,
            vocab,
            n,
            params: Vec::new(),
            opt: Adam::new(AdamConfig::with_lr(cfg.lr), 0),
        };
        let o = head.offsets();
        let mut params = vec![0.0; o.total];
        let f = cfg.embed_dim + 2;
        for p in &mut params[..o.w1] {
            *p = rng.gen_range(-0.1..0.1);
        }
        let s1 = (3.0 / f as f64).sqrt() * 0.5;
        for p in &mut params[o.w1..o.b1] {
            *p = rng.gen_range(-s1..s1);
        }
        // The output layer starts at zero so the initial estimate is constant.
        head.opt = Adam::new(AdamConfig::with_lr(cfg.lr), o.total);
        head.params = params;
        Ok(head)
    }

    fn offsets(&self) -> Offsets {
        let (e, h) = (self.cfg.embed_dim, self.cfg.hidden);
        let w1 = self.n * self.vocab.size() * e;
        let b1 = w1 + (e + 2) * h;
        let w2 = b1 + h;
        let b2 = w2 + h;
        Offsets {
            w1,
            b1,
            w2,
            b2,
            total: b2 + 1,
        }
    }

    pub fn config(&self) -> LogZHeadConfig {
        self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn set_optimizer(&mut self, opt: Adam) {
        self.opt = opt;
    }

    /// Changes the step size, keeping the optimizer moments.
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.lr = lr;
        self.opt.cfg.lr = lr;
    }

    /// Sets the output to the constant `c` for every input.
    pub fn set_constant(&mut self, c: f64) {
        let o = self.offsets();
        self.params[o.w2..o.b2].iter_mut().for_each(|w| *w = 0.0);
        self.params[o.b2] = c;
    }

    pub fn forward(&self, xs: &[MaskedSample]) -> Result<(Vec<f64>, HeadTape)> {
        let (e, h) = (self.cfg.embed_dim, self.cfg.hidden);
        let d = self.vocab.size();
        let o = self.offsets();
        let mut outs = Vec::with_capacity(xs.len());
        let mut tape = HeadTape {
            tokens: Vec::with_capacity(xs.len()),
            feats: Vec::with_capacity(xs.len()),
            hidden: Vec::with_capacity(xs.len()),
        };
        for x in xs {
            if x.len() != self.n {
                return Err(Error::InvalidInput(format!("logZ head expects length {}, got {}", self.n, x.len())));
            }
            x.seq.check_vocab(self.vocab)?;
            let mut feat = vec![0.0; e + 2];
            for (i, &tok) in x.tokens().iter().enumerate() {
                let off = (i * d + tok as usize) * e;
                for j in 0..e {
                    feat[j] += self.params[off + j];
                }
            }
            feat[e] = x.seq.mask_count(self.vocab) as f64 / self.n as f64;
            feat[e + 1] = x.t;
            let mut hid = self.params[o.b1..o.w2].to_vec();
            for (a, &fa) in feat.iter().enumerate() {
                let row = &self.params[o.w1 + a * h..o.w1 + (a + 1) * h];
                hid.iter_mut().zip(row).for_each(|(z, &w)| *z += fa * w);
            }
            hid.iter_mut().for_each(|z| *z = z.tanh());
            let out = self.params[o.b2]
                + hid
                    .iter()
                    .zip(&self.params[o.w2..o.b2])
                    .map(|(a, w)| a * w)
                    .sum::<f64>();
            outs.push(out);
            tape.tokens.push(x.tokens().to_vec());
            tape.feats.push(feat);
            tape.hidden.push(hid);
        }
        Ok((outs, tape))
    }

    pub fn predict(&self, xs: &[MaskedSample]) -> Result<Vec<f64>> {
        Ok(self.forward(xs)?.0)
    }

    /// Parameter gradient for upstream gradients on each output.
    pub fn backward(&self, tape: &HeadTape, douts: &[f64]) -> Vec<f64> {
        let (e, h) = (self.cfg.embed_dim, self.cfg.hidden);
        let d = self.vocab.size();
        let o = self.offsets();
        let mut g = vec![0.0; o.total];
        for (((toks, feat), hid), &dout) in tape.tokens.iter().zip(&tape.feats).zip(&tape.hidden).zip(douts) {
            g[o.b2] += dout;
            let mut dz = vec![0.0; h];
            for j in 0..h {
                g[o.w2 + j] += dout * hid[j];
                dz[j] = dout * self.params[o.w2 + j] * (1.0 - hid[j] * hid[j]);
                g[o.b1 + j] += dz[j];
            }
            let mut dfeat = vec![0.0; e];
            for (a, &fa) in feat.iter().enumerate() {
                let row = o.w1 + a * h;
                let mut acc = 0.0;
                for j in 0..h {
                    g[row + j] += fa * dz[j];
                    acc += self.params[row + j] * dz[j];
                }
                if a < e {
                    dfeat[a] = acc;
                }
            }
            for (i, &tok) in toks.iter().enumerate() {
                let off = (i * d + tok as usize) * e;
                for j in 0..e {
                    g[off + j] += dfeat[j];
                }
            }
        }
        g
    }

    /// One optimizer step with the head's own learning rate.
    pub fn step(&mut self, grad: &[f64]) -> Result<()> {
        match self.cfg.optimizer {
            HeadOptimizer::Adam => self.opt.step(&mut self.params, grad),
            HeadOptimizer::Sgd => {
                if grad.len() != self.params.len() {
                    return Err(Error::Size(format!("head has {} params, got {} grads", self.params.len(), grad.len())));
                }
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Training("non-finite logZ head gradient".into()));
                }
                let lr = self.cfg.lr;
                self.params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::grad_check;
    use crate::rng::seeded;
    use crate::sequence::Sequence;

    #[test]
    fn gradient_matches_differences() {
        let v = Vocabulary::new(4).unwrap();
        let head = LogZHead::new(LogZHeadConfig { embed_dim: 3, hidden: 5, ..Default::default() }, v, 2, &mut seeded(1)).unwrap();
        let xs = vec![
            MaskedSample::new(Sequence::new(vec![3, 1], v).unwrap(), 0.4).unwrap(),
            MaskedSample::new(Sequence::new(vec![0, 3], v).unwrap(), 0.9).unwrap(),
        ];
        let up = [0.7, -1.3];
        let (_, tape) = head.forward(&xs).unwrap();
        let analytic = head.backward(&tape, &up);
        let mut probe = head.clone();
        let err = grad_check(
            head.params(),
            &analytic,
            |p| {
                probe.params_mut().copy_from_slice(p);
                let out = probe.predict(&xs).unwrap();
                out[0] * up[0] + out[1] * up[1]
            },
            1e-4,
            None,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_output() {
        let v = Vocabulary::new(3).unwrap();
        let mut head = LogZHead::new(LogZHeadConfig::default(), v, 1, &mut seeded(0)).unwrap();
        head.set_constant(1.25);
        let out = head.predict(&[MaskedSample::all_masked(1, v)]).unwrap();
        assert_eq!(out, vec![1.25]);
    }
}
