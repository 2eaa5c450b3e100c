//! Two-hidden-layer MLP denoiser over concatenated token embeddings.
//!
//! Layout of the flat parameter vector:
//!
//! | block | shape |
//! |-------|-------|
//! | token embedding | `d × E` |
//! | layer 1 weight, bias | `(nE + F) × H`, `H` |
//! | layer 2 weight, bias | `H × H`, `H` |
//! | output head weight, bias, per position | `n × H × (d-1)`, `n × (d-1)` |
//!
//! Each position has its own output head, so the dependence of a position's
//! prediction on the context can differ between positions.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DenoiserOutput, LogitGrad};
use crate::error::{Error, Result};
use crate::sequence::{MaskedSample, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub embed_dim: usize,
    /// Number of sinusoidal time features; must be even.
    pub time_dim: usize,
    pub hidden: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            time_dim: 8,
            hidden: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wo: usize,
    bo: usize,
    total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    cfg: MlpConfig,
    vocab: Vocabulary,
    n: usize,
    layout: Layout,
    params: Vec<f64>,
}

#[derive(Debug)]
pub(crate) struct MlpTape {
    tokens: Vec<Vec<u32>>,
    x: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    z2: Array2<f64>,
    a2: Array2<f64>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Sinusoidal features of `t` at geometric frequencies `π·2^j`.
pub(crate) fn time_features(t: f64, dim: usize, out: &mut [f64]) {
    for j in 0..dim / 2 {
        let w = std::f64::consts::PI * (1u64 << j) as f64;
        out[2 * j] = (w * t).sin();
        out[2 * j + 1] = (w * t).cos();
    }
}

impl MlpDenoiser {
    pub fn new<R: Rng + ?Sized>(cfg: MlpConfig, vocab: Vocabulary, n: usize, rng: &mut R) -> Result<Self> {
        if cfg.embed_dim == 0 || cfg.hidden == 0 || cfg.time_dim % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "invalid MLP config {cfg:?}: embed_dim and hidden must be positive, time_dim even"
            )));
        }
        let d = vocab.size();
        let k = vocab.num_clean();
        let (e, f, h) = (cfg.embed_dim, cfg.time_dim, cfg.hidden);
        let input = n * e + f;
        let emb = 0;
        let w1 = emb + d * e;
        let b1 = w1 + input * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let wo = b2 + h;
        let bo = wo + n * h * k;
        let total = bo + n * k;
        let layout = Layout {
            emb,
            w1,
            b1,
            w2,
            b2,
            wo,
            bo,
            total,
        };
        let mut params = vec![0.0; total];
        let mut fill = |range: std::ops::Range<usize>, scale: f64| {
            for p in &mut params[range] {
                *p = rng.gen_range(-scale..scale);
            }
        };
        fill(emb..w1, 1.0);
        fill(w1..b1, (3.0 / input as f64).sqrt());
        fill(w2..b2, (3.0 / h as f64).sqrt());
        fill(wo..bo, 0.1 * (3.0 / h as f64).sqrt());
        Ok(Self {
            cfg,
            vocab,
            n,
            layout,
            params,
        })
    }

    pub fn config(&self) -> MlpConfig {
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

    fn view(&self, off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[off..off + rows * cols]).expect("layout")
    }

    fn input_dim(&self) -> usize {
        self.n * self.cfg.embed_dim + self.cfg.time_dim
    }

    pub(crate) fn forward(&self, xs: &[MaskedSample]) -> (Vec<DenoiserOutput>, MlpTape) {
        let (e, f, h) = (self.cfg.embed_dim, self.cfg.time_dim, self.cfg.hidden);
        let n = self.n;
        let k = self.vocab.num_clean();
        let b = xs.len();
        let l = &self.layout;

        let mut x = Array2::<f64>::zeros((b, self.input_dim()));
        for (r, xt) in xs.iter().enumerate() {
            let mut row = x.row_mut(r);
            let row = row.as_slice_mut().expect("contiguous");
            for (i, &tok) in xt.tokens().iter().enumerate() {
                let src = &self.params[l.emb + tok as usize * e..l.emb + (tok as usize + 1) * e];
                row[i * e..(i + 1) * e].copy_from_slice(src);
            }
            time_features(xt.t, f, &mut row[n * e..]);
        }

        let w1 = self.view(l.w1, self.input_dim(), h);
        let b1 = &self.params[l.b1..l.b1 + h];
        let mut z1 = x.dot(&w1);
        z1.rows_mut().into_iter().for_each(|mut r| {
            r.iter_mut().zip(b1).for_each(|(z, &bb)| *z += bb);
        });
        let a1 = z1.mapv(gelu);

        let w2 = self.view(l.w2, h, h);
        let b2 = &self.params[l.b2..l.b2 + h];
        let mut z2 = a1.dot(&w2);
        z2.rows_mut().into_iter().for_each(|mut r| {
            r.iter_mut().zip(b2).for_each(|(z, &bb)| *z += bb);
        });
        let a2 = z2.mapv(gelu);

        // logits[r][i·k + v] for every position's head
        let mut logits = Array2::<f64>::zeros((b, n * k));
        for i in 0..n {
            let wo = self.view(l.wo + i * h * k, h, k);
            let bo = &self.params[l.bo + i * k..l.bo + (i + 1) * k];
            let li = a2.dot(&wo);
            for r in 0..b {
                let dst = &mut logits.row_mut(r).into_slice().expect("contiguous")[i * k..(i + 1) * k];
                dst.iter_mut().zip(li.row(r)).zip(bo).for_each(|((d, &z), &bb)| *d = z + bb);
            }
        }

        let outputs = xs
            .iter()
            .enumerate()
            .map(|(r, xt)| {
                let row = logits.row(r);
                DenoiserOutput::from_logits(row.as_slice().expect("contiguous"), xt.tokens(), self.vocab)
            })
            .collect();
        let tape = MlpTape {
            tokens: xs.iter().map(|x| x.tokens().to_vec()).collect(),
            x,
            z1,
            a1,
            z2,
            a2,
        };
        (outputs, tape)
    }

    pub(crate) fn backward(&self, tape: &MlpTape, grads: &[LogitGrad]) -> Vec<f64> {
        let (e, h) = (self.cfg.embed_dim, self.cfg.hidden);
        let n = self.n;
        let k = self.vocab.num_clean();
        let b = grads.len();
        let l = &self.layout;
        let mut out = vec![0.0; l.total];
        debug_assert_eq!(tape.tokens.len(), b);

        // per-position output heads
        let mut da2 = Array2::<f64>::zeros((b, h));
        let mut dli = Array2::<f64>::zeros((b, k));
        for i in 0..n {
            for (r, g) in grads.iter().enumerate() {
                dli.row_mut(r)
                    .as_slice_mut()
                    .expect("contiguous")
                    .copy_from_slice(&g.as_slice()[i * k..(i + 1) * k]);
            }
            let dwo = tape.a2.t().dot(&dli);
            out[l.wo + i * h * k..l.wo + (i + 1) * h * k].copy_from_slice(dwo.as_slice().expect("standard layout"));
            let dbo = dli.sum_axis(Axis(0));
            out[l.bo + i * k..l.bo + (i + 1) * k].copy_from_slice(dbo.as_slice().expect("contiguous"));
            let wo = self.view(l.wo + i * h * k, h, k);
            da2 += &dli.dot(&wo.t());
        }

        // layer 2
        let dz2 = &da2 * &tape.z2.mapv(gelu_grad);
        let dw2 = tape.a1.t().dot(&dz2);
        out[l.w2..l.b2].copy_from_slice(dw2.as_slice().expect("standard layout"));
        let db2 = dz2.sum_axis(Axis(0));
        out[l.b2..l.b2 + h].copy_from_slice(db2.as_slice().expect("contiguous"));
        let w2 = self.view(l.w2, h, h);
        let da1 = dz2.dot(&w2.t());

        // layer 1
        let dz1 = &da1 * &tape.z1.mapv(gelu_grad);
        let dw1 = tape.x.t().dot(&dz1);
        out[l.w1..l.b1].copy_from_slice(dw1.as_slice().expect("standard layout"));
        let db1 = dz1.sum_axis(Axis(0));
        out[l.b1..l.b1 + h].copy_from_slice(db1.as_slice().expect("contiguous"));
        let w1 = self.view(l.w1, self.input_dim(), h);
        let dx = dz1.dot(&w1.t());

        // embeddings
        for (r, toks) in tape.tokens.iter().enumerate() {
            let dxr = dx.slice(s![r, ..]);
            for (i, &tok) in toks.iter().enumerate() {
                let dst = &mut out[l.emb + tok as usize * e..l.emb + (tok as usize + 1) * e];
                for j in 0..e {
                    dst[j] += dxr[i * e + j];
                }
            }
        }
        out
    }
}
