//! Mean-parametrized denoisers `μ_θ(x_t, t)`.
//!
//! Both model variants produce per-position logits over the `d - 1` clean
//! tokens; the mask token never receives mass. Positions that are visible in
//! the input are overwritten with the one-hot of the observed token after the
//! softmax, so no gradient ever flows through them.
//!
//! Gradients are computed by hand-written reverse passes. Every loss in the
//! crate first reduces its upstream gradient to a [`LogitGrad`] per input and
//! then calls [`DenoiserModel::backward`].

mod gradcheck;
mod mlp;
mod optim;
mod reverse;
mod tabular;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{grad_check, grad_check_model, relative_error};
pub use mlp::{MlpConfig, MlpDenoiser};
pub use optim::{Adam, AdamConfig, EmaState};
pub use reverse::{
    ancestral_sample, ancestral_sample_with, endpoint_logprob, endpoint_logprob_grad,
    reverse_step, reverse_transition_dist, sample_batch, sample_endpoint, transition_logprob,
    unmask_probability, SamplerStats,
};
pub use tabular::{TabularConfig, TabularDenoiser};
pub(crate) use reverse::transition_logprob_grad;

use crate::error::{Error, Result};
use crate::sequence::{MaskedSample, Vocabulary, NEG_INF};

/// Per-position categorical rows over the clean tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    n: usize,
    k: usize,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl DenoiserOutput {
    /// Builds rows from logits (`n * k`, row-major), applying copy-through for
    /// every visible position of `input`.
    pub(crate) fn from_logits(logits: &[f64], input: &[u32], vocab: Vocabulary) -> Self {
        let k = vocab.num_clean();
        let n = input.len();
        debug_assert_eq!(logits.len(), n * k);
        let mut probs = vec![0.0; n * k];
        let mut log_probs = vec![NEG_INF; n * k];
        for (i, &tok) in input.iter().enumerate() {
            let p = &mut probs[i * k..(i + 1) * k];
            let lp = &mut log_probs[i * k..(i + 1) * k];
            if vocab.is_mask(tok) {
                log_softmax_into(&logits[i * k..(i + 1) * k], lp);
                for (pv, &l) in p.iter_mut().zip(lp.iter()) {
                    *pv = l.exp();
                }
            } else {
                p[tok as usize] = 1.0;
                lp[tok as usize] = 0.0;
            }
        }
        Self {
            n,
            k,
            probs,
            log_probs,
        }
    }

    /// Rows given directly as probabilities (used by oracles and tests).
    pub fn from_probs(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map(|r| r.len()).unwrap_or(0);
        if n == 0 || k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidInput("rows must be non-empty and rectangular".into()));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut log_probs = Vec::with_capacity(n * k);
        for r in &rows {
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-9 || r.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidInput(format!("row {r:?} is not a distribution")));
            }
            for &p in r {
                probs.push(p);
                log_probs.push(if p > 0.0 { p.ln() } else { NEG_INF });
            }
        }
        Ok(Self {
            n,
            k,
            probs,
            log_probs,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.n
    }

    pub fn num_clean(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.k..(i + 1) * self.k]
    }

    pub fn log_row(&self, i: usize) -> &[f64] {
        &self.log_probs[i * self.k..(i + 1) * self.k]
    }

    pub fn prob(&self, i: usize, v: u32) -> f64 {
        self.probs[i * self.k + v as usize]
    }

    pub fn log_prob(&self, i: usize, v: u32) -> f64 {
        self.log_probs[i * self.k + v as usize]
    }

    /// Most probable clean token per position (lowest id on ties).
    pub fn argmax(&self) -> Vec<u32> {
        (0..self.n)
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for v in 1..self.k {
                    if row[v] > row[best] {
                        best = v;
                    }
                }
                best as u32
            })
            .collect()
    }
}

pub(crate) fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

/// Gradient of a scalar with respect to one input's logits (`n * k`).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrad {
    k: usize,
    data: Vec<f64>,
}

impl LogitGrad {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self {
            k,
            data: vec![0.0; n * k],
        }
    }

    pub fn for_output(out: &DenoiserOutput) -> Self {
        Self::zeros(out.n, out.k)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Adds `w * ∂ log μ[i][v] / ∂ logits[i]`.
    pub fn add_log_prob(&mut self, out: &DenoiserOutput, i: usize, v: u32, w: f64) {
        let k = self.k;
        let row = out.row(i);
        let g = &mut self.data[i * k..(i + 1) * k];
        for (u, gu) in g.iter_mut().enumerate() {
            *gu -= w * row[u];
        }
        g[v as usize] += w;
    }

    /// Adds the pullback of an upstream gradient on the whole log-prob row.
    pub fn add_log_row(&mut self, out: &DenoiserOutput, i: usize, upstream: &[f64]) {
        let k = self.k;
        let row = out.row(i);
        let total: f64 = upstream.iter().sum();
        let g = &mut self.data[i * k..(i + 1) * k];
        for u in 0..k {
            g[u] += upstream[u] - row[u] * total;
        }
    }

    /// Adds the pullback of an upstream gradient on the probability row.
    pub fn add_prob_row(&mut self, out: &DenoiserOutput, i: usize, upstream: &[f64]) {
        let row = out.row(i);
        self.add_softmax_pullback(row, i, upstream, 1.0);
    }

    /// Adds `scale * J_softmax(p)^T upstream` to row `i` for an arbitrary
    /// softmax point `p` (the Reinmax estimator evaluates Jacobians away from
    /// the model's own probabilities).
    pub fn add_softmax_pullback(&mut self, p: &[f64], i: usize, upstream: &[f64], scale: f64) {
        let k = self.k;
        let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
        let g = &mut self.data[i * k..(i + 1) * k];
        for u in 0..k {
            g[u] += scale * p[u] * (upstream[u] - dot);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }
}

/// Architecture descriptor, persisted in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum Architecture {
    Mlp(MlpConfig),
    Tabular(TabularConfig),
}

/// A trainable denoiser.
#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserModel {
    Mlp(MlpDenoiser),
    Tabular(TabularDenoiser),
}

/// Intermediate activations kept by [`DenoiserModel::forward`] for the
/// reverse pass.
#[derive(Debug)]
pub struct Forward {
    pub outputs: Vec<DenoiserOutput>,
    tape: Tape,
}

#[derive(Debug)]
enum Tape {
    Mlp(mlp::MlpTape),
    Tabular(tabular::TabularTape),
}

impl DenoiserModel {
    pub fn new<R: Rng + ?Sized>(
        arch: &Architecture,
        vocab: Vocabulary,
        seq_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::InvalidInput("sequence length must be positive".into()));
        }
        Ok(match arch {
            Architecture::Mlp(cfg) => DenoiserModel::Mlp(MlpDenoiser::new(*cfg, vocab, seq_len, rng)?),
            Architecture::Tabular(cfg) => {
                DenoiserModel::Tabular(TabularDenoiser::new(*cfg, vocab, seq_len)?)
            }
        })
    }

    /// Rebuilds a model from a descriptor and a flat parameter vector.
    pub fn from_params(
        arch: &Architecture,
        vocab: Vocabulary,
        seq_len: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut m = Self::new(arch, vocab, seq_len, &mut crate::rng::seeded(0))?;
        if params.len() != m.num_params() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameters, got {}",
                m.num_params(),
                params.len()
            )));
        }
        m.params_mut().copy_from_slice(&params);
        Ok(m)
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            DenoiserModel::Mlp(m) => Architecture::Mlp(m.config()),
            DenoiserModel::Tabular(m) => Architecture::Tabular(m.config()),
        }
    }

    pub fn vocab(&self) -> Vocabulary {
        match self {
            DenoiserModel::Mlp(m) => m.vocab(),
            DenoiserModel::Tabular(m) => m.vocab(),
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            DenoiserModel::Mlp(m) => m.seq_len(),
            DenoiserModel::Tabular(m) => m.seq_len(),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            DenoiserModel::Mlp(m) => m.params(),
            DenoiserModel::Tabular(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            DenoiserModel::Mlp(m) => m.params_mut(),
            DenoiserModel::Tabular(m) => m.params_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    fn validate(&self, xs: &[MaskedSample]) -> Result<()> {
        let vocab = self.vocab();
        for x in xs {
            if x.len() != self.seq_len() {
                return Err(Error::InvalidInput(format!(
                    "model expects length {}, got {}",
                    self.seq_len(),
                    x.len()
                )));
            }
            x.seq.check_vocab(vocab)?;
            crate::sequence::check_time(x.t)?;
        }
        Ok(())
    }

    /// Evaluates a batch and keeps the activations needed by
    /// [`backward`](Self::backward).
    pub fn forward(&self, xs: &[MaskedSample]) -> Result<Forward> {
        self.validate(xs)?;
        Ok(match self {
            DenoiserModel::Mlp(m) => {
                let (outputs, tape) = m.forward(xs);
                Forward {
                    outputs,
                    tape: Tape::Mlp(tape),
                }
            }
            DenoiserModel::Tabular(m) => {
                let (outputs, tape) = m.forward(xs);
                Forward {
                    outputs,
                    tape: Tape::Tabular(tape),
                }
            }
        })
    }

    pub fn predict_batch(&self, xs: &[MaskedSample]) -> Result<Vec<DenoiserOutput>> {
        Ok(self.forward(xs)?.outputs)
    }

    /// `μ_θ(x_t, t)`.
    pub fn predict_mean(&self, xt: &MaskedSample) -> Result<DenoiserOutput> {
        let mut out = self.predict_batch(std::slice::from_ref(xt))?;
        Ok(out.pop().expect("one output per input"))
    }

    /// Parameter gradient for upstream logit gradients, one per forward input.
    pub fn backward(&self, fwd: &Forward, grads: &[LogitGrad]) -> Vec<f64> {
        assert_eq!(grads.len(), fwd.outputs.len(), "one logit gradient per input");
        match (self, &fwd.tape) {
            (DenoiserModel::Mlp(m), Tape::Mlp(t)) => m.backward(t, grads),
            (DenoiserModel::Tabular(m), Tape::Tabular(t)) => m.backward(t, grads),
            _ => panic!("forward tape does not belong to this model variant"),
        }
    }

    pub fn as_tabular_mut(&mut self) -> Option<&mut TabularDenoiser> {
        match self {
            DenoiserModel::Tabular(m) => Some(m),
            _ => None,
        }
    }
}
