//! The masking forward process: sampling, exact kernel log-probabilities and
//! endpoint-conditioned bridges.

use rand::Rng;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::sequence::{check_time, MaskedSample, Sequence, Vocabulary, NEG_INF};

/// Per-token kernel: keep `tok` with probability `alpha`, else mask it.
/// A mask token is absorbing and stays masked.
pub fn corrupt_token<R: Rng + ?Sized>(tok: u32, alpha: f64, vocab: Vocabulary, rng: &mut R) -> u32 {
    if vocab.is_mask(tok) {
        return tok;
    }
    if rng.gen::<f64>() < alpha {
        tok
    } else {
        vocab.mask_id()
    }
}

/// Draws `x_t ~ p_t(x_t | x_0)`.
pub fn mask_forward<R: Rng + ?Sized>(
    x0: &Sequence,
    t: f64,
    schedule: &NoiseSchedule,
    vocab: Vocabulary,
    rng: &mut R,
) -> Result<MaskedSample> {
    x0.ensure_clean(vocab)?;
    let alpha = schedule.alpha(t)?;
    let tokens = x0
        .tokens()
        .iter()
        .map(|&tok| corrupt_token(tok, alpha, vocab, rng))
        .collect();
    Ok(MaskedSample {
        seq: Sequence::from_raw(tokens),
        t,
    })
}

/// `log p_t(x_t | x_0)`; returns [`NEG_INF`] for unreachable `x_t`.
pub fn forward_logprob(
    xt: &MaskedSample,
    x0: &Sequence,
    schedule: &NoiseSchedule,
    vocab: Vocabulary,
) -> Result<f64> {
    if xt.len() != x0.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: x_t has {}, x_0 has {}",
            xt.len(),
            x0.len()
        )));
    }
    x0.ensure_clean(vocab)?;
    let alpha = schedule.alpha(xt.t)?;
    let mut total = 0.0;
    for (&a, &b) in xt.tokens().iter().zip(x0.tokens()) {
        let p = if vocab.is_mask(a) {
            1.0 - alpha
        } else if a == b {
            alpha
        } else {
            0.0
        };
        if p <= 0.0 {
            return Ok(NEG_INF);
        }
        total += p.ln();
    }
    Ok(total)
}

/// Checks that every unmasked token of `xt` agrees with `x0`.
pub fn consistent(x0: &Sequence, xt: &Sequence, vocab: Vocabulary) -> bool {
    x0.len() == xt.len()
        && xt
            .tokens()
            .iter()
            .zip(x0.tokens())
            .all(|(&a, &b)| vocab.is_mask(a) || a == b)
}

/// Checks one reverse move: every token visible in `earlier_noisy` survives
/// unchanged in `later_clean` (tokens are never re-masked or rewritten).
pub fn consistent_masked(earlier_noisy: &Sequence, later_clean: &Sequence, vocab: Vocabulary) -> bool {
    earlier_noisy.len() == later_clean.len()
        && earlier_noisy
            .tokens()
            .iter()
            .zip(later_clean.tokens())
            .all(|(&a, &b)| vocab.is_mask(a) || a == b)
}

/// Draws `x_s` from the forward process at time `s ≤ t` conditioned on both
/// endpoints `x_0` and `x_t`.
///
/// Positions visible in `x_t` are visible at every earlier time. A position
/// masked at `t` is still masked at `s` with probability
/// `(1 - α_s) / (1 - α_t)`.
pub fn bridge_sample<R: Rng + ?Sized>(
    x0: &Sequence,
    xt: &MaskedSample,
    s: f64,
    schedule: &NoiseSchedule,
    vocab: Vocabulary,
    rng: &mut R,
) -> Result<MaskedSample> {
    check_time(s)?;
    if s > xt.t {
        return Err(Error::Domain(format!(
            "bridge time s = {s} exceeds endpoint time t = {}",
            xt.t
        )));
    }
    x0.ensure_clean(vocab)?;
    if !consistent(x0, &xt.seq, vocab) {
        return Err(Error::InvalidInput(format!(
            "x_t = {} is inconsistent with x_0 = {}",
            xt.seq, x0
        )));
    }
    if s == xt.t {
        return Ok(xt.clone());
    }
    let a_s = schedule.alpha(s)?;
    let a_t = schedule.alpha(xt.t)?;
    let stay = if a_t >= 1.0 { 0.0 } else { (1.0 - a_s) / (1.0 - a_t) };
    let tokens = xt
        .tokens()
        .iter()
        .zip(x0.tokens())
        .map(|(&cur, &clean)| {
            if vocab.is_mask(cur) && rng.gen::<f64>() >= stay {
                clean
            } else {
                cur
            }
        })
        .collect();
    Ok(MaskedSample {
        seq: Sequence::from_raw(tokens),
        t: s,
    })
}
