//! Brute-force reference computations on enumerable instances.
//!
//! Everything here is exact up to floating-point summation and is meant to
//! be independent of the estimators it checks: the endpoint law is a dynamic
//! program over mask patterns rather than a sampler, and posteriors are
//! explicit sums over endpoints.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use crate::denoiser::{endpoint_logprob, unmask_probability, DenoiserModel};
use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::objectives::RewardModel;
use crate::schedule::NoiseSchedule;
use crate::sequence::{is_neg_inf, MaskedSample, Sequence, TimeGrid, Vocabulary, NEG_INF};

/// Upper bound on the number of enumerated objects in any oracle.
pub const ENUMERATION_BUDGET: usize = 1_000_000;

/// A finite distribution over clean sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct DistTable {
    support: Vec<Sequence>,
    probs: Vec<f64>,
}

impl DistTable {
    pub fn new(support: Vec<Sequence>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() || support.is_empty() {
            return Err(Error::InvalidInput(format!(
                "distribution needs matching nonempty support and probabilities ({} vs {})",
                support.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidInput("probabilities must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("probabilities sum to {total}, not 1")));
        }
        let mut seen = std::collections::HashSet::with_capacity(support.len());
        if let Some(dup) = support.iter().find(|s| !seen.insert(*s)) {
            return Err(Error::InvalidInput(format!("duplicate support element {dup}")));
        }
        Ok(Self { support, probs })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(support: Vec<Sequence>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Degenerate(format!("weights sum to {total}")));
        }
        Self::new(support, weights.into_iter().map(|w| w / total).collect())
    }

    /// Normalizes log weights stably; [`NEG_INF`] entries get zero mass.
    pub fn from_log_weights(support: Vec<Sequence>, log_w: &[f64]) -> Result<Self> {
        let z = log_sum_exp(log_w);
        if is_neg_inf(z) {
            return Err(Error::Degenerate("every log weight is -inf".into()));
        }
        let probs = log_w
            .iter()
            .map(|&l| if is_neg_inf(l) { 0.0 } else { (l - z).exp() })
            .collect::<Vec<_>>();
        let total: f64 = probs.iter().sum();
        Self::new(support, probs.into_iter().map(|p| p / total).collect())
    }

    pub fn support(&self) -> &[Sequence] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Sequence, f64)> {
        self.support.iter().zip(self.probs.iter().copied())
    }

    /// Probability of `x` (zero off the support).
    pub fn prob(&self, x: &Sequence) -> f64 {
        self.support
            .iter()
            .position(|s| s == x)
            .map_or(0.0, |i| self.probs[i])
    }

    fn as_map(&self) -> HashMap<&Sequence, f64> {
        self.iter().collect()
    }

    /// `E[f(x)]`.
    pub fn expect<F: FnMut(&Sequence) -> f64>(&self, mut f: F) -> f64 {
        self.iter().map(|(s, p)| if p > 0.0 { p * f(s) } else { 0.0 }).sum()
    }

    /// Pushes the distribution through `binning`.
    pub fn coarsen(&self, binning: Binning) -> DistTable {
        let mut acc: BTreeMap<Sequence, f64> = BTreeMap::new();
        for (s, p) in self.iter() {
            *acc.entry(binning.apply(s)).or_insert(0.0) += p;
        }
        let (support, probs): (Vec<_>, Vec<_>) = acc.into_iter().unzip();
        let total: f64 = probs.iter().sum();
        DistTable {
            support,
            probs: probs.into_iter().map(|p| p / total).collect(),
        }
    }

    /// Two-column CSV: hyphen-joined ids, probability.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sequence,probability")?;
        for (s, p) in self.iter() {
            writeln!(w, "{s},{p:e}")?;
        }
        Ok(())
    }
}

/// Coarse-graining applied to samples before histogramming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Binning {
    #[default]
    Identity,
    /// Maps every token `v` to `v / size` (e.g. 8 gives 8×8 cells on the
    /// grid task).
    Blocks(u32),
}

impl Binning {
    pub fn apply(&self, s: &Sequence) -> Sequence {
        match *self {
            Binning::Identity => s.clone(),
            Binning::Blocks(b) => Sequence::from_raw(s.tokens().iter().map(|&v| v / b).collect()),
        }
    }
}

/// Every clean sequence of length `n`, in lexicographic order.
pub fn enumerate_sequences(vocab: Vocabulary, n: usize) -> Result<Vec<Sequence>> {
    let k = vocab.num_clean();
    let count = k
        .checked_pow(n as u32)
        .filter(|&c| c <= ENUMERATION_BUDGET)
        .ok_or_else(|| Error::Size(format!("{k}^{n} sequences exceed the enumeration budget")))?;
    let mut out = Vec::with_capacity(count);
    let mut digits = vec![0u32; n];
    for _ in 0..count {
        out.push(Sequence::from_raw(digits.clone()));
        for d in digits.iter_mut().rev() {
            *d += 1;
            if (*d as usize) < k {
                break;
            }
            *d = 0;
        }
    }
    Ok(out)
}

fn masked_copy(x0: &Sequence, pattern: usize, mask: u32) -> Sequence {
    Sequence::from_raw(
        x0.tokens()
            .iter()
            .enumerate()
            .map(|(j, &v)| if pattern >> j & 1 == 1 { mask } else { v })
            .collect(),
    )
}

/// Exact `log p_θ(x_0)` of the finite-step ancestral sampler on `grid`,
/// including its final forcing rule.
///
/// The state space given `x_0` is the set of mask patterns; each step moves
/// mass from a pattern to its subsets with reveal probability
/// `(α_s - α_t)/(1 - α_t)` per masked position and weight `μ[j][x_0^j]` per
/// revealed position.
pub fn exact_mdm_likelihood(
    model: &DenoiserModel,
    x0: &Sequence,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let vocab = model.vocab();
    let n = model.seq_len();
    x0.ensure_clean(vocab)?;
    if x0.len() != n {
        return Err(Error::InvalidInput(format!("model expects length {n}, got {}", x0.len())));
    }
    if n >= usize::BITS as usize - 1 || (1usize << n).saturating_mul(grid.steps()) > ENUMERATION_BUDGET {
        return Err(Error::Size(format!(
            "2^{n} patterns over {} steps exceed the enumeration budget",
            grid.steps()
        )));
    }
    let full = (1usize << n) - 1;
    let mask = vocab.mask_id();
    let mut mass = vec![0.0; full + 1];
    mass[full] = 1.0;
    for i in (1..=grid.steps()).rev() {
        let (t, s) = (grid.time(i), grid.time(i - 1));
        let p = unmask_probability(schedule, t, s)?;
        let live: Vec<usize> = (1..=full).filter(|&pat| mass[pat] > 0.0).collect();
        let inputs: Vec<MaskedSample> = live
            .iter()
            .map(|&pat| MaskedSample {
                seq: masked_copy(x0, pat, mask),
                t,
            })
            .collect();
        let mus = model.predict_batch(&inputs)?;
        let mut next = vec![0.0; full + 1];
        next[0] = mass[0];
        for (&pat, mu) in live.iter().zip(&mus) {
            let w = mass[pat];
            // iterate over revealed subsets `rev` of `pat`
            let mut rev = pat;
            loop {
                let mut pr = w;
                for j in 0..n {
                    if pat >> j & 1 == 1 {
                        pr *= if rev >> j & 1 == 1 {
                            p * mu.prob(j, x0.tokens()[j])
                        } else {
                            1.0 - p
                        };
                    }
                }
                next[pat & !rev] += pr;
                if rev == 0 {
                    break;
                }
                rev = (rev - 1) & pat;
            }
        }
        mass = next;
    }
    // final forcing, evaluated at t(1) as in the sampler
    let leftover: Vec<usize> = (1..=full).filter(|&pat| mass[pat] > 0.0).collect();
    if !leftover.is_empty() {
        let inputs: Vec<MaskedSample> = leftover
            .iter()
            .map(|&pat| MaskedSample {
                seq: masked_copy(x0, pat, mask),
                t: grid.time(1),
            })
            .collect();
        let mus = model.predict_batch(&inputs)?;
        for (&pat, mu) in leftover.iter().zip(&mus) {
            let pr: f64 = (0..n)
                .filter(|j| pat >> j & 1 == 1)
                .map(|j| mu.prob(j, x0.tokens()[j]))
                .product();
            mass[0] += mass[pat] * pr;
        }
    }
    Ok(if mass[0] > 0.0 { mass[0].ln() } else { NEG_INF })
}

/// The sampler's exact endpoint law over all clean sequences.
pub fn exact_endpoint_law(model: &DenoiserModel, grid: &TimeGrid, schedule: &NoiseSchedule) -> Result<DistTable> {
    let support = enumerate_sequences(model.vocab(), model.seq_len())?;
    let weights = support
        .iter()
        .map(|x| exact_mdm_likelihood(model, x, grid, schedule).map(|l| if is_neg_inf(l) { 0.0 } else { l.exp() }))
        .collect::<Result<Vec<_>>>()?;
    DistTable::from_weights(support, weights)
}

/// `π_0 ∝ p_0^pre · R`.
pub fn exact_target(pre_table: &DistTable, reward: &RewardModel) -> Result<DistTable> {
    let log_w = pre_table
        .iter()
        .map(|(s, p)| Ok(if p > 0.0 { p.ln() + reward.log_reward(s)? } else { NEG_INF }))
        .collect::<Result<Vec<_>>>()?;
    DistTable::from_log_weights(pre_table.support().to_vec(), &log_w)
        .map_err(|_| Error::Degenerate("p_pre · R vanishes everywhere".into()))
}

/// `log Z = log Σ p · R` of a table.
pub fn exact_log_partition(table: &DistTable, reward: &RewardModel) -> Result<f64> {
    let log_w = table
        .iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(s, p)| Ok(p.ln() + reward.log_reward(s)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&log_w))
}

/// Every clean completion of `xt`, lexicographic in the masked positions.
pub fn completions(xt: &MaskedSample, vocab: Vocabulary) -> Result<Vec<Sequence>> {
    let masked: Vec<usize> = (0..xt.len()).filter(|&j| vocab.is_mask(xt.tokens()[j])).collect();
    let sub = enumerate_sequences(vocab, masked.len())?;
    Ok(sub
        .into_iter()
        .map(|fill| {
            let mut toks = xt.tokens().to_vec();
            for (&j, &v) in masked.iter().zip(fill.tokens()) {
                toks[j] = v;
            }
            Sequence::from_raw(toks)
        })
        .collect())
}

/// The reward-tilted denoising posterior `π_t(x_0 | x_t)` and its log
/// normalizer `log Σ p^pre_t(x_0|x_t) R(x_0)`.
pub fn exact_denoising_posterior(
    pre: &DenoiserModel,
    xt: &MaskedSample,
    reward: &RewardModel,
) -> Result<(DistTable, f64)> {
    let mu = pre.predict_mean(xt)?;
    let support = completions(xt, pre.vocab())?;
    let log_w = support
        .iter()
        .map(|x0| {
            let lp = endpoint_logprob(&mu, xt, x0)?;
            Ok(if is_neg_inf(lp) { NEG_INF } else { lp + reward.log_reward(x0)? })
        })
        .collect::<Result<Vec<_>>>()?;
    let log_z = log_sum_exp(&log_w);
    let table = DistTable::from_log_weights(support, &log_w)?;
    Ok((table, log_z))
}

fn union_pairs(p: &DistTable, q: &DistTable) -> Vec<(f64, f64)> {
    let qm = q.as_map();
    let pm = p.as_map();
    let mut out: Vec<(f64, f64)> = p.iter().map(|(s, a)| (a, qm.get(s).copied().unwrap_or(0.0))).collect();
    out.extend(q.iter().filter(|(s, _)| !pm.contains_key(s)).map(|(_, b)| (0.0, b)));
    out
}

/// `½ Σ |p - q|` over the union of supports.
pub fn tv_distance(p: &DistTable, q: &DistTable) -> f64 {
    (0.5 * union_pairs(p, q).iter().map(|(a, b)| (a - b).abs()).sum::<f64>()).clamp(0.0, 1.0)
}

/// `Σ p log(p/q)`.
pub fn kl_divergence(p: &DistTable, q: &DistTable) -> Result<f64> {
    let mut total = 0.0;
    for (a, b) in union_pairs(p, q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::Support("q vanishes where p has mass".into()));
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total.max(0.0))
}

/// Normalized counts after `binning`, support sorted.
pub fn empirical_histogram(samples: &[Sequence], binning: Binning) -> Result<DistTable> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("histogram of zero samples".into()));
    }
    let mut counts: BTreeMap<Sequence, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(binning.apply(s)).or_insert(0) += 1;
    }
    let n = samples.len() as f64;
    let (support, probs): (Vec<_>, Vec<_>) = counts.into_iter().map(|(s, c)| (s, c as f64 / n)).unzip();
    DistTable::from_weights(support, probs)
}

/// `E[max_{j ≤ n} log R(X_j)]` for `n` independent draws from `table`,
/// from the order-statistic CDF `P(max ≤ v) = F(v)^n`.
pub fn expected_best_of_n(table: &DistTable, reward: &RewardModel, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("best-of-n needs n >= 1".into()));
    }
    let mut values = table
        .iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(s, p)| Ok((reward.log_reward(s)?, p)))
        .collect::<Result<Vec<_>>>()?;
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut below, mut total) = (0.0f64, 0.0);
    let mut i = 0;
    while i < values.len() {
        let v = values[i].0;
        let mut mass = 0.0;
        while i < values.len() && values[i].0 == v {
            mass += values[i].1;
            i += 1;
        }
        let upto = (below + mass).min(1.0);
        total += v * (upto.powi(n as i32) - below.powi(n as i32));
        below = upto;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{sample_batch, Architecture, TabularConfig};
    use crate::objectives::{ConstantReward, TableReward};
    use crate::rng::seeded;
    use approx::assert_relative_eq;

    fn v(d: usize) -> Vocabulary {
        Vocabulary::new(d).unwrap()
    }

    fn seqs(rows: &[&[u32]]) -> Vec<Sequence> {
        rows.iter().map(|r| Sequence::from_raw(r.to_vec())).collect()
    }

    fn random_tabular(d: usize, n: usize, seed: u64) -> DenoiserModel {
        use rand::Rng;
        let mut rng = seeded(seed);
        let mut m = DenoiserModel::new(&Architecture::Tabular(TabularConfig { buckets: 4 }), v(d), n, &mut rng).unwrap();
        m.params_mut().iter_mut().for_each(|p| *p = rng.gen_range(-1.5..1.5));
        m
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_sequences(v(2), 3).unwrap().len(), 1);
        assert_eq!(enumerate_sequences(v(3), 2).unwrap().len(), 4);
        let all = enumerate_sequences(v(5), 3).unwrap();
        assert_eq!(all.len(), 64);
        assert_eq!(all[0].tokens(), &[0, 0, 0]);
        assert_eq!(all[1].tokens(), &[0, 0, 1]);
        assert!(matches!(enumerate_sequences(v(129), 3), Err(Error::Size(_))));
    }

    #[test]
    fn single_jump_likelihood() {
        let m = random_tabular(4, 1, 3);
        let grid = TimeGrid::new(1).unwrap();
        let mu = m.predict_mean(&MaskedSample::all_masked(1, v(4))).unwrap();
        for tok in 0..3u32 {
            let x0 = Sequence::from_raw(vec![tok]);
            let l = exact_mdm_likelihood(&m, &x0, &grid, &NoiseSchedule::Linear).unwrap();
            assert_relative_eq!(l, mu.log_prob(0, tok), epsilon = 1e-12);
        }
    }

    #[test]
    fn likelihood_normalizes() {
        for (d, n) in [(3, 1), (4, 2), (5, 2), (3, 2)] {
            for steps in 1..=4 {
                for schedule in [NoiseSchedule::Linear, NoiseSchedule::default_log_linear()] {
                    let m = random_tabular(d, n, (d * 10 + n + steps) as u64);
                    let total: f64 = enumerate_sequences(v(d), n)
                        .unwrap()
                        .iter()
                        .map(|x| {
                            exact_mdm_likelihood(&m, x, &TimeGrid::new(steps).unwrap(), &schedule)
                                .unwrap()
                                .exp()
                        })
                        .sum();
                    assert!((total - 1.0).abs() < 1e-8, "d={d} n={n} T={steps}: {total}");
                }
            }
        }
    }

    #[test]
    fn likelihood_matches_sampler_frequency() {
        let m = random_tabular(4, 1, 17);
        let grid = TimeGrid::new(2).unwrap();
        let law = exact_endpoint_law(&m, &grid, &NoiseSchedule::Linear).unwrap();
        let n = 100_000;
        let samples = sample_batch(&m, n, &grid, &NoiseSchedule::Linear, &mut seeded(5)).unwrap();
        let hist = empirical_histogram(&samples, Binning::Identity).unwrap();
        for (s, p) in law.iter() {
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((hist.prob(s) - p).abs() < 3.5 * se, "{s}: {} vs {p}", hist.prob(s));
        }
        assert!(tv_distance(&hist, &law) < 0.02);
    }

    #[test]
    fn target_examples() {
        let support = seqs(&[&[0], &[1], &[2]]);
        let pre = DistTable::new(support.clone(), vec![0.5, 0.3, 0.2]).unwrap();
        let r = RewardModel::new(TableReward::from_rewards(1, 3, &[1.0, 2.0, 4.0]).unwrap());
        let pi = exact_target(&pre, &r).unwrap();
        for (p, e) in pi.probs().iter().zip([0.5 / 1.9, 0.6 / 1.9, 0.8 / 1.9]) {
            assert_relative_eq!(*p, e, epsilon = 1e-12);
        }
        assert!((pi.probs()[0] - 0.2632).abs() < 1e-4);
        assert_relative_eq!(exact_log_partition(&pre, &r).unwrap(), 1.9f64.ln(), epsilon = 1e-12);

        let flat = RewardModel::new(ConstantReward(0.0));
        assert_eq!(exact_target(&pre, &flat).unwrap().probs(), pre.probs());

        let one_hot = RewardModel::new(TableReward::new(1, 3, vec![-1e4, 0.0, -1e4]).unwrap());
        // the floor keeps R > 0, so mass elsewhere is e^-30 relative
        let pi = exact_target(&pre, &one_hot).unwrap();
        assert!(pi.probs()[1] > 1.0 - 1e-12);
    }

    #[test]
    fn denoising_posterior_examples() {
        // pretrained endpoint posterior [0.5, 0.3, 0.2] at the all-mask state
        let mut m = DenoiserModel::new(&Architecture::Tabular(TabularConfig::default()), v(4), 1, &mut seeded(0)).unwrap();
        let logits: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        m.as_tabular_mut().unwrap().set_masked_logits(0, &logits);
        let xt = MaskedSample::all_masked(1, v(4));
        let r = RewardModel::new(TableReward::from_rewards(1, 3, &[1.0, 2.0, 4.0]).unwrap());
        let (post, log_z) = exact_denoising_posterior(&m, &xt, &r).unwrap();
        assert_relative_eq!(log_z, 1.9f64.ln(), epsilon = 1e-12);
        assert!((log_z - 0.6419).abs() < 1e-4);
        let pre_table = DistTable::new(seqs(&[&[0], &[1], &[2]]), vec![0.5, 0.3, 0.2]).unwrap();
        let target = exact_target(&pre_table, &r).unwrap();
        for (a, b) in post.probs().iter().zip(target.probs()) {
            assert!((a - b).abs() < 1e-10);
        }

        let (post, log_z) = exact_denoising_posterior(&m, &xt, &RewardModel::new(ConstantReward(0.0))).unwrap();
        assert!(log_z.abs() < 1e-12);
        assert_relative_eq!(post.probs()[0], 0.5, epsilon = 1e-12);

        let visible = MaskedSample::new(Sequence::from_raw(vec![2]), 0.4).unwrap();
        let (post, log_z) = exact_denoising_posterior(&m, &visible, &r).unwrap();
        assert_eq!(post.len(), 1);
        assert_relative_eq!(log_z, 4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn divergence_examples() {
        let s = seqs(&[&[0], &[1]]);
        let p = DistTable::new(s.clone(), vec![0.5, 0.5]).unwrap();
        let q = DistTable::new(s.clone(), vec![0.75, 0.25]).unwrap();
        assert_eq!(tv_distance(&p, &p), 0.0);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        assert_relative_eq!(tv_distance(&p, &q), 0.25, epsilon = 1e-15);
        let kl = kl_divergence(&p, &q).unwrap();
        assert_relative_eq!(kl, 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln(), epsilon = 1e-15);
        assert!((kl - 0.14384).abs() < 1e-5);

        let a = DistTable::new(seqs(&[&[0]]), vec![1.0]).unwrap();
        let b = DistTable::new(seqs(&[&[1]]), vec![1.0]).unwrap();
        assert_eq!(tv_distance(&a, &b), 1.0);
        assert!(matches!(kl_divergence(&a, &b), Err(Error::Support(_))));
    }

    #[test]
    fn histogram_examples() {
        let one = empirical_histogram(&seqs(&[&[3, 1]]), Binning::Identity).unwrap();
        assert_eq!(one.probs(), &[1.0]);
        let two = empirical_histogram(&seqs(&[&[3, 1], &[0, 0]]), Binning::Identity).unwrap();
        assert_eq!(two.probs(), &[0.5, 0.5]);
        let blocks = empirical_histogram(&seqs(&[&[3, 1], &[7, 0], &[8, 0]]), Binning::Blocks(8)).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_relative_eq!(blocks.prob(&Sequence::from_raw(vec![0, 0])), 2.0 / 3.0, epsilon = 1e-15);
        assert!(empirical_histogram(&[], Binning::Identity).is_err());
    }

    #[test]
    fn histogram_of_known_law() {
        use crate::rng::categorical;
        let p = [0.1, 0.2, 0.3, 0.4];
        let mut rng = seeded(8);
        let n = 100_000;
        let samples: Vec<Sequence> = (0..n)
            .map(|_| Sequence::from_raw(vec![categorical(&p, &mut rng) as u32]))
            .collect();
        let h = empirical_histogram(&samples, Binning::Identity).unwrap();
        for (i, &pi) in p.iter().enumerate() {
            let se = (pi * (1.0 - pi) / n as f64).sqrt();
            assert!((h.prob(&Sequence::from_raw(vec![i as u32])) - pi).abs() < 3.0 * se);
        }
    }

    #[test]
    fn table_validation_and_csv() {
        let s = seqs(&[&[0], &[1]]);
        assert!(DistTable::new(s.clone(), vec![0.5, 0.6]).is_err());
        assert!(DistTable::new(seqs(&[&[0], &[0]]), vec![0.5, 0.5]).is_err());
        let p = DistTable::new(s, vec![0.25, 0.75]).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().starts_with("1,"));
    }

    #[test]
    fn best_of_n_order_statistic() {
        use crate::objectives::TableReward;
        let support: Vec<Sequence> = (0..3u32).map(|v| Sequence::from_raw(vec![v])).collect();
        let t = DistTable::new(support, vec![0.5, 0.3, 0.2]).unwrap();
        let r = RewardModel::new(TableReward::new(1, 3, vec![0.0, 1.0, 2.0]).unwrap());
        assert!((expected_best_of_n(&t, &r, 1).unwrap() - 0.7).abs() < 1e-12);
        // P(max = 0) = 0.25, P(max <= 1) = 0.64
        assert!((expected_best_of_n(&t, &r, 2).unwrap() - (0.64 - 0.25 + 2.0 * 0.36)).abs() < 1e-12);
    }
}
