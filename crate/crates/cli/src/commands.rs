//! The five subcommands. Each reads a validated [`RunConfig`], writes its
//! artifacts under `out_dir` and returns the summary it also saves as JSON.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::Rng;
use serde::Serialize;

use mdm_steer::baselines::{best_of_n, guided_particle_sample};
use mdm_steer::checks::{run_suite, SuiteReport};
use mdm_steer::denoiser::{sample_batch, DenoiserModel};
use mdm_steer::math::mean_se;
use mdm_steer::objectives::{elbo_nll_estimate, RewardModel};
use mdm_steer::oracle::{
    empirical_histogram, exact_endpoint_law, exact_target, tv_distance, Binning,
};
use mdm_steer::rng::substream;
use mdm_steer::sequence::{Sequence, TimeGrid};
use mdm_steer::tasks::{load_dataset, save_dataset, TokenDataset};
use mdm_steer::train::{pretrain as run_pretrain, Finetuner, Method};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, SampleMode, TaskConfig};
use crate::heatmap::{histogram_2d, write_heatmap};
use crate::metrics::{MetricsWriter, FINETUNE_HEADER, PRETRAIN_HEADER};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating output directory {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// The checkpoint a command reads: the explicit path, else the fine-tuned
/// model in `out_dir` when present, else the pretrained one.
pub fn resolve_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let ft = cfg.out_dir.join(FINETUNE_CHECKPOINT);
    if ft.exists() {
        ft
    } else {
        cfg.out_dir.join(PRETRAIN_CHECKPOINT)
    }
}

fn check_compatible(model: &DenoiserModel, task: &TaskConfig) -> Result<()> {
    ensure!(
        model.vocab() == task.vocab() && model.seq_len() == task.seq_len(),
        "checkpoint model (vocabulary {}, length {}) does not match the task (vocabulary {}, length {})",
        model.vocab().size(),
        model.seq_len(),
        task.vocab().size(),
        task.seq_len()
    );
    Ok(())
}

fn training_data(cfg: &RunConfig) -> Result<Vec<Sequence>> {
    match &cfg.data.path {
        Some(p) => {
            let ds = load_dataset(p, cfg.task.vocab())?;
            ensure!(!ds.is_empty(), "dataset {} is empty", p.display());
            if let Some(n) = ds.seq_len() {
                ensure!(n == cfg.task.seq_len(), "dataset {} has length {n}, task expects {}", p.display(), cfg.task.seq_len());
            }
            Ok(ds.into_sequences())
        }
        None => cfg.task.prior_samples(cfg.data.size, &cfg.schedule, &mut substream(cfg.seed, "data")),
    }
}

fn mean_log_reward(reward: &RewardModel, xs: &[Sequence]) -> Result<(f64, f64)> {
    let vals = xs.iter().map(|x| reward.log_reward(x)).collect::<mdm_steer::Result<Vec<_>>>()?;
    Ok(mean_se(&vals))
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainSummary {
    pub seed: u64,
    pub steps: usize,
    pub data_size: usize,
    pub final_loss: Option<f64>,
    /// True when a tiny task's fixed model was written without training.
    pub reference_model: bool,
}

/// Fits the denoiser to task samples (or `data.path`) with the ELBO. Tiny
/// tasks without a dataset file export their fixed pretrained model.
pub fn pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    let dir = out_dir(cfg)?;
    let mut metrics = MetricsWriter::create(&dir.join("pretrain_metrics.csv"), PRETRAIN_HEADER, cfg.wall_time)?;
    let (ckpt, summary) = match (cfg.task.reference_model(), &cfg.data.path) {
        (Some(model), None) => (
            Checkpoint::new(model, cfg.schedule),
            PretrainSummary {
                seed: cfg.seed,
                steps: 0,
                data_size: 0,
                final_loss: None,
                reference_model: true,
            },
        ),
        _ => {
            let data = training_data(cfg)?;
            let mut model = DenoiserModel::new(&cfg.model, cfg.task.vocab(), cfg.task.seq_len(), &mut substream(cfg.seed, "init"))?;
            let mut rng = substream(cfg.seed, "train");
            let mut row_err = None;
            let report = run_pretrain(&mut model, &data, &cfg.schedule, &cfg.pretrain, &mut rng, |step, loss| {
                if row_err.is_none() {
                    row_err = metrics.pretrain_row(step, loss).err();
                }
                if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
                    eprintln!("pretrain step {} loss {loss:.4}", step + 1);
                }
            })?;
            if let Some(e) = row_err {
                return Err(e);
            }
            let mut ckpt = Checkpoint::new(model, cfg.schedule);
            ckpt.optimizer = Some(report.optimizer);
            ckpt.ema = report.ema;
            (
                ckpt,
                PretrainSummary {
                    seed: cfg.seed,
                    steps: cfg.pretrain.steps,
                    data_size: data.len(),
                    final_loss: report.final_loss.is_finite().then_some(report.final_loss),
                    reference_model: false,
                },
            )
        }
    };
    metrics.finish()?;
    ckpt.save(&dir.join(PRETRAIN_CHECKPOINT))?;
    write_json(&dir.join("pretrain_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneSummary {
    pub seed: u64,
    pub method: Method,
    pub steps: usize,
    pub final_loss: f64,
    /// Scalar log-partition, for RTB.
    pub log_z: Option<f64>,
    /// Mean log-reward of fresh samples of the fine-tuned model.
    pub mean_log_r: f64,
    pub pretrained_calls: u64,
    pub finetuned_calls: u64,
    pub reward_calls: u64,
}

/// Fine-tunes the pretrained checkpoint towards the reward posterior.
pub fn finetune(cfg: &RunConfig, pretrained: Option<&Path>) -> Result<FinetuneSummary> {
    let dir = out_dir(cfg)?;
    let pre_path = pretrained.map(Path::to_path_buf).unwrap_or_else(|| dir.join(PRETRAIN_CHECKPOINT));
    let pre = Checkpoint::load(&pre_path)?;
    check_compatible(&pre.model, &cfg.task)?;
    let data = if cfg.finetune.data_every > 0 { training_data(cfg)? } else { Vec::new() };
    let reward = cfg.reward()?;
    let mut rng = substream(cfg.seed, "finetune");
    let mut ft = Finetuner::new(cfg.finetune.clone(), pre.model, reward.clone(), data, pre.schedule, &mut rng)?;
    let mut metrics = MetricsWriter::create(&dir.join("finetune_metrics.csv"), FINETUNE_HEADER, cfg.wall_time)?;
    let (mut last, mut pc, mut fc, mut rc) = (f64::NAN, 0, 0, 0);
    for _ in 0..cfg.finetune.steps {
        let m = ft.step(&mut rng)?;
        metrics.finetune_row(&m)?;
        last = m.loss;
        pc += m.calls.pretrained;
        fc += m.calls.finetuned;
        rc += m.calls.reward;
        if cfg.log_every > 0 && (m.step + 1) % cfg.log_every == 0 {
            eprintln!("finetune step {} loss {:.4} log_z {:.3}", m.step + 1, m.loss, m.mean_log_z);
        }
    }
    metrics.finish()?;
    let method = cfg.finetune.method;
    let mut ckpt = Checkpoint::new(ft.model().clone(), pre.schedule);
    ckpt.optimizer = Some(ft.optimizer().clone());
    if matches!(method, Method::DdppLb | Method::DdppSubtraj) {
        ckpt.head = Some(ft.head().clone());
    }
    if method == Method::Rtb {
        ckpt.log_z = Some(ft.log_z());
    }
    ckpt.save(&dir.join(FINETUNE_CHECKPOINT))?;
    let grid = TimeGrid::new(cfg.sample.steps)?;
    let fresh = sample_batch(ft.model(), 1000.min(cfg.sample.count), &grid, &pre.schedule, &mut substream(cfg.seed, "finetune-eval"))?;
    let summary = FinetuneSummary {
        seed: cfg.seed,
        method,
        steps: cfg.finetune.steps,
        final_loss: last,
        log_z: (method == Method::Rtb).then(|| ft.log_z()),
        mean_log_r: mean_log_reward(&reward, &fresh)?.0,
        pretrained_calls: pc,
        finetuned_calls: fc,
        reward_calls: rc,
    };
    write_json(&dir.join("finetune_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSummary {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub mode: SampleMode,
    pub count: usize,
    pub mean_log_r: f64,
    pub log_r_se: f64,
}

/// Draws `sample.count` sequences: plain ancestral sampling, best-of-n
/// selection, or value-guided particles.
pub fn sample(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    best_of: Option<usize>,
    particles: Option<usize>,
) -> Result<SampleSummary> {
    let mode = cfg.sample_mode(best_of, particles)?;
    let dir = out_dir(cfg)?;
    let path = resolve_checkpoint(cfg, checkpoint);
    let ckpt = Checkpoint::load(&path)?;
    check_compatible(&ckpt.model, &cfg.task)?;
    let reward = cfg.reward()?;
    let grid = TimeGrid::new(cfg.sample.steps)?;
    let mut rng = substream(cfg.seed, "sample");
    let (model, s) = (&ckpt.model, &ckpt.schedule);
    let samples = match mode {
        // one at a time, so best-of-1 reproduces plain sampling exactly
        SampleMode::Plain => (0..cfg.sample.count)
            .map(|_| sample_batch(model, 1, &grid, s, &mut rng).map(|mut v| v.remove(0)))
            .collect::<mdm_steer::Result<Vec<_>>>()?,
        SampleMode::BestOf(n) => (0..cfg.sample.count)
            .map(|_| best_of_n(model, &reward, n, &grid, s, &mut rng))
            .collect::<mdm_steer::Result<Vec<_>>>()?,
        SampleMode::Particles(k) => (0..cfg.sample.count)
            .map(|_| guided_particle_sample(model, &reward, k, &grid, s, cfg.sample.selection, &mut rng, None))
            .collect::<mdm_steer::Result<Vec<_>>>()?,
    };
    let (mean, se) = mean_log_reward(&reward, &samples)?;
    save_dataset(&TokenDataset::new(samples, model.vocab())?, dir.join("samples.txt"))?;
    let summary = SampleSummary {
        seed: cfg.seed,
        checkpoint: path,
        mode,
        count: cfg.sample.count,
        mean_log_r: mean,
        log_r_se: se,
    };
    write_json(&dir.join("sample_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct GridMetrics {
    /// Fraction of samples satisfying the reward half-plane.
    pub half_plane_fraction: f64,
    /// Fraction of samples inside the prior squares.
    pub in_squares_fraction: f64,
    /// Total variation between coarse histograms of the samples and of
    /// rejection-sampled target draws.
    pub coarse_tv: f64,
    pub heatmap: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub samples: usize,
    pub mean_log_r: f64,
    pub log_r_se: f64,
    /// Negative ELBO per sequence, in nats.
    pub elbo_nll: f64,
    pub elbo_se: f64,
    pub bits_per_dim: f64,
    pub grid: Option<GridMetrics>,
    /// Exact total variation to the reward posterior (enumerable tasks).
    pub exact_tv: Option<f64>,
}

/// Exact draws from `prior · R` by rejection against `exp(log R) ≤ 1`.
fn rejection_reference<R: Rng + ?Sized>(
    task: &mdm_steer::tasks::GridTask,
    reward: &RewardModel,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Sequence>> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = task.prior_sample(rng);
        if rng.gen::<f64>() < reward.log_reward(&x)?.exp() {
            out.push(x);
        }
    }
    Ok(out)
}

/// Reward, likelihood and (where available) distance-to-target metrics.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    let dir = out_dir(cfg)?;
    let path = resolve_checkpoint(cfg, checkpoint);
    let ckpt = Checkpoint::load(&path)?;
    check_compatible(&ckpt.model, &cfg.task)?;
    let (model, s) = (&ckpt.model, &ckpt.schedule);
    let reward = cfg.reward()?;
    let grid = TimeGrid::new(cfg.eval.steps)?;
    let samples = sample_batch(model, cfg.eval.samples, &grid, s, &mut substream(cfg.seed, "eval"))?;
    let (mean, se) = mean_log_reward(&reward, &samples)?;

    let held_out = cfg.task.likelihood_samples(cfg.eval.likelihood_samples, s, &mut substream(cfg.seed, "eval-data"))?;
    let (nll, nll_se) = elbo_nll_estimate(model, &held_out, s, cfg.eval.elbo_draws, &mut substream(cfg.seed, "eval-elbo"))?;
    let bpd = nll / (model.seq_len() as f64 * std::f64::consts::LN_2);

    let grid_metrics = match &cfg.task {
        TaskConfig::Grid(g) => {
            let reference = rejection_reference(g, &reward, cfg.eval.reference, &mut substream(cfg.seed, "reference"))?;
            let binning = Binning::Blocks(cfg.eval.bin);
            let coarse_tv = tv_distance(&empirical_histogram(&samples, binning)?, &empirical_histogram(&reference, binning)?);
            let n = samples.len() as f64;
            let half = samples.iter().filter(|x| x.tokens()[0] >= g.threshold).count() as f64 / n;
            let inside = samples.iter().filter(|x| g.in_square(x.tokens()[0], x.tokens()[1])).count() as f64 / n;
            let side = g.side as usize;
            let heatmap = dir.join("heatmap.pgm");
            write_heatmap(&histogram_2d(&samples, side, side)?, side, side, &heatmap)?;
            Some(GridMetrics {
                half_plane_fraction: half,
                in_squares_fraction: inside,
                coarse_tv,
                heatmap,
            })
        }
        _ => None,
    };
    let exact_tv = match cfg.task.reference_model() {
        Some(pre) => {
            let target = exact_target(&exact_endpoint_law(&pre, &grid, s)?, &reward)?;
            Some(tv_distance(&exact_endpoint_law(model, &grid, s)?, &target))
        }
        None => None,
    };
    let summary = EvalSummary {
        seed: cfg.seed,
        checkpoint: path,
        samples: samples.len(),
        mean_log_r: mean,
        log_r_se: se,
        elbo_nll: nll,
        elbo_se: nll_se,
        bits_per_dim: bpd,
        grid: grid_metrics,
        exact_tv,
    };
    write_json(&dir.join("eval.json"), &summary)?;
    Ok(summary)
}

/// Runs the invariant suite and writes its report. The caller decides the
/// exit status from [`SuiteReport::passed`].
pub fn oracle_check(cfg: &RunConfig, logz_bias: f64) -> Result<SuiteReport> {
    if !matches!(cfg.task, TaskConfig::Tiny { .. }) {
        bail!("oracle-check needs a tiny task config (task.name = \"tiny\")");
    }
    let dir = out_dir(cfg)?;
    let mut suite = cfg.oracle.clone();
    suite.logz_bias += logz_bias;
    let report = run_suite(&suite, cfg.seed)?;
    write_json(&dir.join("oracle_check.json"), &report)?;
    Ok(report)
}
