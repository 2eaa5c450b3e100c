//! Run configuration, read from TOML.
//!
//! Every section and field has a default, so a config file only needs the
//! values it changes. Validation happens at load time.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

use mdm_steer::baselines::Selection;
use mdm_steer::checks::SuiteConfig;
use mdm_steer::denoiser::{sample_batch, Architecture, DenoiserModel, MlpConfig};
use mdm_steer::objectives::{Reward, RewardModel};
use mdm_steer::schedule::NoiseSchedule;
use mdm_steer::sequence::{Sequence, Vocabulary};
use mdm_steer::tasks::{GridTask, TinyTask, TwoClassTask};
use mdm_steer::train::{FinetuneConfig, PretrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Print progress to stderr every this many steps (0: silent).
    pub log_every: usize,
    /// Fill the wall-time column of metrics files. Disable for
    /// byte-reproducible output.
    pub wall_time: bool,
    pub task: TaskConfig,
    pub reward: RewardConfig,
    pub schedule: NoiseSchedule,
    pub model: Architecture,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub oracle: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            log_every: 0,
            wall_time: true,
            task: TaskConfig::default(),
            reward: RewardConfig::default(),
            schedule: NoiseSchedule::default_log_linear(),
            model: Architecture::Mlp(MlpConfig::default()),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
            oracle: SuiteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TinyPreset {
    Binary,
    ThreePoint,
    Pair,
}

impl TinyPreset {
    pub fn build(self) -> TinyTask {
        match self {
            TinyPreset::Binary => TinyTask::binary(),
            TinyPreset::ThreePoint => TinyTask::three_point(),
            TinyPreset::Pair => TinyTask::pair(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum TaskConfig {
    Grid(GridTask),
    TwoClass(TwoClassTask),
    /// Enumerable instance with a fixed pretrained model.
    Tiny { preset: TinyPreset },
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Grid(GridTask::default())
    }
}

impl TaskConfig {
    pub fn vocab(&self) -> Vocabulary {
        match self {
            TaskConfig::Grid(g) => g.vocab(),
            TaskConfig::TwoClass(c) => c.vocab(),
            TaskConfig::Tiny { preset } => preset.build().vocab(),
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            TaskConfig::Grid(g) => g.seq_len(),
            TaskConfig::TwoClass(c) => c.seq_len(),
            TaskConfig::Tiny { preset } => preset.build().seq_len(),
        }
    }

    /// The task's reward before [`RewardConfig`] is applied.
    pub fn base_reward(&self) -> RewardModel {
        match self {
            TaskConfig::Grid(g) => RewardModel::new(g.reward()),
            TaskConfig::TwoClass(c) => RewardModel::new(c.reward()),
            TaskConfig::Tiny { preset } => preset.build().reward,
        }
    }

    /// The fixed pretrained model of enumerable presets.
    pub fn reference_model(&self) -> Option<DenoiserModel> {
        match self {
            TaskConfig::Tiny { preset } => Some(preset.build().pre),
            _ => None,
        }
    }

    /// Draws from the data distribution the pretrained model should learn.
    pub fn prior_samples<R: Rng + ?Sized>(
        &self,
        count: usize,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Vec<Sequence>> {
        Ok(match self {
            TaskConfig::Grid(g) => (0..count).map(|_| g.prior_sample(rng)).collect(),
            TaskConfig::TwoClass(c) => c.dataset(count, rng),
            TaskConfig::Tiny { preset } => {
                let t = preset.build();
                sample_batch(&t.pre, count, &t.grid, schedule, rng)?
            }
        })
    }

    /// Held-out sequences whose likelihood the fine-tuned model should keep:
    /// the rewarded class for the two-class task, prior draws otherwise.
    pub fn likelihood_samples<R: Rng + ?Sized>(
        &self,
        count: usize,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Vec<Sequence>> {
        match self {
            TaskConfig::TwoClass(c) => Ok((0..count).map(|_| c.sample_class(0, rng)).collect()),
            _ => self.prior_samples(count, schedule, rng),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            TaskConfig::Grid(g) => g.validate()?,
            TaskConfig::TwoClass(c) => {
                ensure!(!c.template.is_empty(), "two-class template must be non-empty");
                ensure!(c.template.iter().all(|&b| b <= 1), "two-class template must be binary");
                ensure!((0.0..0.5).contains(&c.flip), "flip must lie in [0, 0.5), got {}", c.flip);
                ensure!(c.beta > 0.0, "beta must be positive, got {}", c.beta);
            }
            TaskConfig::Tiny { .. } => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Exponent applied to the reward, `log R ← temperature · log R`.
    pub temperature: f64,
    /// Expose the task's smooth relaxation (needed by ddpp-kl).
    pub relaxed: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            relaxed: true,
        }
    }
}

/// A reward with its relaxation hidden.
struct HardOnly(RewardModel);

impl Reward for HardOnly {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn raw_log_reward(&self, x0: &Sequence) -> mdm_steer::Result<f64> {
        self.0.log_reward(x0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset file to pretrain on instead of task samples.
    pub path: Option<PathBuf>,
    /// Number of task samples when no file is given.
    pub size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, size: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub count: usize,
    /// Reverse steps at inference.
    pub steps: usize,
    /// Keep the best of this many pretrained draws per output.
    pub best_of: Option<usize>,
    /// Value-guided sampling with this many particles per step.
    pub particles: Option<usize>,
    pub selection: Selection,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            count: 10_000,
            steps: 128,
            best_of: None,
            particles: None,
            selection: Selection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Model samples for reward and histogram metrics.
    pub samples: usize,
    /// Rejection-sampled target draws for the grid histogram distance.
    pub reference: usize,
    /// Sequences scored for bits per dimension.
    pub likelihood_samples: usize,
    /// Corruptions drawn for the ELBO, spread over those sequences.
    pub elbo_draws: usize,
    /// Side of the coarse histogram cells on the grid.
    pub bin: u32,
    pub steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            reference: 50_000,
            likelihood_samples: 5000,
            elbo_draws: 100_000,
            bin: 8,
            steps: 128,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = Self::parse(&text).with_context(|| format!("in config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The task reward with temperature and relaxation settings applied.
    pub fn reward(&self) -> Result<RewardModel> {
        let base = self.task.base_reward();
        let r = if self.reward.relaxed { base } else { RewardModel::new(HardOnly(base)) };
        Ok(r.with_temperature(self.reward.temperature)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        ensure!(self.reward.temperature > 0.0, "reward.temperature must be positive");
        if let NoiseSchedule::LogLinear { sigma_min, sigma_max } = self.schedule {
            NoiseSchedule::log_linear(sigma_min, sigma_max)?;
        }
        match self.model {
            Architecture::Mlp(m) => ensure!(
                m.embed_dim > 0 && m.time_dim > 0 && m.hidden > 0,
                "model dimensions must be positive: {m:?}"
            ),
            Architecture::Tabular(t) => ensure!(t.buckets > 0, "tabular buckets must be positive"),
        }
        ensure!(self.data.size > 0, "data.size must be positive");
        ensure!(self.pretrain.batch_size > 0, "pretrain.batch_size must be positive");
        ensure!(self.pretrain.lr > 0.0, "pretrain.lr must be positive");
        if let Some(d) = self.pretrain.ema_decay {
            ensure!((0.0..1.0).contains(&d), "pretrain.ema_decay must lie in [0, 1)");
        }
        self.finetune.validate()?;
        let positive = [
            ("sample.count", self.sample.count),
            ("sample.steps", self.sample.steps),
            ("eval.samples", self.eval.samples),
            ("eval.reference", self.eval.reference),
            ("eval.likelihood_samples", self.eval.likelihood_samples),
            ("eval.elbo_draws", self.eval.elbo_draws),
            ("eval.bin", self.eval.bin as usize),
            ("eval.steps", self.eval.steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            bail!("{name} must be positive");
        }
        self.sample_mode(None, None)?;
        Ok(())
    }

    /// Resolves the sampling mode from the config and command-line
    /// overrides. Asking for both best-of-n and particles is an error.
    pub fn sample_mode(&self, best_of: Option<usize>, particles: Option<usize>) -> Result<SampleMode> {
        let best_of = best_of.or(self.sample.best_of);
        let particles = particles.or(self.sample.particles);
        match (best_of, particles) {
            (Some(_), Some(_)) => bail!("best-of and particles are mutually exclusive"),
            (Some(0), None) => bail!("best-of needs n >= 1"),
            (None, Some(0)) => bail!("particles needs at least one particle"),
            (Some(n), None) => Ok(SampleMode::BestOf(n)),
            (None, Some(k)) => Ok(SampleMode::Particles(k)),
            (None, None) => Ok(SampleMode::Plain),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "n")]
pub enum SampleMode {
    Plain,
    BestOf(usize),
    Particles(usize),
}
