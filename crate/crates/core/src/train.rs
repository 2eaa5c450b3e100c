//! Training loops: ELBO pretraining and reward-posterior fine-tuning.
//!
//! [`Finetuner`] owns the fine-tuned model, its optimizer, the log-partition
//! estimators and the replay buffer. Clean sequences for the off-policy
//! methods come from the buffer, which is seeded at construction and then
//! refreshed with fresh samples of the current model every
//! `on_policy_every` steps and with dataset draws every `data_every` steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{rtb_loss, simulate_trajectory, DEFAULT_DETACH_FRACTION};
use crate::denoiser::{sample_batch, Adam, AdamConfig, DenoiserModel, EmaState};
use crate::error::{Error, Result};
use crate::forward::mask_forward;
use crate::objectives::{
    ddpp_is_train_step, ddpp_kl_loss, ddpp_lb_train_step, ddpp_subtrajectory_loss, elbo_loss_batch,
    noised_batch, CallCounter, GradEstimator, LogZHead, LogZHeadConfig, ReplayBuffer, RewardModel,
    SubTrajectoryMode, DEFAULT_CAPACITY, DEFAULT_KL_DRAWS,
};
use crate::schedule::NoiseSchedule;
use crate::sequence::{MaskedSample, Sequence, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decay of the parameter EMA; `None` disables it.
    pub ema_decay: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            lr: 3e-4,
            ema_decay: None,
        }
    }
}

/// Outcome of [`pretrain`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub final_loss: f64,
    /// EMA of the parameters after the last step, when enabled.
    pub ema: Option<Vec<f64>>,
    pub optimizer: Adam,
}

/// Minimizes the negative ELBO on minibatches drawn with replacement from
/// `data`. `on_step(step, loss)` is called after every update.
pub fn pretrain<R: Rng + ?Sized>(
    model: &mut DenoiserModel,
    data: &[Sequence],
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
    rng: &mut R,
    mut on_step: impl FnMut(usize, f64),
) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("pretraining needs data".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("invalid pretraining config {cfg:?}")));
    }
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), model.num_params());
    let mut ema = cfg.ema_decay.map(|d| EmaState::new(d, model.params())).transpose()?;
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let batch: Vec<Sequence> = (0..cfg.batch_size)
            .map(|_| data[rng.gen_range(0..data.len())].clone())
            .collect();
        let lg = elbo_loss_batch(model, &batch, schedule, rng)?;
        opt.step(model.params_mut(), &lg.grad)?;
        if let Some(e) = ema.as_mut() {
            e.update(model.params())?;
        }
        last = lg.value;
        on_step(step, lg.value);
    }
    Ok(PretrainReport {
        final_loss: last,
        ema: ema.map(|e| e.shadow().to_vec()),
        optimizer: opt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DdppIs,
    DdppLb,
    DdppKl,
    DdppSubtraj,
    Rtb,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DdppIs => "ddpp-is",
            Method::DdppLb => "ddpp-lb",
            Method::DdppKl => "ddpp-kl",
            Method::DdppSubtraj => "ddpp-subtraj",
            Method::Rtb => "rtb",
        }
    }

    /// Whether the method trains on replay-buffer samples.
    pub fn uses_buffer(self) -> bool {
        matches!(self, Method::DdppIs | Method::DdppLb | Method::DdppSubtraj)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub method: Method,
    pub steps: usize,
    pub batch_size: usize,
    /// Learning rate of the fine-tuned model.
    pub lr: f64,
    /// Learned log-partition head (LB and sub-trajectory). Its `lr` also
    /// drives the scalar log-partition of RTB, which always uses Adam.
    pub head: LogZHeadConfig,
    /// Initial steps during which only the log-partition estimate moves.
    pub warmup_steps: usize,
    /// Importance samples per element for DDPP-IS.
    pub is_samples: usize,
    /// Endpoint draws per sample for DDPP-KL.
    pub kl_draws: usize,
    pub estimator: GradEstimator,
    /// Step width of the sub-trajectory loss.
    pub gamma: f64,
    pub subtraj_mode: SubTrajectoryMode,
    pub detach_fraction: f64,
    pub buffer_capacity: usize,
    /// Steps between on-policy buffer refreshes; 0 disables them.
    pub on_policy_every: usize,
    /// Steps between dataset buffer refreshes; 0 disables them.
    pub data_every: usize,
    /// Sequences added per refresh (and per source when seeding).
    pub refresh_size: usize,
    /// Reverse steps for on-policy samples and RTB trajectories.
    pub train_steps: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            method: Method::DdppLb,
            steps: 2000,
            batch_size: 64,
            lr: 4e-3,
            head: LogZHeadConfig::default(),
            warmup_steps: 0,
            is_samples: 16,
            kl_draws: DEFAULT_KL_DRAWS,
            estimator: GradEstimator::default(),
            gamma: 0.125,
            // The single-pair estimate squares a one-step draw, and its
            // variance term biases the fixed point towards the pretrained
            // chain; the full path has no such bias.
            subtraj_mode: SubTrajectoryMode::FullPath,
            detach_fraction: DEFAULT_DETACH_FRACTION,
            buffer_capacity: DEFAULT_CAPACITY,
            on_policy_every: 100,
            data_every: 250,
            refresh_size: 256,
            train_steps: 32,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("is_samples", self.is_samples),
            ("kl_draws", self.kl_draws),
            ("buffer_capacity", self.buffer_capacity),
            ("refresh_size", self.refresh_size),
            ("train_steps", self.train_steps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lr > 0.0) || !(self.head.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.detach_fraction) {
            return Err(Error::Config(format!("detach_fraction must lie in [0, 1), got {}", self.detach_fraction)));
        }
        Ok(())
    }
}

/// Diagnostics of one fine-tuning step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    /// Mean log-partition estimate used by the step (NaN for KL).
    pub mean_log_z: f64,
    /// Mean log-reward of the on-policy batch drawn at this step, if any.
    pub on_policy_log_r: Option<f64>,
    pub skipped: usize,
    pub fallbacks: usize,
    pub warmup: bool,
    pub calls: CallCounter,
}

pub struct Finetuner {
    cfg: FinetuneConfig,
    q: DenoiserModel,
    q_opt: Adam,
    head: LogZHead,
    log_z: f64,
    log_z_opt: Adam,
    pre: DenoiserModel,
    reward: RewardModel,
    data: Vec<Sequence>,
    schedule: NoiseSchedule,
    grid: TimeGrid,
    buffer: ReplayBuffer,
    step: usize,
}

impl Finetuner {
    /// Starts from `q = pre`. `data` feeds the dataset refreshes and may be
    /// empty when `data_every` is 0.
    pub fn new<R: Rng + ?Sized>(
        cfg: FinetuneConfig,
        pre: DenoiserModel,
        reward: RewardModel,
        data: Vec<Sequence>,
        schedule: NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.method == Method::DdppKl && !reward.has_relaxed() {
            return Err(Error::Config(format!(
                "method ddpp-kl needs a differentiable reward, '{}' has none",
                reward.name()
            )));
        }
        if cfg.data_every > 0 && data.is_empty() {
            return Err(Error::Config("data_every > 0 needs a dataset".into()));
        }
        let head = LogZHead::new(cfg.head, pre.vocab(), pre.seq_len(), rng)?;
        let q = pre.clone();
        let mut ft = Self {
            q_opt: Adam::new(AdamConfig::with_lr(cfg.lr), q.num_params()),
            log_z_opt: Adam::new(AdamConfig::with_lr(cfg.head.lr), 1),
            grid: TimeGrid::new(cfg.train_steps)?,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            q,
            head,
            log_z: 0.0,
            pre,
            reward,
            data,
            schedule,
            step: 0,
            cfg,
        };
        if ft.cfg.method.uses_buffer() {
            ft.refresh_on_policy(rng)?;
            if ft.cfg.data_every > 0 {
                ft.refresh_data(rng);
            }
        }
        Ok(ft)
    }

    pub fn config(&self) -> &FinetuneConfig {
        &self.cfg
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.q
    }

    pub fn into_model(self) -> DenoiserModel {
        self.q
    }

    /// Optimizer state of the fine-tuned model.
    pub fn optimizer(&self) -> &Adam {
        &self.q_opt
    }

    pub fn pretrained(&self) -> &DenoiserModel {
        &self.pre
    }

    pub fn head(&self) -> &LogZHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut LogZHead {
        &mut self.head
    }

    /// Scalar log-partition trained by RTB.
    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn refresh_on_policy<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        let xs = self.on_policy(self.cfg.refresh_size, rng)?;
        let mean = self.mean_log_reward(&xs)?;
        self.buffer.extend(xs);
        Ok(mean)
    }

    fn refresh_data<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for _ in 0..self.cfg.refresh_size {
            let x = self.data[rng.gen_range(0..self.data.len())].clone();
            self.buffer.push(x);
        }
    }

    /// Fresh samples of the current model. Sampling is not part of a train
    /// step's call accounting.
    fn on_policy<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Sequence>> {
        sample_batch(&self.q, count, &self.grid, &self.schedule, rng)
    }

    fn mean_log_reward(&self, xs: &[Sequence]) -> Result<f64> {
        let mut s = 0.0;
        for x in xs {
            s += self.reward.log_reward(x)?;
        }
        Ok(s / xs.len() as f64)
    }

    /// Runs one training step.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<StepMetrics> {
        let warmup = self.step < self.cfg.warmup_steps;
        let mut counter = CallCounter::new();
        let mut m = StepMetrics {
            step: self.step,
            warmup,
            mean_log_z: f64::NAN,
            ..Default::default()
        };
        if self.cfg.method.uses_buffer() && self.step > 0 {
            if self.cfg.on_policy_every > 0 && self.step % self.cfg.on_policy_every == 0 {
                m.on_policy_log_r = Some(self.refresh_on_policy(rng)?);
            }
            if self.cfg.data_every > 0 && self.step % self.cfg.data_every == 0 {
                self.refresh_data(rng);
            }
        }
        match self.cfg.method {
            Method::DdppLb => {
                let x0s = self.buffer.sample(self.cfg.batch_size, rng)?;
                let batch = noised_batch(&x0s, &self.schedule, self.q.vocab(), rng)?;
                let s = ddpp_lb_train_step(
                    &mut self.q,
                    &mut self.q_opt,
                    &mut self.head,
                    &self.pre,
                    &self.reward,
                    &batch,
                    warmup,
                    &mut counter,
                )?;
                (m.loss, m.mean_log_z, m.skipped, m.fallbacks) = (s.loss, s.mean_log_z, s.skipped, s.fallbacks);
            }
            Method::DdppIs => {
                if !warmup {
                    let x0s = self.buffer.sample(self.cfg.batch_size, rng)?;
                    let batch = noised_batch(&x0s, &self.schedule, self.q.vocab(), rng)?;
                    let s = ddpp_is_train_step(
                        &mut self.q,
                        &mut self.q_opt,
                        &self.pre,
                        &self.reward,
                        &batch,
                        self.cfg.is_samples,
                        rng,
                        &mut counter,
                    )?;
                    (m.loss, m.mean_log_z, m.skipped, m.fallbacks) = (s.loss, s.mean_log_z, s.skipped, s.fallbacks);
                }
            }
            Method::DdppKl => {
                let x0s = self.on_policy(self.cfg.batch_size, rng)?;
                m.on_policy_log_r = Some(self.mean_log_reward(&x0s)?);
                if !warmup {
                    let lg = ddpp_kl_loss(
                        &self.q,
                        &self.pre,
                        &self.reward,
                        &x0s,
                        self.cfg.kl_draws,
                        self.cfg.estimator,
                        &self.schedule,
                        rng,
                        &mut counter,
                    )?;
                    self.q_opt.step(self.q.params_mut(), &lg.grad)?;
                    m.loss = lg.value;
                }
            }
            Method::DdppSubtraj => self.subtraj_step(warmup, rng, &mut counter, &mut m)?,
            Method::Rtb => self.rtb_step(warmup, rng, &mut counter, &mut m)?,
        }
        m.calls = counter;
        self.step += 1;
        Ok(m)
    }

    fn subtraj_step<R: Rng + ?Sized>(
        &mut self,
        warmup: bool,
        rng: &mut R,
        counter: &mut CallCounter,
        m: &mut StepMetrics,
    ) -> Result<()> {
        let gamma = self.cfg.gamma;
        let x0s = self.buffer.sample(self.cfg.batch_size, rng)?;
        let mut pairs = Vec::with_capacity(x0s.len());
        for x0 in x0s {
            let t = rng.gen_range(gamma..=1.0);
            let xt = mask_forward(&x0, t, &self.schedule, self.q.vocab(), rng)?;
            pairs.push((x0, xt));
        }
        let xts: Vec<MaskedSample> = pairs.iter().map(|(_, xt)| xt.clone()).collect();
        let (log_z, tape) = self.head.forward(&xts)?;
        let mut residuals = Vec::with_capacity(pairs.len());
        let mut q_grad = vec![0.0; self.q.num_params()];
        for ((x0, xt), &lz) in pairs.iter().zip(&log_z) {
            match ddpp_subtrajectory_loss(
                &self.q,
                &self.pre,
                &self.reward,
                x0,
                xt,
                gamma,
                lz,
                self.cfg.subtraj_mode,
                &self.schedule,
                rng,
                counter,
            ) {
                Ok(l) => {
                    q_grad.iter_mut().zip(&l.grad).for_each(|(a, g)| *a += g);
                    residuals.push(Some(l.residual));
                }
                Err(Error::InvalidSample(_)) => residuals.push(None),
                Err(e) => return Err(e),
            }
        }
        counter.add_reward(pairs.len());
        let used = residuals.iter().flatten().count();
        m.skipped = pairs.len() - used;
        if used == 0 {
            return Ok(());
        }
        let scale = 1.0 / used as f64;
        let dz: Vec<f64> = residuals.iter().map(|r| r.map_or(0.0, |r| 2.0 * r * scale)).collect();
        m.loss = residuals.iter().flatten().map(|r| scale * r * r).sum();
        m.mean_log_z = residuals
            .iter()
            .zip(&log_z)
            .filter(|(r, _)| r.is_some())
            .map(|(_, lz)| lz * scale)
            .sum();
        let head_grad = self.head.backward(&tape, &dz);
        if !warmup {
            q_grad.iter_mut().for_each(|g| *g *= scale);
            self.q_opt.step(self.q.params_mut(), &q_grad)?;
        }
        self.head.step(&head_grad)
    }

    fn rtb_step<R: Rng + ?Sized>(
        &mut self,
        warmup: bool,
        rng: &mut R,
        counter: &mut CallCounter,
        m: &mut StepMetrics,
    ) -> Result<()> {
        let mut trajs = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            trajs.push(simulate_trajectory(&self.q, &self.grid, &self.schedule, rng)?);
        }
        let ends: Vec<Sequence> = trajs.iter().map(|t| t.endpoint().clone()).collect();
        m.on_policy_log_r = Some(self.mean_log_reward(&ends)?);
        let scale = 1.0 / trajs.len() as f64;
        let mut q_grad = vec![0.0; self.q.num_params()];
        let mut dz = 0.0;
        for traj in &trajs {
            let l = rtb_loss(
                &self.q,
                &self.pre,
                &self.reward,
                self.log_z,
                traj,
                self.cfg.detach_fraction,
                &self.schedule,
                rng,
                counter,
            )?;
            m.loss += scale * l.value;
            dz += scale * l.grad_log_z;
            q_grad.iter_mut().zip(&l.grad).for_each(|(a, g)| *a += scale * g);
        }
        m.mean_log_z = self.log_z;
        if !warmup {
            self.q_opt.step(self.q.params_mut(), &q_grad)?;
        }
        let mut z = [self.log_z];
        self.log_z_opt.step(&mut z, &[dz])?;
        self.log_z = z[0];
        Ok(())
    }
}
