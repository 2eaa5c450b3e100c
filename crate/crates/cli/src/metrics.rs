//! Per-step metrics as CSV with a fixed header per command.

use std::fs::File;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};

use mdm_steer::train::StepMetrics;

pub const PRETRAIN_HEADER: &[&str] = &["step", "loss", "wall_time_s"];

pub const FINETUNE_HEADER: &[&str] = &[
    "step",
    "loss",
    "mean_log_z",
    "on_policy_log_r",
    "skipped",
    "fallbacks",
    "warmup",
    "pretrained_calls",
    "finetuned_calls",
    "reward_calls",
    "wall_time_s",
];

/// CSV sink. Wall time is measured from creation; when disabled the column
/// stays but is left empty so reruns are byte-identical.
pub struct MetricsWriter {
    csv: csv::Writer<File>,
    width: usize,
    start: Option<Instant>,
}

impl MetricsWriter {
    pub fn create(path: &Path, header: &[&str], wall_time: bool) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating metrics file {}", path.display()))?;
        let mut csv = csv::Writer::from_writer(file);
        csv.write_record(header)?;
        Ok(Self {
            csv,
            width: header.len(),
            start: wall_time.then(Instant::now),
        })
    }

    fn wall(&self) -> String {
        self.start.map(|s| format!("{:.3}", s.elapsed().as_secs_f64())).unwrap_or_default()
    }

    fn write(&mut self, mut row: Vec<String>) -> Result<()> {
        row.push(self.wall());
        debug_assert_eq!(row.len(), self.width);
        self.csv.write_record(&row)?;
        Ok(())
    }

    pub fn pretrain_row(&mut self, step: usize, loss: f64) -> Result<()> {
        self.write(vec![step.to_string(), loss.to_string()])
    }

    pub fn finetune_row(&mut self, m: &StepMetrics) -> Result<()> {
        let opt = |x: f64| if x.is_nan() { String::new() } else { x.to_string() };
        self.write(vec![
            m.step.to_string(),
            m.loss.to_string(),
            opt(m.mean_log_z),
            m.on_policy_log_r.map(|x| x.to_string()).unwrap_or_default(),
            m.skipped.to_string(),
            m.fallbacks.to_string(),
            m.warmup.to_string(),
            m.calls.pretrained.to_string(),
            m.calls.finetuned.to_string(),
            m.calls.reward.to_string(),
        ])
    }

    pub fn finish(mut self) -> Result<()> {
        self.csv.flush()?;
        Ok(())
    }
}
