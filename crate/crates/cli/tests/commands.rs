use std::fs;
use std::path::Path;
use std::process::Command;

use mdm_steer::sequence::Vocabulary;
use mdm_steer::tasks::load_dataset;
use mdm_steer_cli::checkpoint::Checkpoint;
use mdm_steer_cli::commands::{self, FINETUNE_CHECKPOINT, PRETRAIN_CHECKPOINT};
use mdm_steer_cli::config::RunConfig;
use mdm_steer_cli::metrics::{FINETUNE_HEADER, PRETRAIN_HEADER};
use tempfile::TempDir;

fn config(dir: &Path, body: &str) -> RunConfig {
    let mut cfg = RunConfig::parse(body).unwrap();
    cfg.out_dir = dir.to_path_buf();
    cfg
}

const TWO_CLASS: &str = r#"
wall_time = false
[task]
name = "two-class"
template = [1, 0, 1]
[schedule]
kind = "linear"
[model]
variant = "mlp"
embed_dim = 4
time_dim = 4
hidden = 16
[data]
size = 200
[pretrain]
steps = 40
batch_size = 16
lr = 1e-2
ema_decay = 0.9
[finetune]
method = "ddpp-lb"
steps = 12
batch_size = 8
train_steps = 8
refresh_size = 16
on_policy_every = 5
data_every = 6
[sample]
count = 50
steps = 8
[eval]
samples = 200
likelihood_samples = 50
elbo_draws = 500
steps = 8
"#;

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn pretrain_and_finetune_are_reproducible_with_stable_csv_schemas() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for dir in [&a, &b] {
        let cfg = config(dir.path(), TWO_CLASS);
        commands::pretrain(&cfg).unwrap();
        commands::finetune(&cfg, None).unwrap();
    }
    for file in ["pretrain_metrics.csv", "finetune_metrics.csv", PRETRAIN_CHECKPOINT, FINETUNE_CHECKPOINT] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
    for (file, header, rows) in [("pretrain_metrics.csv", PRETRAIN_HEADER, 40), ("finetune_metrics.csv", FINETUNE_HEADER, 12)] {
        let (h, r) = read_csv(&a.path().join(file));
        assert_eq!(h, header);
        assert_eq!(r.len(), rows);
        assert!(r.iter().all(|row| row.len() == header.len()));
    }
    let (_, rows) = read_csv(&a.path().join("finetune_metrics.csv"));
    // LB costs one pretrained call per batch element
    assert!(rows.iter().all(|r| r[7] == "8"));
    assert!(rows.iter().any(|r| !r[3].is_empty()));
}

#[test]
fn wall_time_column_is_filled_when_enabled() {
    let dir = TempDir::new().unwrap();
    let mut cfg = config(dir.path(), TWO_CLASS);
    cfg.wall_time = true;
    cfg.pretrain.steps = 5;
    commands::pretrain(&cfg).unwrap();
    let (_, rows) = read_csv(&dir.path().join("pretrain_metrics.csv"));
    assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn checkpoints_carry_optimizer_ema_and_head() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), TWO_CLASS);
    commands::pretrain(&cfg).unwrap();
    let pre = Checkpoint::load(&dir.path().join(PRETRAIN_CHECKPOINT)).unwrap();
    assert_eq!(pre.optimizer.as_ref().unwrap().steps(), 40);
    assert_eq!(pre.ema.as_ref().unwrap().len(), pre.model.num_params());
    commands::finetune(&cfg, None).unwrap();
    let ft = Checkpoint::load(&dir.path().join(FINETUNE_CHECKPOINT)).unwrap();
    assert!(ft.head.is_some());
    assert_eq!(ft.log_z, None);
    assert_ne!(ft.model.params(), pre.model.params());
}

#[test]
fn point_mass_data_is_fitted() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("point.txt");
    fs::write(&data, "1\n").unwrap();
    let cfg = config(
        dir.path(),
        &format!(
            r#"
            wall_time = false
            [task]
            name = "tiny"
            preset = "three-point"
            [schedule]
            kind = "linear"
            [model]
            variant = "tabular"
            [data]
            path = "{}"
            [pretrain]
            steps = 3000
            batch_size = 8
            lr = 5e-2
            "#,
            data.display()
        ),
    );
    let s = commands::pretrain(&cfg).unwrap();
    assert!(!s.reference_model);
    assert!(s.final_loss.unwrap() <= 1e-3, "{:?}", s.final_loss);
}

const TINY: &str = r#"
wall_time = false
[task]
name = "tiny"
preset = "binary"
[schedule]
kind = "linear"
[finetune]
steps = 30
batch_size = 8
train_steps = 4
gamma = 0.25
data_every = 0
[sample]
count = 400
steps = 4
[eval]
samples = 400
likelihood_samples = 20
elbo_draws = 200
steps = 4
"#;

#[test]
fn warmup_leaves_the_model_bit_identical() {
    let dir = TempDir::new().unwrap();
    let mut cfg = config(dir.path(), TINY);
    cfg.finetune.warmup_steps = 30;
    commands::pretrain(&cfg).unwrap();
    commands::finetune(&cfg, None).unwrap();
    let pre = fs::read(dir.path().join(PRETRAIN_CHECKPOINT)).unwrap();
    let ft = Checkpoint::load(&dir.path().join(FINETUNE_CHECKPOINT)).unwrap();
    let pre = Checkpoint::from_bytes(&pre).unwrap();
    let bits = |p: &[f64]| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(ft.model.params()), bits(pre.model.params()));
}

#[test]
fn kl_without_a_relaxed_reward_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let mut cfg = config(dir.path(), TINY);
    cfg.finetune.method = mdm_steer::train::Method::DdppKl;
    cfg.reward.relaxed = false;
    commands::pretrain(&cfg).unwrap();
    let err = commands::finetune(&cfg, None).unwrap_err();
    assert!(format!("{err:#}").contains("config error"), "{err:#}");
    cfg.reward.relaxed = true;
    commands::finetune(&cfg, None).unwrap();
}

#[test]
fn finetune_rejects_a_mismatched_checkpoint() {
    let dir = TempDir::new().unwrap();
    commands::pretrain(&config(dir.path(), TINY)).unwrap();
    assert!(commands::finetune(&config(dir.path(), TWO_CLASS), None).is_err());
}

#[test]
fn best_of_one_is_plain_sampling_and_output_reloads() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), TINY);
    commands::pretrain(&cfg).unwrap();
    let plain = commands::sample(&cfg, None, None, None).unwrap();
    let plain_text = fs::read_to_string(dir.path().join("samples.txt")).unwrap();
    let best = commands::sample(&cfg, None, Some(1), None).unwrap();
    assert_eq!(fs::read_to_string(dir.path().join("samples.txt")).unwrap(), plain_text);
    assert_eq!(plain.mean_log_r, best.mean_log_r);
    let ds = load_dataset(dir.path().join("samples.txt"), Vocabulary::new(3).unwrap()).unwrap();
    assert_eq!(ds.len(), 400);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("sample_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["count"], 400);
    assert_eq!(summary["seed"], 0);
    assert!(commands::sample(&cfg, None, Some(2), Some(3)).is_err());
}

#[test]
fn eval_reports_exact_distance_on_tiny_tasks() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), TINY);
    commands::pretrain(&cfg).unwrap();
    let e = commands::eval(&cfg, None).unwrap();
    // binary preset: pretrained [0.7, 0.3], target [7/16, 9/16]
    assert!((e.exact_tv.unwrap() - (0.7 - 7.0 / 16.0)).abs() < 1e-12);
    assert!(e.grid.is_none());
    assert!(e.bits_per_dim > 0.0);
    assert!(dir.path().join("eval.json").exists());
}

#[test]
fn eval_on_the_grid_writes_a_heatmap() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        r#"
        wall_time = false
        [model]
        variant = "mlp"
        embed_dim = 4
        time_dim = 4
        hidden = 8
        [data]
        size = 100
        [pretrain]
        steps = 5
        [eval]
        samples = 300
        reference = 500
        likelihood_samples = 20
        elbo_draws = 100
        steps = 4
        "#,
    );
    commands::pretrain(&cfg).unwrap();
    let e = commands::eval(&cfg, None).unwrap();
    let g = e.grid.unwrap();
    assert!((0.0..=1.0).contains(&g.coarse_tv));
    let pgm = fs::read(&g.heatmap).unwrap();
    let head = b"P5\n128 128\n255\n";
    assert_eq!(&pgm[..head.len()], head);
    assert_eq!(pgm.len(), head.len() + 128 * 128);
    assert!(pgm[head.len()..].contains(&255));
}

fn run_bin(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mdm-steer")).args(args).output().unwrap()
}

fn oracle_config(dir: &Path) -> String {
    let path = dir.join("oracle.toml");
    fs::write(
        &path,
        r#"
        [task]
        name = "tiny"
        preset = "pair"
        [oracle]
        prop_batches = 300
        consistency_states = 30
        elbo_draws = 20000
        best_of_trials = 2000
        "#,
    )
    .unwrap();
    path.display().to_string()
}

fn verdicts(dir: &Path) -> Vec<(String, bool)> {
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("oracle_check.json")).unwrap()).unwrap();
    report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| (c["name"].as_str().unwrap().to_string(), c["passed"].as_bool().unwrap()))
        .collect()
}

#[test]
fn oracle_check_passes_fails_under_bias_and_is_seed_robust() {
    let dir = TempDir::new().unwrap();
    let cfg = oracle_config(dir.path());
    let out = dir.path().join("a");
    let ok = run_bin(&["oracle-check", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let base = verdicts(&out);
    assert!(base.iter().all(|v| v.1));

    let other = dir.path().join("b");
    let reseeded = run_bin(&["oracle-check", "--config", &cfg, "--seed", "17", "--out", other.to_str().unwrap()]);
    assert!(reseeded.status.success());
    assert_eq!(verdicts(&other), base);

    let bad = dir.path().join("c");
    let biased = run_bin(&["oracle-check", "--config", &cfg, "--out", bad.to_str().unwrap(), "--inject-logz-bias", "1"]);
    assert_eq!(biased.status.code(), Some(1));
    let v = verdicts(&bad);
    let get = |n: &str| v.iter().find(|x| x.0 == n).unwrap().1;
    assert!(!get("lower-bound"));
    assert!(!get("estimator-consistency"));
}

#[test]
fn oracle_check_needs_a_tiny_task() {
    let dir = TempDir::new().unwrap();
    let out = run_bin(&["oracle-check", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tiny"));
}

#[test]
fn conflicting_sampling_flags_fail_before_any_work() {
    let dir = TempDir::new().unwrap();
    let out = run_bin(&["sample", "--best-of", "3", "--particles", "10", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mutually exclusive"));
}

#[test]
fn missing_config_names_the_path() {
    let out = run_bin(&["pretrain", "--config", "/nonexistent/run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.toml"));
}
