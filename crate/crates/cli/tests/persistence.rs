use mdm_steer::denoiser::{Adam, AdamConfig, Architecture, DenoiserModel, MlpConfig, TabularConfig};
use mdm_steer::objectives::{LogZHead, LogZHeadConfig};
use mdm_steer::rng::seeded;
use mdm_steer::schedule::NoiseSchedule;
use mdm_steer::sequence::Vocabulary;
use mdm_steer::train::Method;
use mdm_steer_cli::checkpoint::{Checkpoint, MAGIC};
use mdm_steer_cli::config::{RunConfig, TaskConfig, TinyPreset};
use mdm_steer_cli::heatmap::write_heatmap;
use proptest::prelude::*;
use rand::Rng;
use tempfile::TempDir;

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

fn full_checkpoint() -> Checkpoint {
    let v = Vocabulary::new(5).unwrap();
    let mut rng = seeded(3);
    let mut model = DenoiserModel::new(&Architecture::Mlp(MlpConfig { embed_dim: 3, time_dim: 4, hidden: 5 }), v, 3, &mut rng).unwrap();
    // awkward values must survive byte for byte
    model.params_mut()[0] = -0.0;
    model.params_mut()[1] = f64::MIN_POSITIVE / 3.0;
    model.params_mut()[2] = 1.0 / 3.0;
    let n = model.num_params();
    let m: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let vv: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let mut ck = Checkpoint::new(model, NoiseSchedule::default_log_linear());
    ck.optimizer = Some(Adam::from_state(AdamConfig::with_lr(4e-3), m, vv, 17).unwrap());
    ck.ema = Some((0..n).map(|i| i as f64 * 0.1).collect());
    ck.head = Some(LogZHead::new(LogZHeadConfig::default(), v, 3, &mut rng).unwrap());
    ck.log_z = Some(0.6418538861723947);
    ck
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("x.ckpt");
    let ck = full_checkpoint();
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model, ck.model);
    assert_eq!(bits(back.model.params()), bits(ck.model.params()));
    assert_eq!(back.schedule, ck.schedule);
    assert_eq!(back.optimizer, ck.optimizer);
    assert_eq!(bits(back.ema.as_ref().unwrap()), bits(ck.ema.as_ref().unwrap()));
    assert_eq!(bits(back.head.as_ref().unwrap().params()), bits(ck.head.as_ref().unwrap().params()));
    assert_eq!(back.log_z.map(f64::to_bits), ck.log_z.map(f64::to_bits));
    // saving again reproduces the file
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn minimal_checkpoint_round_trips() {
    let v = Vocabulary::new(3).unwrap();
    let model = DenoiserModel::new(&Architecture::Tabular(TabularConfig { buckets: 2 }), v, 1, &mut seeded(0)).unwrap();
    let ck = Checkpoint::new(model, NoiseSchedule::Linear);
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back.model, ck.model);
    assert!(back.optimizer.is_none() && back.ema.is_none() && back.head.is_none() && back.log_z.is_none());
}

#[test]
fn corruption_is_detected() {
    let bytes = full_checkpoint().to_bytes().unwrap();
    assert_eq!(&bytes[..9], MAGIC);

    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x10;
    let err = Checkpoint::from_bytes(&flipped).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic).unwrap_err().to_string().contains("magic"));

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
}

#[test]
fn heatmap_files() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("h.pgm");
    write_heatmap(&[4; 6], 3, 2, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let head = b"P5\n3 2\n255\n";
    assert_eq!(&bytes[..head.len()], head);
    assert_eq!(&bytes[head.len()..], &[255; 6]);

    let mut one = vec![0u64; 128 * 128];
    one[5 * 128 + 9] = 12;
    write_heatmap(&one, 128, 128, &path).unwrap();
    let px = &std::fs::read(&path).unwrap()[b"P5\n128 128\n255\n".len()..];
    assert_eq!(px.len(), 128 * 128);
    assert_eq!(px.iter().filter(|&&p| p == 255).count(), 1);
    assert_eq!(px[5 * 128 + 9], 255);
    assert_eq!(px.iter().filter(|&&p| p == 0).count(), 128 * 128 - 1);

    assert!(write_heatmap(&[1, 2, 3], 2, 2, &path).is_err());
}

#[test]
fn default_config_round_trips() {
    let cfg = RunConfig::default();
    let text = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (
        any::<u32>(),
        0usize..3,
        prop_oneof![Just(Method::DdppIs), Just(Method::DdppLb), Just(Method::DdppKl), Just(Method::DdppSubtraj), Just(Method::Rtb)],
        1e-5f64..1.0,
        1usize..500,
        proptest::option::of(1usize..20),
        any::<bool>(),
        0.01f64..1.0,
    )
        .prop_map(|(seed, task, method, lr, steps, best_of, linear, gamma)| {
            let mut cfg = RunConfig::default();
            cfg.seed = seed as u64;
            cfg.task = match task {
                0 => TaskConfig::default(),
                1 => TaskConfig::TwoClass(Default::default()),
                _ => TaskConfig::Tiny { preset: TinyPreset::Pair },
            };
            cfg.finetune.method = method;
            cfg.finetune.lr = lr;
            cfg.finetune.gamma = gamma;
            cfg.pretrain.steps = steps;
            cfg.pretrain.ema_decay = best_of.map(|b| 1.0 - 1.0 / (b as f64 + 1.0));
            cfg.sample.best_of = best_of;
            if linear {
                cfg.schedule = NoiseSchedule::Linear;
                cfg.model = Architecture::Tabular(TabularConfig { buckets: steps });
            }
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn config_parse_serialize_parse_is_identity(cfg in arb_config()) {
        let text = cfg.to_toml().unwrap();
        let once = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&once, &cfg);
        prop_assert_eq!(RunConfig::parse(&once.to_toml().unwrap()).unwrap(), once);
    }
}
