mod common;

use common::{snapshot, toy_samples};
use ragan::training::{
    load_checkpoint, read_manifest, run_training, save_checkpoint, train_step, Batch, RunOptions,
    TrainState,
};
use ragan::{Config, Image32, LossWeights, RaGan32, RaganError};

fn batch(n: usize) -> Batch<f32> {
    let s = toy_samples::<f32>(n);
    let imgs: Vec<Image32> = s.iter().map(|p| p.0.clone()).collect();
    let ages: Vec<_> = s.iter().map(|p| p.1).collect();
    Batch::new(&imgs, &ages).unwrap()
}

fn all_params(m: &RaGan32) -> Vec<(String, Vec<f32>)> {
    snapshot(&m.store, "")
}

#[test]
fn one_step_is_bit_reproducible() {
    let cfg = Config::default();
    let b = batch(2);
    let run = || {
        let mut m = RaGan32::toy(&cfg).unwrap();
        let mut s = TrainState::new(&cfg);
        let log = train_step(&mut m, &mut s, &b).unwrap();
        (log, all_params(&m))
    };
    let (a, pa) = run();
    let (b2, pb) = run();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b2).unwrap()
    );
    assert_eq!(pa, pb);
    assert_eq!(a.step, 1);
    assert!(a
        .target_ages
        .iter()
        .all(|t| t.fract() == 0.0 && (10.0..=80.0).contains(t)));
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let mut cfg = Config::default();
    cfg.loss = LossWeights::zero();
    let mut m = RaGan32::toy(&cfg).unwrap();
    let before = all_params(&m);
    let mut s = TrainState::new(&cfg);
    let log = train_step(&mut m, &mut s, &batch(1)).unwrap();
    assert_eq!(log.forward.total, 0.0);
    assert!(log.forward.l2 > 0.0);
    assert_eq!(all_params(&m), before);
}

#[test]
fn single_optimizer_mode_steps_and_differs_from_dual() {
    let b = batch(1);
    let params_after = |mode: &str| {
        let mut cfg = Config::default();
        cfg.set("optimizer_mode", mode).unwrap();
        let mut m = RaGan32::toy(&cfg).unwrap();
        let mut s = TrainState::new(&cfg);
        train_step(&mut m, &mut s, &b).unwrap();
        (snapshot(&m.store, "mixer."), s)
    };
    let (dual, ds) = params_after("dual");
    let (single, ss) = params_after("single");
    assert_ne!(dual, single);
    assert!(ss.forward_opt.slots().next().is_none());
    assert!(ds.forward_opt.slots().next().is_some());
}

#[test]
fn frozen_components_never_move() {
    let cfg = Config::default();
    let mut m = RaGan32::toy(&cfg).unwrap();
    let frozen = [
        "race_net.",
        "pyramid_net.",
        "identity_net.",
        "age_net.",
        "generator.",
    ];
    let before: Vec<_> = frozen.iter().map(|p| snapshot(&m.store, p)).collect();
    let trainable_before = snapshot(&m.store, "race_encoder.");
    let mut s = TrainState::new(&cfg);
    let b = batch(2);
    for _ in 0..2 {
        train_step(&mut m, &mut s, &b).unwrap();
    }
    for (p, snap) in frozen.iter().zip(&before) {
        assert!(!snap.is_empty(), "{p}");
        assert_eq!(&snapshot(&m.store, p), snap, "{p} changed");
    }
    assert_ne!(snapshot(&m.store, "race_encoder."), trainable_before);
}

#[test]
fn unfrozen_generator_trains() {
    let mut cfg = Config::default();
    cfg.generator_frozen = false;
    let mut m = RaGan32::toy(&cfg).unwrap();
    let before = snapshot(&m.store, "generator.");
    let mut s = TrainState::new(&cfg);
    train_step(&mut m, &mut s, &batch(1)).unwrap();
    assert_ne!(snapshot(&m.store, "generator."), before);
}

#[test]
fn non_finite_loss_aborts_before_any_update() {
    let cfg = Config::default();
    let mut m = RaGan32::toy(&cfg).unwrap();
    let id = m.store.ids_with_prefix("identity_net.")[0];
    m.store.value_mut(id).data_mut()[0] = f32::NAN;
    let before = all_params(&m);
    let mut s = TrainState::new(&cfg);
    match train_step(&mut m, &mut s, &batch(1)) {
        Err(RaganError::NonFiniteLoss {
            step,
            phase,
            breakdown,
        }) => {
            assert_eq!((step, phase), (1, "forward"));
            assert!(breakdown.id.is_nan());
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(s.step, 0);
    let after = all_params(&m);
    assert_eq!(format!("{after:?}"), format!("{before:?}"));
}

#[test]
fn empty_dataset_is_a_config_error() {
    let cfg = Config::default();
    let mut m = RaGan32::toy(&cfg).unwrap();
    let before = all_params(&m);
    let mut s = TrainState::new(&cfg);
    let empty: Vec<(Image32, ragan::AgeValue)> = Vec::new();
    let opts = RunOptions {
        steps: 2,
        ..Default::default()
    };
    assert!(matches!(
        run_training(&mut m, &mut s, &empty, &opts),
        Err(RaganError::Config(_))
    ));
    assert_eq!(s.step, 0);
    assert_eq!(all_params(&m), before);
}

#[test]
fn log_checkpoint_and_resume_reproduce_the_uninterrupted_run() {
    let mut cfg = Config::default();
    cfg.batch_size = 2;
    let data = toy_samples::<f32>(3);
    let dir = tempfile::tempdir().unwrap();

    let mut m = RaGan32::toy(&cfg).unwrap();
    let mut s = TrainState::new(&cfg);
    let full_log = dir.path().join("full.jsonl");
    let opts = RunOptions {
        steps: 3,
        checkpoint_dir: Some(dir.path().join("ckpt")),
        checkpoint_every: 2,
        log_path: Some(full_log.clone()),
    };
    let full = run_training(&mut m, &mut s, &data, &opts).unwrap();
    let lines = std::fs::read_to_string(&full_log).unwrap();
    assert_eq!(lines.lines().count(), 3);
    let ck = dir.path().join("ckpt/step2");
    assert_eq!(read_manifest(&ck).unwrap().step, 2);
    assert!(!dir.path().join("ckpt/step3").exists());

    let mut m2 = RaGan32::toy(&cfg).unwrap();
    let mut s2 = load_checkpoint(&mut m2, &ck).unwrap();
    assert_eq!(s2.step, 2);
    let resumed_log = dir.path().join("resumed.jsonl");
    std::fs::write(
        &resumed_log,
        lines
            .lines()
            .take(2)
            .map(|l| format!("{l}\n"))
            .collect::<String>(),
    )
    .unwrap();
    let opts2 = RunOptions {
        steps: 3,
        log_path: Some(resumed_log.clone()),
        ..Default::default()
    };
    let resumed = run_training(&mut m2, &mut s2, &data, &opts2).unwrap();
    assert_eq!(resumed.len(), 1);
    assert_eq!(resumed[0], full[2]);
    assert_eq!(std::fs::read_to_string(&resumed_log).unwrap(), lines);
    assert_eq!(snapshot(&m2.store, ""), snapshot(&m.store, ""));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = Config::default();
    let mut m = RaGan32::toy(&cfg).unwrap();
    let mut s = TrainState::new(&cfg);
    train_step(&mut m, &mut s, &batch(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m, &s, dir.path()).unwrap();
    let mut fresh = RaGan32::toy(&cfg).unwrap();
    let s2 = load_checkpoint(&mut fresh, dir.path()).unwrap();
    assert_eq!(snapshot(&fresh.store, ""), snapshot(&m.store, ""));
    assert_eq!(s2.step, s.step);
    for (id, slot) in s.cycle_opt.slots() {
        let other = s2.cycle_opt.slot(id).unwrap();
        assert_eq!(
            (slot.step, &slot.m, &slot.v),
            (other.step, &other.m, &other.v)
        );
    }
}

#[test]
fn checkpoint_from_another_config_is_refused() {
    let cfg = Config::default();
    let m = RaGan32::toy(&cfg).unwrap();
    let s = TrainState::new(&cfg);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m, &s, dir.path()).unwrap();
    let mut other_cfg = cfg.clone();
    other_cfg.seed = 99;
    let mut other = RaGan32::toy(&other_cfg).unwrap();
    assert!(matches!(
        load_checkpoint(&mut other, dir.path()),
        Err(RaganError::Config(_))
    ));
}
