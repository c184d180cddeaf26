//! Distillation step and training loop contracts on tiny configurations.

use fusion_distill::augment::AugmentConfig;
use fusion_distill::checkpoint::{load_checkpoint, save_checkpoint};
use fusion_distill::config::TrainConfig;
use fusion_distill::data::{generate_synthetic, Dataset};
use fusion_distill::fusion::{Adapter, LossMode};
use fusion_distill::gradsuite::{randomized_encoder, tiny_student, tiny_teacher};
use fusion_distill::optim::{AdamWConfig, ScheduleConfig};
use fusion_distill::teacher::TeacherBank;
use fusion_distill::trainer::{distill_step, run_training, Batch, StudentState, METRICS_FILE};
use fusion_distill::vit::ViTEncoder;
use fusion_distill::{Error, TensorBuf};

fn no_jitter() -> AugmentConfig {
    AugmentConfig {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        ..AugmentConfig::default()
    }
}

fn bank(n: u64) -> TeacherBank {
    let teachers = (0..n).map(|s| randomized_encoder(&tiny_teacher(), 10 + s).unwrap()).collect();
    TeacherBank::new(teachers, (0..n).map(|i| format!("t{i}")).collect()).unwrap()
}

fn images(n: usize) -> Vec<TensorBuf> {
    generate_synthetic(n, 16, 3).images()
}

fn batch(images: &[TensorBuf], index: usize) -> Batch<'_> {
    Batch {
        index,
        epoch: 1,
        samples: images.iter().enumerate().collect(),
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        student: tiny_student(),
        epochs: 2,
        batch_size: 4,
        schedule: ScheduleConfig {
            base_lr: 1e-3,
            warmup_epochs: 0.5,
            total_epochs: 2,
            steps_per_epoch: 1,
            floor_lr: 1e-5,
        },
        save_every: 1,
        probe: fusion_distill::config::ProbeConfig {
            epochs: 20,
            ..Default::default()
        },
        ..TrainConfig::default()
    }
}

fn all_params(state: &StudentState) -> Vec<f64> {
    let mut out: Vec<f64> = state.encoder.params().iter().flat_map(|p| p.data().to_vec()).collect();
    out.extend(state.adapter.weight.data());
    out.extend(state.adapter.bias.data());
    out
}

#[test]
fn self_distillation_is_a_fixed_point() {
    let teacher = randomized_encoder(&tiny_student(), 5).unwrap();
    let single = TeacherBank::new(vec![teacher.clone()], vec!["self".into()]).unwrap();
    let optim = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut state = StudentState::new(teacher, Adapter::identity(8), optim).unwrap();
    let start = all_params(&state);
    let imgs = images(4);
    for step in 0..10 {
        let l = distill_step(&batch(&imgs, step), &single, &mut state, 1e-3, LossMode::TfdSfd, &no_jitter(), 0).unwrap();
        assert!(l.total.abs() < 1e-10, "step {step}: loss {}", l.total);
    }
    let drift = start
        .iter()
        .zip(all_params(&state))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1e-12, "drift {drift}");
}

#[test]
fn tfd_mode_reports_zero_spatial_term() {
    let b = bank(2);
    let imgs = images(3);
    let mut state = StudentState::init(&tiny_student(), 16, 0, AdamWConfig::default()).unwrap();
    let l = distill_step(&batch(&imgs, 0), &b, &mut state, 1e-3, LossMode::Tfd, &AugmentConfig::default(), 0).unwrap();
    assert_eq!(l.sfd, 0.0);
    assert_eq!(l.total, l.tfd);
    assert!(l.tfd > 0.0);

    let mut state = StudentState::init(&tiny_student(), 16, 0, AdamWConfig::default()).unwrap();
    let l = distill_step(&batch(&imgs, 0), &b, &mut state, 1e-3, LossMode::Sfd, &AugmentConfig::default(), 0).unwrap();
    assert_eq!(l.tfd, 0.0);
    assert_eq!(l.total, l.sfd);
}

const GOLDEN_STEP_LOSS: f64 = 1.483_239_127_233_776_6;

#[test]
fn one_seeded_step_reproduces_golden_loss() {
    let b = bank(3);
    let imgs = images(4);
    let mut state = StudentState::init(&tiny_student(), 16, 7, AdamWConfig::default()).unwrap();
    let l = distill_step(&batch(&imgs, 0), &b, &mut state, 1e-3, LossMode::TfdSfd, &AugmentConfig::default(), 7).unwrap();
    println!("golden step loss {:.17e}", l.total);
    assert!((l.total - GOLDEN_STEP_LOSS).abs() <= 1e-12 * GOLDEN_STEP_LOSS, "{:.17e}", l.total);
    assert_eq!(l.total.to_bits(), (l.tfd + l.sfd).to_bits());
}

#[test]
fn teacher_parameters_affect_loss_but_are_never_written() {
    let imgs = images(2);
    let loss_with = |bank: &TeacherBank| {
        let mut state = StudentState::init(&tiny_student(), 16, 1, AdamWConfig::default()).unwrap();
        distill_step(&batch(&imgs, 0), bank, &mut state, 0.0, LossMode::TfdSfd, &AugmentConfig::default(), 1)
            .unwrap()
            .total
    };
    let base = bank(2);
    let before = base.fingerprints();

    let mut teachers: Vec<ViTEncoder> = base.teachers().to_vec();
    teachers[1].unfreeze();
    teachers[1].params_mut().unwrap()[0].data_mut()[3] += 1e-3;
    let nudged = TeacherBank::new(teachers, base.labels().to_vec()).unwrap();
    assert_ne!(loss_with(&base), loss_with(&nudged));

    let mut state = StudentState::init(&tiny_student(), 16, 1, AdamWConfig::default()).unwrap();
    for i in 0..3 {
        distill_step(&batch(&imgs, i), &base, &mut state, 1e-2, LossMode::TfdSfd, &AugmentConfig::default(), 1).unwrap();
    }
    assert_eq!(base.fingerprints(), before);
    assert!(base.teachers().iter().all(|t| t.is_frozen()));
}

#[test]
fn non_finite_loss_reports_the_batch() {
    let b = bank(1);
    let imgs = images(2);
    for huge in [false, true] {
        let mut state = StudentState::init(&tiny_student(), 16, 0, AdamWConfig::default()).unwrap();
        if huge {
            // layer norm would absorb a huge encoder weight; the adapter sees it directly
            state.adapter.weight.data_mut().fill(f64::MAX);
        } else {
            state.encoder.params_mut().unwrap()[0].data_mut().fill(f64::NAN);
        }
        let err = distill_step(&batch(&imgs, 17), &b, &mut state, 1e-3, LossMode::TfdSfd, &AugmentConfig::default(), 0)
            .unwrap_err();
        match err {
            Error::NonFiniteLoss { batch, .. } => assert_eq!(batch, 17),
            other => panic!("expected NonFiniteLoss, got {other}"),
        }
    }
}

fn small_split() -> (Dataset, Dataset) {
    (generate_synthetic(12, 16, 1), generate_synthetic(8, 16, 2))
}

#[test]
fn zero_epochs_yields_initialization() {
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_config()
    };
    let (train, test) = small_split();
    let dir = tempfile::tempdir().unwrap();
    let out = run_training(&cfg, &bank(2), &train, Some(&test), Some(dir.path())).unwrap();
    let init = StudentState::init(&tiny_student(), 16, cfg.seed, cfg.optim).unwrap();
    assert_eq!(out.state, init);
    assert!(out.metrics.epochs.is_empty());
    assert!(out.metrics.probe_accuracy.is_none());
    assert_eq!(std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), "");
    let (restored, _, epoch) = StudentState::from_checkpoint(&load_checkpoint(out.saved.last().unwrap()).unwrap()).unwrap();
    assert_eq!((restored, epoch), (init, 0));
}

#[test]
fn same_seed_gives_identical_files() {
    let (train, test) = small_split();
    let cfg = tiny_config();
    let b = bank(3);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = run_training(&cfg, &b, &train, Some(&test), Some(d1.path())).unwrap();
    let c = run_training(&cfg, &b, &train, Some(&test), Some(d2.path())).unwrap();
    assert_eq!(a.metrics.epochs, c.metrics.epochs);
    assert_eq!(a.metrics.probe_accuracy, c.metrics.probe_accuracy);
    for name in ["final.dmtc", "checkpoint-0001.dmtc", "checkpoint-0002.dmtc", METRICS_FILE, "summary.json"] {
        let x = std::fs::read(d1.path().join(name)).unwrap();
        let y = std::fs::read(d2.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }

    let other = run_training(&TrainConfig { seed: 1, ..cfg }, &b, &train, None, None).unwrap();
    assert_ne!(other.state, a.state);
}

#[test]
fn metrics_are_finite_and_non_negative() {
    let (train, test) = small_split();
    for mode in LossMode::ALL {
        let cfg = TrainConfig {
            loss_mode: mode,
            ..tiny_config()
        };
        let out = run_training(&cfg, &bank(2), &train, Some(&test), None).unwrap();
        assert_eq!(out.metrics.epochs.len(), 2);
        for e in &out.metrics.epochs {
            for v in [e.loss, e.tfd, e.sfd, e.lr] {
                assert!(v.is_finite() && v >= 0.0, "{mode}: {e:?}");
            }
        }
        let acc = out.metrics.probe_accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn train_state_checkpoint_round_trips_through_disk() {
    let (train, _) = small_split();
    let cfg = tiny_config();
    let out = run_training(&cfg, &bank(2), &train, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/state.dmtc");
    save_checkpoint(&path, &out.checkpoint).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, out.checkpoint);
    let (state, config, epoch) = StudentState::from_checkpoint(&back).unwrap();
    assert_eq!(state, out.state);
    assert_eq!(config, cfg);
    assert_eq!(epoch, 2);
}

#[test]
fn io_failures_name_the_path() {
    let cfg = TrainConfig {
        dataset: "/nonexistent/dataset-dir".into(),
        teachers: vec!["/nonexistent/t.dmtc".into()],
        ..tiny_config()
    };
    let msg = fusion_distill::trainer::train(&cfg).unwrap_err().to_string();
    assert!(msg.contains("/nonexistent/"), "{msg}");
}
