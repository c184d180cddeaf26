//! View generation: shared geometry, value range and frozen golden outputs.
//!
//! Golden files live in `tests/golden/` as one hex f64 bit pattern per line.
//! Set `FUSION_BLESS=1` to regenerate them after an intentional change.

use std::path::PathBuf;

use fusion_distill::augment::{
    apply_jitter, color_jitter, horizontal_flip, make_views, random_resized_crop, AugmentConfig, JitterFactors,
    JitterStrengths,
};
use fusion_distill::TensorBuf;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ramp(h: usize, w: usize) -> TensorBuf {
    TensorBuf::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let k = i % (h * w);
        ((k as f64) / (h * w) as f64 * (c as f64 + 1.0) / 3.0).min(1.0)
    })
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn check_golden(name: &str, values: &[f64]) {
    let path = golden_path(name);
    let text: String = values.iter().map(|v| format!("{:016x}\n", v.to_bits())).collect();
    if std::env::var_os("FUSION_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
        return;
    }
    let frozen = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let frozen: Vec<u64> = frozen.lines().map(|l| u64::from_str_radix(l.trim(), 16).unwrap()).collect();
    let got: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
    assert_eq!(got.len(), frozen.len(), "{name}: length");
    for (i, (a, b)) in got.iter().zip(&frozen).enumerate() {
        assert_eq!(a, b, "{name}[{i}]: {} vs frozen {}", f64::from_bits(*a), f64::from_bits(*b));
    }
}

#[test]
fn golden_crop_on_ramp() {
    let img = ramp(8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, crop) = random_resized_crop(&img, &mut rng, (0.2, 1.0), 8).unwrap();
    let mut v = vec![crop.top as f64, crop.left as f64, crop.height as f64, crop.width as f64];
    v.extend_from_slice(out.data());
    check_golden("crop_ramp_seed0.txt", &v);

    let mut again = ChaCha8Rng::seed_from_u64(0);
    let (out2, crop2) = random_resized_crop(&img, &mut again, (0.2, 1.0), 8).unwrap();
    assert_eq!(crop, crop2);
    assert_eq!(out.data(), out2.data());
}

#[test]
fn golden_jitter_on_ramp() {
    let img = ramp(8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let strengths = AugmentConfig::default().strengths();
    let (out, f) = color_jitter(&img, &mut rng, strengths).unwrap();
    let mut v = vec![f.brightness, f.contrast, f.saturation];
    v.extend(f.order.iter().map(|o| *o as usize as f64));
    v.extend_from_slice(out.data());
    check_golden("jitter_ramp_seed0.txt", &v);
    assert_eq!(apply_jitter(&img, &f).unwrap(), out);
}

#[test]
fn golden_view_pair() {
    let img = ramp(16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pair = make_views(&img, &mut rng, &AugmentConfig::default()).unwrap();
    let r = &pair.record;
    let mut v = vec![
        r.crop.top as f64,
        r.crop.left as f64,
        r.crop.height as f64,
        r.crop.width as f64,
        r.flipped as u8 as f64,
    ];
    v.extend_from_slice(pair.teacher_view.data());
    v.extend_from_slice(pair.student_view.data());
    check_golden("views_ramp_seed0.txt", &v);
}

#[test]
fn flip_cases() {
    let img = TensorBuf::new(vec![3, 1, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let f = horizontal_flip(&img, true);
    assert_eq!(f.data(), &[0.2, 0.1, 0.4, 0.3, 0.6, 0.5]);
    assert_eq!(horizontal_flip(&f, true), img);
    assert_eq!(horizontal_flip(&img, false), img);
    let sym = TensorBuf::new(vec![3, 1, 3], vec![0.1, 0.5, 0.1, 0.2, 0.0, 0.2, 0.9, 0.3, 0.9]).unwrap();
    assert_eq!(horizontal_flip(&sym, true), sym);
}

#[test]
fn jitter_cases() {
    let img = ramp(8, 8);
    let zero = JitterStrengths {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
    };
    let (out, f) = color_jitter(&img, &mut ChaCha8Rng::seed_from_u64(5), zero).unwrap();
    assert_eq!(out, img);
    assert!(f.is_identity());

    let flat = TensorBuf::filled(&[3, 4, 4], 0.25);
    let mut f = JitterFactors::identity();
    f.brightness = 2.0;
    f.order.push(fusion_distill::augment::JitterOp::Brightness);
    let out = apply_jitter(&flat, &f).unwrap();
    assert!(out.data().iter().all(|&x| x == 0.5));
}

#[test]
fn zero_jitter_views_are_identical() {
    let cfg = AugmentConfig {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        ..AugmentConfig::default()
    };
    let img = ramp(16, 16);
    for seed in 0..20 {
        let pair = make_views(&img, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
        assert_eq!(pair.teacher_view.data(), pair.student_view.data());
    }
}

#[test]
fn views_share_geometry_on_100_seeds() {
    let img = ramp(16, 16);
    let cfg = AugmentConfig::default();
    for seed in 0..100 {
        let pair = make_views(&img, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
        let rec = &pair.record;
        let geometric = rec.apply_geometry(&img, 16).unwrap();
        assert_eq!(geometric, pair.teacher_view, "seed {seed}");
        assert_eq!(apply_jitter(&geometric, &rec.student_jitter).unwrap(), pair.student_view);
    }
}

#[test]
fn degenerate_source_is_rejected() {
    let tiny = TensorBuf::zeros(&[3, 1, 1]);
    assert!(random_resized_crop(&tiny, &mut ChaCha8Rng::seed_from_u64(0), (0.2, 1.0), 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_stay_in_unit_range_and_are_deterministic(seed in any::<u64>(), scale_min in 0.05f64..1.0) {
        let cfg = AugmentConfig { scale_min, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = TensorBuf::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let a = make_views(&img, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
        let b = make_views(&img, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
        prop_assert_eq!(&a.student_view, &b.student_view);
        prop_assert_eq!(&a.record, &b.record);
        for x in a.teacher_view.data().iter().chain(a.student_view.data()) {
            prop_assert!((0.0..=1.0).contains(x));
        }
    }
}
