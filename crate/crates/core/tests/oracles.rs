//! Losses, fusion and AdamW against naive loop implementations.

mod naive;

use fusion_distill::fusion::{
    distill_loss_on_tape, feature_map_to_tokens, fuse_features, fuse_tokens, mse_loss_variant, mse_terms, sfd_loss,
    tfd_loss, tokens_to_feature_map, total_loss, Adapter, FeatureMap, LossMode,
};
use fusion_distill::math::{kl_divergence, softmax};
use fusion_distill::optim::{adamw_step, AdamWConfig, AdamWState};
use fusion_distill::{GradTape, TensorBuf};
use naive::{naive_adamw, naive_mse, naive_sfd, naive_sum, naive_tfd, rel, Instance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    Instance::random(rng)
}

fn maps(inst: &Instance) -> (TensorBuf, FeatureMap, FeatureMap) {
    inst.maps()
}

// --- oracle equivalence -----------------------------------------------------

#[test]
fn shared_sweep_stays_within_tolerance() {
    let r = naive::sweep(99, 100);
    assert!(r.worst() < 1e-10, "{r:?}");
    assert!(r.mse < 1e-12 && r.adamw < 1e-12, "{r:?}");
}

#[test]
fn fusion_matches_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..200 {
        let inst = instance(&mut rng);
        let fused = fuse_tokens(&inst.teachers.iter().collect::<Vec<_>>()).unwrap();
        for (a, b) in fused.data().iter().zip(naive_sum(&inst.teachers)) {
            assert!(rel(*a, b) < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn fusion_three_teachers_zero_ulps_in_canonical_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..100 {
        let ts: Vec<TensorBuf> = (0..3).map(|_| TensorBuf::randn(&[2, 2], 1.0, &mut rng)).collect();
        let fused = fuse_tokens(&ts.iter().collect::<Vec<_>>()).unwrap();
        for k in 0..4 {
            let mut v = [ts[0].data()[k], ts[1].data()[k], ts[2].data()[k]];
            v.sort_by(f64::total_cmp);
            let expected = (v[0] + v[1]) + v[2];
            assert_eq!(fused.data()[k].to_bits(), expected.to_bits());
        }
    }
}

#[test]
fn tfd_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..200 {
        let inst = instance(&mut rng);
        let (fused, _, _) = maps(&inst);
        let got = tfd_loss(&inst.student, &fused).unwrap();
        let want = naive_tfd(&inst.student, &fused);
        assert!(rel(got, want) < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn sfd_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..200 {
        let inst = instance(&mut rng);
        let (fused, sm, fm) = maps(&inst);
        let got = sfd_loss(&sm, &fm).unwrap();
        let want = naive_sfd(&inst.student, &fused, inst.h, inst.w);
        assert!(rel(got, want) < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn mse_variant_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for _ in 0..200 {
        let inst = instance(&mut rng);
        let (fused, sm, fm) = maps(&inst);
        let (tok, sp) = mse_terms(&inst.student, &fused, &sm, &fm).unwrap();
        let (wt, ws) = naive_mse(&inst.student, &fused, inst.h, inst.w);
        assert!(rel(tok, wt) < 1e-12 && rel(sp, ws) < 1e-12);
        let total = mse_loss_variant(&inst.student, &fused, &sm, &fm).unwrap();
        assert!(rel(total, wt + ws) < 1e-12);
    }
}

#[test]
fn total_is_sum_of_parts_and_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let (fused, sm, fm) = maps(&inst);
        let total = total_loss(&inst.student, &fused, &sm, &fm).unwrap();
        let parts = tfd_loss(&inst.student, &fused).unwrap() + sfd_loss(&sm, &fm).unwrap();
        assert_eq!(total.to_bits(), parts.to_bits());
        let oracle = naive_tfd(&inst.student, &fused) + naive_sfd(&inst.student, &fused, inst.h, inst.w);
        assert!(rel(total, oracle) < 1e-10);
    }
}

#[test]
fn tape_objective_matches_oracles_in_every_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let (fused, _, _) = maps(&inst);
        let (h, w) = (inst.h, inst.w);
        for mode in LossMode::ALL {
            let mut tape = GradTape::new();
            let s = tape.param(inst.student.clone());
            let lv = distill_loss_on_tape(&mut tape, s, &fused, mode).unwrap();
            let got = tape.value(lv.objective).data()[0];
            let want = match mode {
                LossMode::Tfd => naive_tfd(&inst.student, &fused),
                LossMode::Sfd => naive_sfd(&inst.student, &fused, h, w),
                LossMode::TfdSfd => naive_tfd(&inst.student, &fused) + naive_sfd(&inst.student, &fused, h, w),
                LossMode::Mse => {
                    let (a, b) = naive_mse(&inst.student, &fused, h, w);
                    a + b
                }
            };
            assert!(rel(got, want) < 1e-10, "{mode}: {got} vs {want}");
        }
    }
}

#[test]
fn adamw_matches_scalar_oracle_over_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for _ in 0..100 {
        let n = rng.random_range(1..6);
        let wd = if rng.random_bool(0.5) { 0.05 } else { 0.0 };
        let mut p = TensorBuf::randn(&[n], 1.0, &mut rng);
        let mut theta = p.data().to_vec();
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        let mut st = AdamWState::new(
            AdamWConfig {
                weight_decay: wd,
                ..AdamWConfig::default()
            },
            &[&p],
        );
        for t in 1..=10 {
            let g = TensorBuf::randn(&[n], rng.random_range(0.01..3.0), &mut rng);
            let lr = rng.random_range(1e-4..1e-1);
            adamw_step(&mut [&mut p], &[g.clone()], &[true], &mut st, lr).unwrap();
            naive_adamw(&mut theta, &mut m, &mut v, g.data(), t, lr, wd);
            for i in 0..n {
                assert!(rel(p.data()[i], theta[i]) < 1e-12, "step {t}: {} vs {}", p.data()[i], theta[i]);
            }
        }
    }
}

// --- closed forms -----------------------------------------------------------

const KL_PAIR: f64 = 0.462_117_157_260_009_8;

#[test]
fn closed_form_spot_values() {
    let s = softmax(&[1.0, 0.0]).unwrap();
    assert!((s[0] - 0.73106).abs() < 1e-5 && (s[1] - 0.26894).abs() < 1e-5);
    let e = std::f64::consts::E;
    assert!((KL_PAIR - (e - 1.0) / (e + 1.0)).abs() < 1e-15);
    let k = kl_divergence(&softmax(&[1.0, 0.0]).unwrap(), &softmax(&[0.0, 1.0]).unwrap()).unwrap();
    assert!((k - 0.46212).abs() < 1e-5);

    // N=1, D=2: both tokens [1,0] vs [0,1]
    let s = TensorBuf::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let t = TensorBuf::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    assert!((tfd_loss(&s, &t).unwrap() - KL_PAIR).abs() < 1e-12);

    // D=1, N=2 spatial channel [1,0] vs [0,1]
    let sm = FeatureMap::new(TensorBuf::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let fm = FeatureMap::new(TensorBuf::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap()).unwrap();
    assert!((sfd_loss(&sm, &fm).unwrap() - KL_PAIR).abs() < 1e-12);

    // single token, D=1, S=2, T=0 → token term 4
    let s = TensorBuf::new(vec![2, 1], vec![2.0, 0.0]).unwrap();
    let t = TensorBuf::new(vec![2, 1], vec![0.0, 0.0]).unwrap();
    let sm = tokens_to_feature_map(&s, 1, 1).unwrap();
    let tm = tokens_to_feature_map(&t, 1, 1).unwrap();
    let (tok, _) = mse_terms(&s, &t, &sm, &tm).unwrap();
    assert_eq!(tok * 2.0, 4.0); // one of two tokens differs by 2
}

// --- reshape and adapter ----------------------------------------------------

#[test]
fn feature_map_index_formula_and_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let z = TensorBuf::randn(&[5, 3], 1.0, &mut rng);
    let f = tokens_to_feature_map(&z, 2, 2).unwrap();
    for c in 0..3 {
        for r in 0..2 {
            for w in 0..2 {
                assert_eq!(f.tensor().data()[c * 4 + r * 2 + w], z.data()[(1 + r * 2 + w) * 3 + c]);
            }
        }
    }
    let back = feature_map_to_tokens(&f);
    assert_eq!(back.data(), &z.data()[3..]);

    let mut basis = TensorBuf::zeros(&[5, 2]);
    basis.data_mut()[2] = 1.0; // tokens[1] = e0
    let f = tokens_to_feature_map(&basis, 2, 2).unwrap();
    assert_eq!(f.channel(0), &[1.0, 0.0, 0.0, 0.0]);
    assert!(tokens_to_feature_map(&z, 3, 2).is_err());
}

#[test]
fn adapter_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let x = TensorBuf::randn(&[5, 4], 1.0, &mut rng);
    let same = fusion_distill::fusion::adapter_project(&x, &Adapter::identity(4)).unwrap();
    assert_eq!(same, x);
    let b = TensorBuf::randn(&[6], 1.0, &mut rng);
    let zero = Adapter::new(TensorBuf::zeros(&[4, 6]), b.clone()).unwrap();
    let y = fusion_distill::fusion::adapter_project(&x, &zero).unwrap();
    for r in 0..5 {
        assert_eq!(y.row(r), b.data());
    }
    let a = Adapter::new(TensorBuf::randn(&[4, 6], 1.0, &mut rng), b).unwrap();
    let y = fusion_distill::fusion::adapter_project(&x, &a).unwrap();
    for r in 0..5 {
        for j in 0..6 {
            let mut want = a.bias.data()[j];
            for k in 0..4 {
                want += x.data()[r * 4 + k] * a.weight.data()[k * 6 + j];
            }
            assert!((y.data()[r * 6 + j] - want).abs() < 1e-12);
        }
    }
    assert!(fusion_distill::fusion::adapter_project(&TensorBuf::zeros(&[5, 3]), &a).is_err());
}

// --- algebraic invariants ---------------------------------------------------

#[test]
fn fuse_then_reshape_equals_reshape_then_fuse() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    for _ in 0..100 {
        let inst = instance(&mut rng);
        let (_, _, via_tokens) = maps(&inst);
        let per: Vec<FeatureMap> = inst
            .teachers
            .iter()
            .map(|t| tokens_to_feature_map(t, inst.h, inst.w).unwrap())
            .collect();
        let via_maps = fuse_features(&per.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(via_maps, via_tokens);
    }
}

#[test]
fn identical_teachers_act_as_inverse_temperature() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    for m in 1..=3 {
        let z = TensorBuf::randn(&[3, 5], 1.0, &mut rng);
        let ts = vec![z.clone(); m];
        let fused = fuse_tokens(&ts.iter().collect::<Vec<_>>()).unwrap();
        for r in 0..3 {
            let scaled: Vec<f64> = z.row(r).iter().map(|x| m as f64 * x).collect();
            assert_eq!(softmax(fused.row(r)).unwrap(), softmax(&scaled).unwrap());
        }
    }
}

fn permute<T: Clone>(v: &[T], seed: u64) -> Vec<T> {
    use rand::seq::SliceRandom;
    let mut out = v.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn teacher_order_never_changes_the_objective(seed in any::<u64>(), perm in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = instance(&mut rng);
        let shuffled = permute(&inst.teachers, perm);
        let a = fuse_tokens(&inst.teachers.iter().collect::<Vec<_>>()).unwrap();
        let b = fuse_tokens(&shuffled.iter().collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(&a, &b);
        for mode in LossMode::ALL {
            let eval = |target: &TensorBuf| {
                let mut tape = GradTape::new();
                let s = tape.param(inst.student.clone());
                let lv = distill_loss_on_tape(&mut tape, s, target, mode).unwrap();
                tape.value(lv.objective).data()[0]
            };
            prop_assert_eq!(eval(&a).to_bits(), eval(&b).to_bits());
        }
    }

    #[test]
    fn target_shift_leaves_tfd_unchanged(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = instance(&mut rng);
        let (fused, _, _) = maps(&inst);
        let (n, d) = fused.dims2().unwrap();
        let offsets: Vec<f64> = (0..n).map(|i| shift * (i as f64 + 1.0) / n as f64).collect();
        let shifted = TensorBuf::from_fn(&[n, d], |k| fused.data()[k] + offsets[k / d]);
        let a = tfd_loss(&inst.student, &fused).unwrap();
        let b = tfd_loss(&inst.student, &shifted).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn losses_are_non_negative_and_vanish_on_match(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = instance(&mut rng);
        let (fused, sm, fm) = maps(&inst);
        prop_assert!(tfd_loss(&inst.student, &fused).unwrap() >= 0.0);
        prop_assert!(sfd_loss(&sm, &fm).unwrap() >= 0.0);
        prop_assert!(tfd_loss(&fused, &fused).unwrap().abs() < 1e-12);
        prop_assert!(sfd_loss(&fm, &fm).unwrap().abs() < 1e-12);
    }
}
