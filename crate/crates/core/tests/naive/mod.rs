//! Naive 64-bit loop references for the distillation losses, fusion and AdamW.
//! Shared by the oracle tests and the acceptance suite.
#![allow(dead_code)]

use fusion_distill::fusion::{
    distill_loss_on_tape, fuse_tokens, mse_terms, sfd_loss, tfd_loss, tokens_to_feature_map, FeatureMap, LossMode,
};
use fusion_distill::optim::{adamw_step, AdamWConfig, AdamWState};
use fusion_distill::{GradTape, TensorBuf};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rel(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

pub fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let mut m = v[0];
    for &x in v {
        if x > m {
            m = x;
        }
    }
    let mut e = Vec::new();
    let mut s = 0.0;
    for &x in v {
        let t = (x - m).exp();
        e.push(t);
        s += t;
    }
    e.iter().map(|t| t / s).collect()
}

pub fn naive_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut k = 0.0;
    for i in 0..p.len() {
        k += p[i] * (p[i].ln() - q[i].ln());
    }
    k
}

fn rows(t: &TensorBuf) -> Vec<Vec<f64>> {
    let (n, d) = t.dims2().unwrap();
    (0..n).map(|i| (0..d).map(|j| t.data()[i * d + j]).collect()).collect()
}

pub fn naive_tfd(s: &TensorBuf, t: &TensorBuf) -> f64 {
    let (s, t) = (rows(s), rows(t));
    let mut total = 0.0;
    for n in 0..s.len() {
        total += naive_kl(&naive_softmax(&s[n]), &naive_softmax(&t[n]));
    }
    total / s.len() as f64
}

/// Channel `c` over the patch grid in row-major order, class token skipped.
fn naive_channel(tokens: &TensorBuf, c: usize, h: usize, w: usize) -> Vec<f64> {
    let r = rows(tokens);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            out.push(r[1 + y * w + x][c]);
        }
    }
    out
}

pub fn naive_sfd(s: &TensorBuf, t: &TensorBuf, h: usize, w: usize) -> f64 {
    let d = s.shape()[1];
    let mut total = 0.0;
    for c in 0..d {
        let a = naive_softmax(&naive_channel(s, c, h, w));
        let b = naive_softmax(&naive_channel(t, c, h, w));
        total += naive_kl(&a, &b);
    }
    total / d as f64
}

/// (token term, spatial term)
pub fn naive_mse(s: &TensorBuf, t: &TensorBuf, h: usize, w: usize) -> (f64, f64) {
    let (sr, tr) = (rows(s), rows(t));
    let d = sr[0].len();
    let mut tok = 0.0;
    for n in 0..sr.len() {
        for j in 0..d {
            tok += (sr[n][j] - tr[n][j]).powi(2);
        }
    }
    tok /= (sr.len() * d) as f64;
    let mut sp = 0.0;
    for c in 0..d {
        let a = naive_channel(s, c, h, w);
        let b = naive_channel(t, c, h, w);
        for k in 0..a.len() {
            sp += (a[k] - b[k]).powi(2);
        }
    }
    sp /= (d * h * w) as f64;
    (tok, sp)
}

pub fn naive_sum(ts: &[TensorBuf]) -> Vec<f64> {
    let mut out = vec![0.0; ts[0].len()];
    for t in ts {
        for k in 0..out.len() {
            out[k] += t.data()[k];
        }
    }
    out
}

/// Scalar AdamW at default betas and eps, step counter `t` starting at 1.
pub fn naive_adamw(theta: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, lr: f64, wd: f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / (1.0 - b1.powi(t));
        let vh = v[i] / (1.0 - b2.powi(t));
        theta[i] = theta[i] - lr * mh / (vh.sqrt() + eps) - lr * wd * theta[i];
    }
}

pub struct Instance {
    pub h: usize,
    pub w: usize,
    pub student: TensorBuf,
    pub teachers: Vec<TensorBuf>,
}

impl Instance {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let h = rng.random_range(1..=3);
        let w = rng.random_range(1..=4);
        let d = rng.random_range(2..=8);
        let m = rng.random_range(1..=4);
        let scale = rng.random_range(0.1..4.0);
        let shape = [h * w + 1, d];
        Self {
            h,
            w,
            student: TensorBuf::randn(&shape, scale, rng),
            teachers: (0..m).map(|_| TensorBuf::randn(&shape, scale, rng)).collect(),
        }
    }

    pub fn fused(&self) -> TensorBuf {
        fuse_tokens(&self.teachers.iter().collect::<Vec<_>>()).unwrap()
    }

    /// (fused tokens, student map, fused map)
    pub fn maps(&self) -> (TensorBuf, FeatureMap, FeatureMap) {
        let fused = self.fused();
        let sm = tokens_to_feature_map(&self.student, self.h, self.w).unwrap();
        let fm = tokens_to_feature_map(&fused, self.h, self.w).unwrap();
        (fused, sm, fm)
    }

    pub fn tape_objective(&self, target: &TensorBuf, mode: LossMode) -> f64 {
        let mut tape = GradTape::new();
        let s = tape.param(self.student.clone());
        let lv = distill_loss_on_tape(&mut tape, s, target, mode).unwrap();
        tape.value(lv.objective).data()[0]
    }
}

/// Worst relative error per oracle family over `count` random instances.
#[derive(Debug, Default)]
pub struct OracleSweep {
    pub instances: usize,
    pub tfd: f64,
    pub sfd: f64,
    pub mse: f64,
    pub fusion: f64,
    pub adamw: f64,
    pub tape: f64,
}

impl OracleSweep {
    pub fn worst(&self) -> f64 {
        [self.tfd, self.sfd, self.mse, self.fusion, self.adamw, self.tape]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

pub fn sweep(seed: u64, count: usize) -> OracleSweep {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OracleSweep {
        instances: count,
        ..OracleSweep::default()
    };
    for _ in 0..count {
        let inst = Instance::random(&mut rng);
        let (fused, sm, fm) = inst.maps();
        let (h, w) = (inst.h, inst.w);
        for (a, b) in fused.data().iter().zip(naive_sum(&inst.teachers)) {
            out.fusion = out.fusion.max(rel(*a, b));
        }
        let tfd = naive_tfd(&inst.student, &fused);
        let sfd = naive_sfd(&inst.student, &fused, h, w);
        let (mt, ms) = naive_mse(&inst.student, &fused, h, w);
        out.tfd = out.tfd.max(rel(tfd_loss(&inst.student, &fused).unwrap(), tfd));
        out.sfd = out.sfd.max(rel(sfd_loss(&sm, &fm).unwrap(), sfd));
        let (gt, gs) = mse_terms(&inst.student, &fused, &sm, &fm).unwrap();
        out.mse = out.mse.max(rel(gt, mt)).max(rel(gs, ms));
        for (mode, want) in [
            (LossMode::Tfd, tfd),
            (LossMode::Sfd, sfd),
            (LossMode::TfdSfd, tfd + sfd),
            (LossMode::Mse, mt + ms),
        ] {
            out.tape = out.tape.max(rel(inst.tape_objective(&fused, mode), want));
        }

        let n = rng.random_range(1..6);
        let wd = if rng.random_bool(0.5) { 0.05 } else { 0.0 };
        let mut p = TensorBuf::randn(&[n], 1.0, &mut rng);
        let mut theta = p.data().to_vec();
        let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
        let cfg = AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        };
        let mut st = AdamWState::new(cfg, &[&p]);
        for t in 1..=10 {
            let g = TensorBuf::randn(&[n], rng.random_range(0.01..3.0), &mut rng);
            let lr = rng.random_range(1e-4..1e-1);
            adamw_step(&mut [&mut p], &[g.clone()], &[true], &mut st, lr).unwrap();
            naive_adamw(&mut theta, &mut m, &mut v, g.data(), t, lr, wd);
            for i in 0..n {
                out.adamw = out.adamw.max(rel(p.data()[i], theta[i]));
            }
        }
    }
    out
}
