//! Soft teacher fusion in the token and spatial views, the student adapter,
//! and the token/spatial KL distillation losses (plus the MSE ablation).
//!
//! Teacher fusion is an unweighted elementwise sum, so `M` identical teachers
//! sharpen the softmax targets as an inverse temperature of `M`. The KL
//! direction is `KL(student ‖ fused teacher)`. The token loss covers all
//! `N+1` tokens including the class token; the spatial loss covers the `N`
//! patch tokens only.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{GradTape, Var};
use crate::tensor::TensorBuf;

const INIT_STD: f64 = 0.02;

/// Which distillation objective a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossMode {
    TfdSfd,
    Tfd,
    Sfd,
    Mse,
}

impl LossMode {
    pub const ALL: [LossMode; 4] = [LossMode::Tfd, LossMode::Sfd, LossMode::TfdSfd, LossMode::Mse];

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::TfdSfd => "tfd+sfd",
            LossMode::Tfd => "tfd",
            LossMode::Sfd => "sfd",
            LossMode::Mse => "mse",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tfd+sfd" => Ok(LossMode::TfdSfd),
            "tfd" => Ok(LossMode::Tfd),
            "sfd" => Ok(LossMode::Sfd),
            "mse" => Ok(LossMode::Mse),
            other => Err(Error::Config(format!(
                "unknown loss_mode `{other}` (tfd+sfd, tfd, sfd, mse)"
            ))),
        }
    }
}

/// `D × H′ × W′` spatial view of the patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(TensorBuf);

impl FeatureMap {
    pub fn new(t: TensorBuf) -> Result<Self> {
        if t.ndim() != 3 {
            return Err(Error::Shape(format!("feature map must be D×H′×W′, got {:?}", t.shape())));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &TensorBuf {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// Channel `c` flattened row-major to length `H′·W′`.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.0.data()[c * n..(c + 1) * n]
    }
}

/// Sums same-shaped tensors elementwise. Each element's addends are sorted
/// with `total_cmp` before summing, so the result is bit-identical under any
/// permutation of `parts`.
fn canonical_sum(parts: &[&TensorBuf], what: &str) -> Result<TensorBuf> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("{what}: no teachers")))?;
    for p in &parts[1..] {
        first.check_same_shape(p, what)?;
    }
    let mut scratch = vec![0.0; parts.len()];
    let data = (0..first.len())
        .map(|k| {
            for (s, p) in scratch.iter_mut().zip(parts) {
                *s = p.data()[k];
            }
            scratch.sort_by(f64::total_cmp);
            scratch.iter().sum()
        })
        .collect();
    Ok(TensorBuf::from_parts(first.shape().to_vec(), data))
}

/// Fused token target `z^T_n = Σ_m z^(m)_n`.
pub fn fuse_tokens(teacher_tokens: &[&TensorBuf]) -> Result<TensorBuf> {
    if let Some(t) = teacher_tokens.first() {
        t.dims2()?;
    }
    canonical_sum(teacher_tokens, "fuse_tokens")
}

/// Fused spatial target `f^T_c = Σ_m f^(m)_c`.
pub fn fuse_features(teacher_maps: &[&FeatureMap]) -> Result<FeatureMap> {
    let parts: Vec<&TensorBuf> = teacher_maps.iter().map(|m| m.tensor()).collect();
    FeatureMap::new(canonical_sum(&parts, "fuse_features")?)
}

/// Drops the class token and lays the `N` patch tokens out as
/// `F[c][r][w] = tokens[1 + r·W′ + w][c]`.
pub fn tokens_to_feature_map(tokens: &TensorBuf, h: usize, w: usize) -> Result<FeatureMap> {
    let (rows, d) = tokens.dims2()?;
    if rows < 2 || h * w != rows - 1 {
        return Err(Error::Shape(format!(
            "{} patch tokens do not fill a {h}×{w} grid",
            rows.saturating_sub(1)
        )));
    }
    let n = h * w;
    let mut out = vec![0.0; d * n];
    for t in 0..n {
        let src = tokens.row(t + 1);
        for c in 0..d {
            out[c * n + t] = src[c];
        }
    }
    FeatureMap::new(TensorBuf::from_parts(vec![d, h, w], out))
}

/// Inverse of [`tokens_to_feature_map`]: the `N × D` patch-token rows.
pub fn feature_map_to_tokens(map: &FeatureMap) -> TensorBuf {
    let (d, n) = (map.channels(), map.height() * map.width());
    let mut out = vec![0.0; n * d];
    for c in 0..d {
        for (t, &v) in map.channel(c).iter().enumerate() {
            out[t * d + c] = v;
        }
    }
    TensorBuf::from_parts(vec![n, d], out)
}

/// Row-wise affine projection from the student width `D′` to the teacher width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub weight: TensorBuf,
    pub bias: TensorBuf,
}

impl Adapter {
    pub fn new(weight: TensorBuf, bias: TensorBuf) -> Result<Self> {
        let (_, d) = weight.dims2()?;
        if bias.shape() != [d] {
            return Err(Error::Shape(format!(
                "adapter bias {:?} for weight {:?}",
                bias.shape(),
                weight.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn init(student_dim: usize, teacher_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weight: TensorBuf::randn(&[student_dim, teacher_dim], INIT_STD, &mut rng),
            bias: TensorBuf::zeros(&[teacher_dim]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: TensorBuf::identity(dim),
            bias: TensorBuf::zeros(&[dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self) -> [&TensorBuf; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut TensorBuf; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut GradTape) -> [Var; 2] {
        [tape.param(self.weight.clone()), tape.param(self.bias.clone())]
    }
}

/// `tokens · W + b` on the tape.
pub fn adapter_on_tape(tape: &mut GradTape, tokens: Var, adapter: [Var; 2]) -> Result<Var> {
    let y = tape.matmul(tokens, adapter[0])?;
    tape.add_row_bias(y, adapter[1])
}

pub fn adapter_project(student_tokens: &TensorBuf, adapter: &Adapter) -> Result<TensorBuf> {
    let (_, dp) = student_tokens.dims2()?;
    if dp != adapter.in_dim() {
        return Err(Error::Shape(format!(
            "adapter expects width {}, tokens have {dp}",
            adapter.in_dim()
        )));
    }
    let mut tape = GradTape::new();
    let x = tape.constant(student_tokens.clone());
    let w = tape.constant(adapter.weight.clone());
    let b = tape.constant(adapter.bias.clone());
    let y = adapter_on_tape(&mut tape, x, [w, b])?;
    Ok(tape.value(y).clone())
}

fn mean_row_kl(student: &[f64], target: &[f64], rows: usize, width: usize) -> f64 {
    let mut p = vec![0.0; width];
    let mut ratio = vec![0.0; width];
    let mut total = 0.0;
    for i in 0..rows {
        let r = i * width..(i + 1) * width;
        total += math::kl_logits_into(&student[r.clone()], &target[r], &mut p, &mut ratio);
    }
    total / rows as f64
}

/// Token loss: `1/(N+1) Σ_n KL(softmax(z^S_n) ‖ softmax(z^T_n))`, softmax over channels.
pub fn tfd_loss(student_tokens: &TensorBuf, fused_tokens: &TensorBuf) -> Result<f64> {
    let (rows, d) = student_tokens.dims2()?;
    student_tokens.check_same_shape(fused_tokens, "tfd_loss")?;
    student_tokens.ensure_finite("tfd_loss student")?;
    fused_tokens.ensure_finite("tfd_loss target")?;
    Ok(mean_row_kl(student_tokens.data(), fused_tokens.data(), rows, d))
}

/// Spatial loss: `1/D Σ_c KL(softmax(f^S_c) ‖ softmax(f^T_c))`, softmax over the `N` positions.
pub fn sfd_loss(student_map: &FeatureMap, fused_map: &FeatureMap) -> Result<f64> {
    student_map
        .tensor()
        .check_same_shape(fused_map.tensor(), "sfd_loss")?;
    student_map.tensor().ensure_finite("sfd_loss student")?;
    fused_map.tensor().ensure_finite("sfd_loss target")?;
    let n = student_map.height() * student_map.width();
    Ok(mean_row_kl(
        student_map.tensor().data(),
        fused_map.tensor().data(),
        student_map.channels(),
        n,
    ))
}

fn check_map_matches_tokens(tokens: &TensorBuf, map: &FeatureMap) -> Result<()> {
    let (rows, d) = tokens.dims2()?;
    if map.channels() != d || map.height() * map.width() + 1 != rows {
        return Err(Error::Shape(format!(
            "feature map {:?} is not derived from tokens {:?}",
            map.tensor().shape(),
            tokens.shape()
        )));
    }
    Ok(())
}

/// Token loss plus spatial loss, unweighted.
pub fn total_loss(
    student_tokens: &TensorBuf,
    fused_tokens: &TensorBuf,
    student_map: &FeatureMap,
    fused_map: &FeatureMap,
) -> Result<f64> {
    check_map_matches_tokens(student_tokens, student_map)?;
    Ok(tfd_loss(student_tokens, fused_tokens)? + sfd_loss(student_map, fused_map)?)
}

/// Same structure as [`total_loss`] with each softmax-KL replaced by the mean
/// squared error of the raw embeddings.
pub fn mse_loss_variant(
    student_tokens: &TensorBuf,
    fused_tokens: &TensorBuf,
    student_map: &FeatureMap,
    fused_map: &FeatureMap,
) -> Result<f64> {
    let (tok, sp) = mse_terms(student_tokens, fused_tokens, student_map, fused_map)?;
    Ok(tok + sp)
}

/// `(token term, spatial term)` of the MSE variant.
pub fn mse_terms(
    student_tokens: &TensorBuf,
    fused_tokens: &TensorBuf,
    student_map: &FeatureMap,
    fused_map: &FeatureMap,
) -> Result<(f64, f64)> {
    student_tokens.check_same_shape(fused_tokens, "mse tokens")?;
    student_map
        .tensor()
        .check_same_shape(fused_map.tensor(), "mse maps")?;
    check_map_matches_tokens(student_tokens, student_map)?;
    let (rows, d) = student_tokens.dims2()?;
    let n = student_map.height() * student_map.width();
    let tok = student_tokens.sq_dist(fused_tokens) / (rows * d) as f64;
    let sp = student_map.tensor().sq_dist(fused_map.tensor()) / (d * n) as f64;
    Ok((tok, sp))
}

/// Loss nodes recorded for one sample. Components a mode does not use are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub objective: Var,
    pub token: Option<Var>,
    pub spatial: Option<Var>,
}

/// Records the distillation objective for projected student tokens
/// `(N+1) × D` against a constant fused target.
pub fn distill_loss_on_tape(
    tape: &mut GradTape,
    student: Var,
    fused_tokens: &TensorBuf,
    mode: LossMode,
) -> Result<LossVars> {
    let (rows, _) = fused_tokens.dims2()?;
    tape.value(student)
        .check_same_shape(fused_tokens, "distillation target")?;
    let target = tape.constant(fused_tokens.clone());
    let patches = rows - 1;

    let spatial_pair = |tape: &mut GradTape| -> Result<(Var, Var)> {
        let s = tape.slice_rows(student, 1, patches)?;
        let s = tape.transpose(s)?;
        let t = tape.slice_rows(target, 1, patches)?;
        let t = tape.transpose(t)?;
        Ok((s, t))
    };

    let (token, spatial) = match mode {
        LossMode::Tfd => (Some(tape.kl_rows(student, target)?), None),
        LossMode::Sfd => {
            let (s, t) = spatial_pair(tape)?;
            (None, Some(tape.kl_rows(s, t)?))
        }
        LossMode::TfdSfd => {
            let tok = tape.kl_rows(student, target)?;
            let (s, t) = spatial_pair(tape)?;
            (Some(tok), Some(tape.kl_rows(s, t)?))
        }
        LossMode::Mse => {
            let tok = tape.mse(student, target)?;
            let (s, t) = spatial_pair(tape)?;
            (Some(tok), Some(tape.mse(s, t)?))
        }
    };
    let objective = match (token, spatial) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!(),
    };
    Ok(LossVars {
        objective,
        token,
        spatial,
    })
}
