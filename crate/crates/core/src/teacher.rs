//! Frozen teacher banks and the toy teachers used at desk scale.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{color_jitter, horizontal_flip, random_resized_crop, AugmentConfig};
use crate::checkpoint::{encoder_checkpoint, encoder_from_checkpoint, load_checkpoint, save_checkpoint, DType};
use crate::data::Dataset;
use crate::error::{CheckpointError, Error, Result};
use crate::optim::{adamw_step, decays, lr_at, AdamWConfig, AdamWState, ScheduleConfig};
use crate::tape::{GradTape, Gradients, Var};
use crate::tensor::TensorBuf;
use crate::vit::{patchify, ViTConfig, ViTEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TeacherFlavor {
    MaskedReconstruction,
    InstanceContrastive,
    RandomFrozen,
}

impl TeacherFlavor {
    pub const ALL: [TeacherFlavor; 3] = [
        TeacherFlavor::MaskedReconstruction,
        TeacherFlavor::InstanceContrastive,
        TeacherFlavor::RandomFrozen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TeacherFlavor::MaskedReconstruction => "masked-reconstruction",
            TeacherFlavor::InstanceContrastive => "instance-contrastive",
            TeacherFlavor::RandomFrozen => "random-frozen",
        }
    }

    /// Short provenance label stored with the checkpoint.
    pub fn label(self) -> &'static str {
        match self {
            TeacherFlavor::MaskedReconstruction => "toy-mim",
            TeacherFlavor::InstanceContrastive => "toy-contrastive",
            TeacherFlavor::RandomFrozen => "toy-random",
        }
    }
}

impl fmt::Display for TeacherFlavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TeacherFlavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked-reconstruction" | "mim" | "toy-mim" => Ok(TeacherFlavor::MaskedReconstruction),
            "instance-contrastive" | "contrastive" | "toy-contrastive" => Ok(TeacherFlavor::InstanceContrastive),
            "random-frozen" | "random" | "toy-random" => Ok(TeacherFlavor::RandomFrozen),
            other => Err(Error::UnknownFlavor(other.to_string())),
        }
    }
}

/// M frozen encoders with a common input geometry and embedding width.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherBank {
    teachers: Vec<ViTEncoder>,
    labels: Vec<String>,
}

impl TeacherBank {
    pub fn new(mut teachers: Vec<ViTEncoder>, labels: Vec<String>) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::InvalidArgument("teacher bank needs at least one teacher".into()));
        }
        if labels.len() != teachers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} teachers",
                labels.len(),
                teachers.len()
            )));
        }
        let first = teachers[0].config().clone();
        for t in &teachers[1..] {
            let c = t.config();
            if c.image_size != first.image_size || c.patch_size != first.patch_size {
                return Err(CheckpointError::GeometryMismatch(format!(
                    "{}px/p{} vs {}px/p{}",
                    first.image_size, first.patch_size, c.image_size, c.patch_size
                ))
                .into());
            }
            if c.embed_dim != first.embed_dim {
                return Err(CheckpointError::DimMismatch {
                    first: first.embed_dim,
                    other: c.embed_dim,
                }
                .into());
            }
        }
        for t in &mut teachers {
            t.freeze();
        }
        Ok(Self { teachers, labels })
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.teachers[0].config().embed_dim
    }

    pub fn image_size(&self) -> usize {
        self.teachers[0].config().image_size
    }

    pub fn patch_size(&self) -> usize {
        self.teachers[0].config().patch_size
    }

    pub fn teachers(&self) -> &[ViTEncoder] {
        &self.teachers
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn fingerprints(&self) -> Vec<u64> {
        self.teachers.iter().map(ViTEncoder::fingerprint).collect()
    }

    /// Bank restricted to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!(
                "teacher index {i} out of range for a bank of {}",
                self.len()
            )));
        }
        Self::new(
            indices.iter().map(|&i| self.teachers[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i].clone()).collect(),
        )
    }

    /// Token matrices `(N+1) × D`, one per teacher, for a single view.
    pub fn forward_all(&self, view: &TensorBuf) -> Result<Vec<TensorBuf>> {
        self.teachers
            .iter()
            .map(|t| t.encode(view).map(|s| s.into_tensor()))
            .collect()
    }

    /// Batched forward: `out[m][b]` is teacher `m` on view `b`.
    pub fn forward_all_batch(&self, views: &[TensorBuf]) -> Result<Vec<Vec<TensorBuf>>> {
        self.teachers
            .iter()
            .map(|t| {
                views
                    .iter()
                    .map(|v| t.encode(v).map(|s| s.into_tensor()))
                    .collect()
            })
            .collect()
    }
}

pub fn save_teacher(encoder: &ViTEncoder, label: &str, path: &Path) -> Result<()> {
    let mut enc = encoder.clone();
    enc.freeze();
    save_checkpoint(path, &encoder_checkpoint(&enc, label, DType::F64))
}

pub fn load_teacher(path: &Path) -> Result<(ViTEncoder, String)> {
    let ckpt = load_checkpoint(path)?;
    let (mut enc, label) = encoder_from_checkpoint(&ckpt)?;
    enc.freeze();
    Ok((enc, label))
}

pub fn load_bank<P: AsRef<Path>>(paths: &[P]) -> Result<TeacherBank> {
    let mut teachers = Vec::with_capacity(paths.len());
    let mut labels = Vec::with_capacity(paths.len());
    for p in paths {
        let (t, l) = load_teacher(p.as_ref())?;
        teachers.push(t);
        labels.push(l);
    }
    TeacherBank::new(teachers, labels)
}

/// Budget and objective knobs for the toy teachers.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTeacherConfig {
    pub vit: ViTConfig,
    pub epochs: usize,
    /// Leading samples of the dataset used for training.
    pub train_samples: usize,
    /// Leading samples used to measure the objective before and after.
    pub eval_samples: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    /// Regress per-patch standardized pixels instead of raw values.
    pub normalize_targets: bool,
    pub temperature: f64,
    /// View augmentation for the contrastive pretext.
    pub contrastive_augment: AugmentConfig,
}

impl Default for ToyTeacherConfig {
    fn default() -> Self {
        Self {
            vit: ViTConfig::toy_teacher(),
            epochs: 20,
            train_samples: 512,
            eval_samples: 64,
            batch_size: 32,
            base_lr: 1e-3,
            warmup_epochs: 1.0,
            weight_decay: 0.05,
            mask_ratio: 0.5,
            normalize_targets: false,
            temperature: 0.2,
            // flips swap the 45° and 135° grating classes
            contrastive_augment: AugmentConfig {
                flip_prob: 0.0,
                ..AugmentConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTeacherReport {
    pub flavor: TeacherFlavor,
    /// Objective on the fixed evaluation subset; `None` for random teachers.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Trains a toy encoder with the named objective, drops the head and freezes it.
pub fn make_toy_teacher(
    seed: u64,
    flavor: TeacherFlavor,
    data: &Dataset,
    cfg: &ToyTeacherConfig,
) -> Result<(ViTEncoder, ToyTeacherReport)> {
    let mut encoder = ViTEncoder::init(&cfg.vit, seed)?;
    let mut report = ToyTeacherReport {
        flavor,
        initial_loss: None,
        final_loss: None,
        epoch_losses: Vec::new(),
    };
    if flavor != TeacherFlavor::RandomFrozen {
        if data.is_empty() {
            return Err(Error::Dataset("toy teacher training needs a non-empty dataset".into()));
        }
        if data.height() != cfg.vit.image_size || data.width() != cfg.vit.image_size {
            return Err(Error::Shape(format!(
                "dataset is {}×{}, teacher expects {}px",
                data.height(),
                data.width(),
                cfg.vit.image_size
            )));
        }
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(Error::Config("toy teacher needs epochs and batch_size >= 1".into()));
        }
        let mut obj: Box<dyn Objective> = match flavor {
            TeacherFlavor::MaskedReconstruction => Box::new(MaskedRecon::new(&cfg.vit, cfg.mask_ratio, cfg.normalize_targets, seed)),
            TeacherFlavor::InstanceContrastive => Box::new(Contrastive {
                temperature: cfg.temperature,
                aug: cfg.contrastive_augment.clone(),
            }),
            TeacherFlavor::RandomFrozen => unreachable!(),
        };
        train_toy(&mut encoder, obj.as_mut(), data, cfg, seed, &mut report)?;
    }
    encoder.freeze();
    Ok((encoder, report))
}

/// A pretext objective over a batch of images; returns the mean loss and
/// accumulates gradients for the encoder and any head parameters.
trait Objective {
    fn head(&mut self) -> Vec<(&'static str, &mut TensorBuf)>;
    fn batch(
        &self,
        encoder: &ViTEncoder,
        images: &[TensorBuf],
        rng: &mut ChaCha8Rng,
        grads: Option<(&mut [TensorBuf], &mut [TensorBuf])>,
    ) -> Result<f64>;
}

fn train_toy(
    encoder: &mut ViTEncoder,
    obj: &mut dyn Objective,
    data: &Dataset,
    cfg: &ToyTeacherConfig,
    seed: u64,
    report: &mut ToyTeacherReport,
) -> Result<()> {
    let n = cfg.train_samples.min(data.len());
    let images: Vec<TensorBuf> = (0..n).map(|i| data.image(i)).collect();
    let eval: Vec<TensorBuf> = images[..cfg.eval_samples.min(n)].to_vec();
    let eval_seed = seed ^ 0xe7a1;
    let evaluate = |enc: &ViTEncoder, obj: &dyn Objective| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in eval.chunks(cfg.batch_size) {
            total += obj.batch(enc, chunk, &mut rng, None)? * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(total / count as f64)
    };
    report.initial_loss = Some(evaluate(encoder, obj)?);

    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = ScheduleConfig {
        base_lr: cfg.base_lr,
        warmup_epochs: cfg.warmup_epochs,
        total_epochs: cfg.epochs,
        steps_per_epoch,
        floor_lr: 0.0,
    };
    schedule.validate()?;
    let opt_cfg = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut mask: Vec<bool> = encoder.named_params().iter().map(|(n, _)| decays(n)).collect();
    mask.extend(obj.head().iter().map(|(n, _)| decays(n)));
    let shapes: Vec<TensorBuf> = encoder
        .params()
        .iter()
        .cloned()
        .chain(obj.head().into_iter().map(|(_, t)| t.clone()))
        .collect();
    let mut opt = AdamWState::new(opt_cfg, &shapes.iter().collect::<Vec<_>>());

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x7ea));
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<TensorBuf> = idx.iter().map(|&i| images[i].clone()).collect();
            let mut enc_grads: Vec<TensorBuf> = encoder.params().iter().map(|p| TensorBuf::zeros(p.shape())).collect();
            let mut head_grads: Vec<TensorBuf> = obj.head().iter().map(|(_, p)| TensorBuf::zeros(p.shape())).collect();
            let loss = obj.batch(encoder, &batch, &mut rng, Some((&mut enc_grads, &mut head_grads)))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("toy teacher loss at step {step}")));
            }
            epoch_total += loss * idx.len() as f64;
            let lr = lr_at(step, &schedule)?;
            let mut params: Vec<&mut TensorBuf> = encoder.params_mut()?.iter_mut().collect();
            let mut head = obj.head();
            params.extend(head.iter_mut().map(|(_, t)| &mut **t));
            enc_grads.extend(head_grads);
            adamw_step(&mut params, &enc_grads, &mask, &mut opt, lr)?;
            step += 1;
        }
        report.epoch_losses.push(epoch_total / n as f64);
    }
    report.final_loss = Some(evaluate(encoder, obj)?);
    Ok(())
}

fn accumulate(acc: &mut [TensorBuf], grads: &mut Gradients, vars: &[Var], scale: f64) {
    for (a, &v) in acc.iter_mut().zip(vars) {
        if let Some(g) = grads.get(v) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += scale * y;
            }
        }
    }
}

/// Regresses the pixels of masked patches from a linear head on the
/// corresponding output tokens; masked input patches are zeroed.
struct MaskedRecon {
    head_w: TensorBuf,
    head_b: TensorBuf,
    mask_ratio: f64,
    normalize: bool,
    patch_size: usize,
}

impl MaskedRecon {
    fn new(vit: &ViTConfig, mask_ratio: f64, normalize: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4ead);
        Self {
            head_w: TensorBuf::randn(&[vit.embed_dim, vit.patch_dim()], 0.02, &mut rng),
            head_b: TensorBuf::zeros(&[vit.patch_dim()]),
            mask_ratio,
            normalize,
            patch_size: vit.patch_size,
        }
    }
}

impl Objective for MaskedRecon {
    fn head(&mut self) -> Vec<(&'static str, &mut TensorBuf)> {
        vec![("head.weight", &mut self.head_w), ("head.bias", &mut self.head_b)]
    }

    fn batch(
        &self,
        encoder: &ViTEncoder,
        images: &[TensorBuf],
        rng: &mut ChaCha8Rng,
        mut grads: Option<(&mut [TensorBuf], &mut [TensorBuf])>,
    ) -> Result<f64> {
        let inv = 1.0 / images.len() as f64;
        let mut total = 0.0;
        for img in images {
            let patches = patchify(img, self.patch_size)?;
            let (n, pd) = patches.dims2()?;
            let n_mask = ((n as f64 * self.mask_ratio).round() as usize).clamp(1, n);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let mut masked = idx[..n_mask].to_vec();
            masked.sort_unstable();

            let mut input = patches.clone();
            for &r in &masked {
                input.data_mut()[r * pd..(r + 1) * pd].fill(0.0);
            }
            let mut target = TensorBuf::from_fn(&[n_mask, pd], |k| patches.data()[masked[k / pd] * pd + k % pd]);
            if self.normalize {
                for row in target.data_mut().chunks_mut(pd) {
                    let mean = row.iter().sum::<f64>() / pd as f64;
                    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / pd as f64;
                    let inv = 1.0 / (var + 1e-6).sqrt();
                    row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
                }
            }

            let train = grads.is_some();
            let mut tape = GradTape::new();
            let vars = encoder.bind(&mut tape, train);
            let hw = if train { tape.param(self.head_w.clone()) } else { tape.constant(self.head_w.clone()) };
            let hb = if train { tape.param(self.head_b.clone()) } else { tape.constant(self.head_b.clone()) };
            let x = tape.constant(input);
            let tokens = encoder.forward_patches(&mut tape, &vars, x)?;
            let sel: Vec<usize> = masked.iter().map(|r| r + 1).collect();
            let picked = tape.gather_rows(tokens, &sel)?;
            let pred = tape.matmul(picked, hw)?;
            let pred = tape.add_row_bias(pred, hb)?;
            let t = tape.constant(target);
            let loss = tape.mse(pred, t)?;
            total += tape.value(loss).data()[0] * inv;
            if let Some((enc_acc, head_acc)) = grads.as_mut() {
                let mut g = tape.backward(loss)?;
                accumulate(enc_acc, &mut g, &vars, inv);
                accumulate(head_acc, &mut g, &[hw, hb], inv);
            }
        }
        Ok(total)
    }
}

/// NT-Xent over L2-normalized class tokens of two augmented views per image.
struct Contrastive {
    temperature: f64,
    aug: AugmentConfig,
}

fn random_view(img: &TensorBuf, rng: &mut impl Rng, aug: &AugmentConfig) -> Result<TensorBuf> {
    let size = img.shape()[1];
    let (v, _) = random_resized_crop(img, rng, (aug.scale_min, aug.scale_max), size)?;
    let v = horizontal_flip(&v, rng.random_bool(aug.flip_prob));
    Ok(color_jitter(&v, rng, aug.strengths())?.0)
}

/// Loss and gradient with respect to the raw (unnormalized) embeddings.
/// Rows `2i` and `2i+1` are positives of each other.
pub(crate) fn nt_xent(h: &[Vec<f64>], tau: f64) -> (f64, Vec<Vec<f64>>) {
    let n = h.len();
    let norms: Vec<f64> = h.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)).collect();
    let z: Vec<Vec<f64>> = h.iter().zip(&norms).map(|(r, &s)| r.iter().map(|x| x / s).collect()).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pos = |i: usize| i ^ 1;

    // p[i][k]: softmax over k != i of s_ik / tau
    let mut p = vec![vec![0.0; n]; n];
    let mut loss = 0.0;
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|k| if k == i { f64::NEG_INFINITY } else { dot(&z[i], &z[k]) / tau }).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for k in 0..n {
            p[i][k] = (logits[k] - m).exp() / denom;
        }
        loss += -(logits[pos(i)] - m) + denom.ln();
    }
    loss /= n as f64;

    let d = h[0].len();
    let mut out = Vec::with_capacity(n);
    for a in 0..n {
        let mut gz = vec![0.0; d];
        for k in 0..n {
            let mut c = p[a][k] + p[k][a];
            if k == pos(a) {
                c -= 2.0;
            }
            if k != a {
                for j in 0..d {
                    gz[j] += c * z[k][j];
                }
            }
        }
        let s = 1.0 / (tau * n as f64);
        gz.iter_mut().for_each(|g| *g *= s);
        // through z = h / |h|
        let proj = dot(&gz, &z[a]);
        out.push(gz.iter().zip(&z[a]).map(|(g, zz)| (g - zz * proj) / norms[a]).collect());
    }
    (loss, out)
}

impl Objective for Contrastive {
    fn head(&mut self) -> Vec<(&'static str, &mut TensorBuf)> {
        Vec::new()
    }

    fn batch(
        &self,
        encoder: &ViTEncoder,
        images: &[TensorBuf],
        rng: &mut ChaCha8Rng,
        grads: Option<(&mut [TensorBuf], &mut [TensorBuf])>,
    ) -> Result<f64> {
        if images.len() < 2 {
            // a single image has no negatives; skip
            return Ok(0.0);
        }
        let train = grads.is_some();
        let mut tapes = Vec::with_capacity(2 * images.len());
        let mut embeds = Vec::with_capacity(2 * images.len());
        for img in images {
            for _ in 0..2 {
                let view = random_view(img, rng, &self.aug)?;
                let mut tape = GradTape::new();
                let vars = encoder.bind(&mut tape, train);
                let out = encoder.forward(&mut tape, &vars, &view)?;
                embeds.push(tape.value(out).row(0).to_vec());
                tapes.push((tape, vars, out));
            }
        }
        let (loss, g) = nt_xent(&embeds, self.temperature);
        if let Some((enc_acc, _)) = grads {
            for ((tape, vars, out), gr) in tapes.iter().zip(&g) {
                let shape = tape.shape(*out).to_vec();
                let mut seed = TensorBuf::zeros(&shape);
                seed.data_mut()[..gr.len()].copy_from_slice(gr);
                let mut grads = tape.backward_with(*out, seed)?;
                accumulate(enc_acc, &mut grads, vars, 1.0);
            }
        }
        Ok(loss)
    }
}
