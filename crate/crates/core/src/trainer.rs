//! Distillation loop, checkpoints, linear probe and ablation sweeps.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig};
use crate::checkpoint::{encoder_from_prefixed, save_checkpoint, vit_attrs, Checkpoint, DType};
use crate::config::{ProbeConfig, TrainConfig};
use crate::data::{load_split, Dataset};
use crate::error::{CheckpointError, Error, Result};
use crate::fusion::{adapter_on_tape, distill_loss_on_tape, fuse_tokens, Adapter, LossMode};
use crate::optim::{adamw_step, decays, lr_at, AdamWConfig, AdamWState};
use crate::tape::GradTape;
use crate::teacher::{load_bank, TeacherBank};
use crate::tensor::TensorBuf;
use crate::vit::{ViTConfig, ViTEncoder};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.dmtc";

const STUDENT_PREFIX: &str = "student.";
const ADAPTER_NAMES: [&str; 2] = ["adapter.weight", "adapter.bias"];

/// Student encoder, adapter and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentState {
    pub encoder: ViTEncoder,
    pub adapter: Adapter,
    pub opt: AdamWState,
}

impl StudentState {
    pub fn new(encoder: ViTEncoder, adapter: Adapter, optim: AdamWConfig) -> Result<Self> {
        if encoder.is_frozen() {
            return Err(Error::InvalidArgument("student encoder must not be frozen".into()));
        }
        if adapter.in_dim() != encoder.config().embed_dim {
            return Err(Error::Shape(format!(
                "adapter input {} vs student width {}",
                adapter.in_dim(),
                encoder.config().embed_dim
            )));
        }
        let mut refs: Vec<&TensorBuf> = encoder.params().iter().collect();
        refs.extend(adapter.params());
        let opt = AdamWState::new(optim, &refs);
        Ok(Self { encoder, adapter, opt })
    }

    /// Fresh student of width `config.embed_dim` projecting to `teacher_dim`.
    pub fn init(config: &ViTConfig, teacher_dim: usize, seed: u64, optim: AdamWConfig) -> Result<Self> {
        let encoder = ViTEncoder::init(config, seed)?;
        let adapter = Adapter::init(config.embed_dim, teacher_dim, seed ^ 0xada9_7e55);
        Self::new(encoder, adapter, optim)
    }

    /// Checkpoint names of every trainable tensor, encoder first.
    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .encoder
            .config()
            .param_shapes()
            .into_iter()
            .map(|(n, _)| format!("{STUDENT_PREFIX}{n}"))
            .collect();
        names.extend(ADAPTER_NAMES.iter().map(|s| s.to_string()));
        names
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        self.param_names()
            .iter()
            .map(|n| decays(n.strip_prefix(STUDENT_PREFIX).unwrap_or(n)))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.adapter.weight.len() + self.adapter.bias.len()
    }

    pub fn to_checkpoint(&self, config: &TrainConfig, epoch: usize) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        let attrs = &mut ckpt.attrs;
        attrs.insert("kind".into(), "train-state".into());
        attrs.insert("config".into(), config.to_text());
        attrs.insert("seed".into(), config.seed.to_string());
        attrs.insert("epoch".into(), epoch.to_string());
        attrs.insert("step".into(), self.opt.step.to_string());
        attrs.insert("encoder_prefix".into(), STUDENT_PREFIX.into());
        vit_attrs("vit", self.encoder.config(), attrs);
        let names = self.param_names();
        let mut params: Vec<&TensorBuf> = self.encoder.params().iter().collect();
        params.extend(self.adapter.params());
        for (n, p) in names.iter().zip(&params) {
            ckpt.push(n.clone(), (*p).clone(), DType::F64);
        }
        for (n, m) in names.iter().zip(&self.opt.m) {
            ckpt.push(format!("opt.m.{n}"), m.clone(), DType::F64);
        }
        for (n, v) in names.iter().zip(&self.opt.v) {
            ckpt.push(format!("opt.v.{n}"), v.clone(), DType::F64);
        }
        ckpt
    }

    /// Restores the state, the echoed run config and the epoch counter.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, TrainConfig, usize)> {
        if ckpt.attr("kind") != Some("train-state") {
            return Err(CheckpointError::InconsistentMetadata(format!(
                "expected a train-state checkpoint, found kind {:?}",
                ckpt.attr("kind")
            ))
            .into());
        }
        let config = TrainConfig::parse(ckpt.require_attr("config")?)?;
        let int = |k: &str| -> Result<u64> {
            ckpt.require_attr(k)?.parse().map_err(|_| {
                CheckpointError::InconsistentMetadata(format!("attribute `{k}` is not an integer")).into()
            })
        };
        let epoch = int("epoch")? as usize;
        let step = int("step")?;
        let encoder = encoder_from_prefixed(STUDENT_PREFIX, &config.student, ckpt)?;
        let fetch = |n: &str| -> Result<TensorBuf> {
            ckpt.get(n)
                .cloned()
                .ok_or_else(|| CheckpointError::InconsistentMetadata(format!("missing tensor `{n}`")).into())
        };
        let adapter = Adapter::new(fetch(ADAPTER_NAMES[0])?, fetch(ADAPTER_NAMES[1])?)
            .map_err(|e| CheckpointError::InconsistentMetadata(e.to_string()))?;
        let mut state = Self::new(encoder, adapter, config.optim)?;
        let names = state.param_names();
        for (i, n) in names.iter().enumerate() {
            state.opt.m[i] = fetch(&format!("opt.m.{n}"))?;
            state.opt.v[i] = fetch(&format!("opt.v.{n}"))?;
        }
        state.opt.step = step;
        Ok((state, config, epoch))
    }
}

/// One batch of training samples, sorted by ascending sample index.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    /// Global batch counter, reported on failure.
    pub index: usize,
    pub epoch: usize,
    pub samples: Vec<(usize, &'a TensorBuf)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Objective for the active loss mode, batch mean.
    pub total: f64,
    /// Token term (KL, or token MSE in `mse` mode); 0 when unused.
    pub tfd: f64,
    /// Spatial term; 0 when unused.
    pub sfd: f64,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-sample augmentation stream: independent of batch composition and
/// evaluation order.
pub fn view_rng(run_seed: u64, augment_seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    let key = splitmix(splitmix(run_seed) ^ augment_seed.rotate_left(17) ^ sample as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(epoch as u64);
    rng
}

/// Views → teacher fusion → student + adapter → loss → backward → one AdamW update.
pub fn distill_step(
    batch: &Batch<'_>,
    bank: &TeacherBank,
    state: &mut StudentState,
    lr: f64,
    loss_mode: LossMode,
    augment: &AugmentConfig,
    run_seed: u64,
) -> Result<StepLosses> {
    if batch.samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if state.adapter.out_dim() != bank.dim() {
        return Err(Error::Shape(format!(
            "adapter output {} vs teacher width {}",
            state.adapter.out_dim(),
            bank.dim()
        )));
    }
    let inv = 1.0 / batch.samples.len() as f64;
    let mut acc: Vec<TensorBuf> = state
        .encoder
        .params()
        .iter()
        .chain(state.adapter.params())
        .map(|p| TensorBuf::zeros(p.shape()))
        .collect();
    let mut out = StepLosses::default();

    for &(sample, image) in &batch.samples {
        let mut rng = view_rng(run_seed, augment.seed, batch.epoch, sample);
        let views = make_views(image, &mut rng, augment)?;
        let teacher_tokens = bank.forward_all(&views.teacher_view)?;
        let fused = fuse_tokens(&teacher_tokens.iter().collect::<Vec<_>>())?;

        let mut tape = GradTape::new();
        let mut vars = state.encoder.bind(&mut tape, true);
        let adapter_vars = state.adapter.bind(&mut tape);
        let recorded = state
            .encoder
            .forward(&mut tape, &vars, &views.student_view)
            .and_then(|tokens| adapter_on_tape(&mut tape, tokens, adapter_vars))
            .and_then(|projected| distill_loss_on_tape(&mut tape, projected, &fused, loss_mode));
        vars.extend(adapter_vars);

        let (lv, total, tfd, sfd) = match recorded {
            Ok(lv) => {
                let value = |v: Option<crate::tape::Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
                (Some(lv), value(Some(lv.objective)), value(lv.token), value(lv.spatial))
            }
            // a primitive refused a non-finite intermediate
            Err(Error::NonFinite(_)) => (None, f64::NAN, f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        let lv = match lv {
            Some(lv) if total.is_finite() && tfd.is_finite() && sfd.is_finite() => lv,
            _ => {
                log::error!(
                    "non-finite loss: batch {} sample {sample} epoch {} tfd={tfd} sfd={sfd}",
                    batch.index,
                    batch.epoch
                );
                return Err(Error::NonFiniteLoss {
                    batch: batch.index,
                    sample,
                    tfd,
                    sfd,
                });
            }
        };
        out.total += total * inv;
        out.tfd += tfd * inv;
        out.sfd += sfd * inv;

        let grads = tape.backward(lv.objective)?;
        for (a, &v) in acc.iter_mut().zip(&vars) {
            if let Some(g) = grads.get(v) {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += inv * y;
                }
            }
        }
    }

    let mask = state.decay_mask();
    let StudentState { encoder, adapter, opt } = state;
    let mut params: Vec<&mut TensorBuf> = encoder.params_mut()?.iter_mut().collect();
    params.extend(adapter.params_mut());
    adamw_step(&mut params, &acc, &mask, opt, lr)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    pub loss: f64,
    pub tfd: f64,
    pub sfd: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    /// Seconds per epoch; kept apart from the deterministic records.
    pub wall_times: Vec<f64>,
    pub probe_accuracy: Option<f64>,
    pub teacher_fingerprints: Vec<u64>,
}

impl RunMetrics {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: StudentState,
    pub checkpoint: Checkpoint,
    pub metrics: RunMetrics,
    /// Checkpoint files written, in order.
    pub saved: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Summary<'a> {
    seed: u64,
    loss_mode: &'a str,
    teachers: &'a [String],
    epochs: usize,
    steps: u64,
    first_epoch_loss: Option<f64>,
    final_loss: Option<f64>,
    probe_accuracy: Option<f64>,
}

/// Loads the dataset and teacher bank named in `config` and trains,
/// writing checkpoints and metrics under `config.output_dir`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_set, test_set) = load_split(&config.dataset)?;
    if config.teachers.is_empty() {
        return Err(Error::Config("no teacher checkpoints given".into()));
    }
    let bank = load_bank(&config.teachers)?;
    run_training(config, &bank, &train_set, Some(&test_set), Some(&config.output_dir))
}

fn write_line(file: &mut File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}

/// Training on in-memory data. With `output` set, writes checkpoints
/// every `save_every` epochs plus the final one, `metrics.jsonl`,
/// `timing.jsonl` and `summary.json`.
pub fn run_training(
    config: &TrainConfig,
    bank: &TeacherBank,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    output: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.student.image_size != bank.image_size() {
        return Err(Error::Config(format!(
            "student input {}px differs from teacher input {}px",
            config.student.image_size,
            bank.image_size()
        )));
    }
    if train_set.height() != config.student.image_size || train_set.width() != config.student.image_size {
        return Err(Error::Dataset(format!(
            "images are {}×{}, student expects {}px",
            train_set.height(),
            train_set.width(),
            config.student.image_size
        )));
    }
    let n = match config.train_samples {
        0 => train_set.len(),
        k => k.min(train_set.len()),
    };
    if n == 0 {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let images: Vec<TensorBuf> = (0..n).map(|i| train_set.image(i)).collect();
    let steps_per_epoch = n.div_ceil(config.batch_size);

    let mut state = StudentState::init(&config.student, bank.dim(), config.seed, config.optim)?;
    let fingerprints = bank.fingerprints();
    let mut metrics = RunMetrics {
        teacher_fingerprints: fingerprints.clone(),
        ..RunMetrics::default()
    };
    let mut saved = Vec::new();

    let mut files = match output {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let mp = dir.join(METRICS_FILE);
            let tp = dir.join(TIMING_FILE);
            let m = File::create(&mp).map_err(|e| Error::io(&mp, e))?;
            let t = File::create(&tp).map_err(|e| Error::io(&tp, e))?;
            Some((dir.to_path_buf(), (m, mp), (t, tp)))
        }
        None => None,
    };

    if config.epochs > 0 {
        let schedule = config.schedule_for(steps_per_epoch)?;
        let mut order_rng = ChaCha8Rng::seed_from_u64(splitmix(config.seed ^ 0x0bde_c0de));
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0usize;
        for epoch in 1..=config.epochs {
            let started = Instant::now();
            order.shuffle(&mut order_rng);
            let lr0 = lr_at(step, &schedule)?;
            let (mut loss, mut tfd, mut sfd) = (0.0, 0.0, 0.0);
            for chunk in order.chunks(config.batch_size) {
                let mut idx = chunk.to_vec();
                idx.sort_unstable();
                let batch = Batch {
                    index: step,
                    epoch,
                    samples: idx.iter().map(|&i| (i, &images[i])).collect(),
                };
                let lr = lr_at(step, &schedule)?;
                let l = distill_step(&batch, bank, &mut state, lr, config.loss_mode, &config.augment, config.seed)?;
                let w = idx.len() as f64;
                loss += l.total * w;
                tfd += l.tfd * w;
                sfd += l.sfd * w;
                step += 1;
            }
            let em = EpochMetrics {
                epoch,
                step: state.opt.step,
                loss: loss / n as f64,
                tfd: tfd / n as f64,
                sfd: sfd / n as f64,
                lr: lr0,
            };
            let secs = started.elapsed().as_secs_f64();
            log::info!(
                "epoch {epoch}/{}: loss {:.6} tfd {:.6} sfd {:.6} lr {:.3e} ({secs:.1}s)",
                config.epochs,
                em.loss,
                em.tfd,
                em.sfd,
                em.lr
            );
            if let Some((dir, (mf, mp), (tf, tp))) = files.as_mut() {
                let line = serde_json::to_string(&em).expect("metrics serialize");
                write_line(mf, mp, &line)?;
                write_line(tf, tp, &format!("{{\"epoch\":{epoch},\"seconds\":{secs}}}"))?;
                if epoch % config.save_every == 0 || epoch == config.epochs {
                    let p = dir.join(format!("checkpoint-{epoch:04}.dmtc"));
                    save_checkpoint(&p, &state.to_checkpoint(config, epoch))?;
                    saved.push(p);
                }
            }
            metrics.epochs.push(em);
            metrics.wall_times.push(secs);
        }
        if bank.fingerprints() != fingerprints {
            return Err(Error::InvalidArgument("teacher parameters changed during training".into()));
        }
        if let Some(test) = test_set {
            metrics.probe_accuracy = Some(linear_probe(&state.encoder, train_set, test, &config.probe)?);
        }
    }

    let checkpoint = state.to_checkpoint(config, config.epochs);
    if let Some((dir, _, _)) = files {
        let p = dir.join(FINAL_CHECKPOINT);
        save_checkpoint(&p, &checkpoint)?;
        saved.push(p);
        let summary = Summary {
            seed: config.seed,
            loss_mode: config.loss_mode.as_str(),
            teachers: bank.labels(),
            epochs: config.epochs,
            steps: state.opt.step,
            first_epoch_loss: metrics.first_loss(),
            final_loss: metrics.final_loss(),
            probe_accuracy: metrics.probe_accuracy,
        };
        let sp = dir.join(SUMMARY_FILE);
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(&sp, text + "\n").map_err(|e| Error::io(&sp, e))?;
    }
    Ok(TrainOutcome {
        state,
        checkpoint,
        metrics,
        saved,
    })
}

/// Final-LN class tokens of every image.
pub fn class_token_features(encoder: &ViTEncoder, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..data.len())
        .map(|i| Ok(encoder.encode(&data.image(i))?.class_token().to_vec()))
        .collect()
}

/// Trains a softmax-regression head on frozen class tokens and returns
/// held-out accuracy.
pub fn linear_probe(encoder: &ViTEncoder, train: &Dataset, test: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    let tx = class_token_features(encoder, train)?;
    let vx = class_token_features(encoder, test)?;
    let ty: Vec<usize> = (0..train.len()).map(|i| train.label(i)).collect();
    let vy: Vec<usize> = (0..test.len()).map(|i| test.label(i)).collect();
    fit_linear_probe(&tx, &ty, &vx, &vy, cfg)
}

/// Features are standardized with training statistics, then a linear
/// classifier is fit by full-batch AdamW on the mean cross-entropy.
pub fn fit_linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::Shape("probe features and labels differ in length".into()));
    }
    if train_x.is_empty() || test_x.is_empty() {
        return Err(Error::Dataset("probe needs non-empty train and test sets".into()));
    }
    let mut distinct = train_y.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Dataset(format!(
            "linear probe needs at least two classes, training labels have {}",
            distinct.len()
        )));
    }
    let d = train_x[0].len();
    if d == 0 || train_x.iter().chain(test_x).any(|r| r.len() != d) {
        return Err(Error::Shape("probe feature rows differ in width".into()));
    }
    let k = train_y.iter().chain(test_y).max().unwrap() + 1;
    let n = train_x.len() as f64;

    let mut mean = vec![0.0; d];
    for r in train_x {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let mut std = vec![0.0; d];
    for r in train_x {
        for j in 0..d {
            std[j] += (r[j] - mean[j]).powi(2) / n;
        }
    }
    let std: Vec<f64> = std.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let norm = |r: &[f64]| -> Vec<f64> { (0..d).map(|j| (r[j] - mean[j]) / std[j]).collect() };
    let xs: Vec<Vec<f64>> = train_x.iter().map(|r| norm(r)).collect();

    let mut w = TensorBuf::zeros(&[d, k]);
    let mut b = TensorBuf::zeros(&[k]);
    let mut opt = AdamWState::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &[&w, &b],
    );
    let logits = |w: &TensorBuf, b: &TensorBuf, x: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|c| b.data()[c] + (0..d).map(|j| x[j] * w.data()[j * k + c]).sum::<f64>())
            .collect()
    };
    for _ in 0..cfg.epochs {
        let mut gw = TensorBuf::zeros(&[d, k]);
        let mut gb = TensorBuf::zeros(&[k]);
        for (x, &y) in xs.iter().zip(train_y) {
            let p = crate::math::softmax(&logits(&w, &b, x))?;
            for c in 0..k {
                let delta = (p[c] - if c == y { 1.0 } else { 0.0 }) / n;
                gb.data_mut()[c] += delta;
                for j in 0..d {
                    gw.data_mut()[j * k + c] += delta * x[j];
                }
            }
        }
        adamw_step(&mut [&mut w, &mut b], &[gw, gb], &[true, false], &mut opt, cfg.lr)?;
    }

    let correct = test_x
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            let l = logits(&w, &b, &norm(x));
            let best = (0..k).fold(0, |bi, c| if l[c] > l[bi] { c } else { bi });
            best == y
        })
        .count();
    Ok(correct as f64 / test_x.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub name: String,
    pub teachers: Vec<String>,
    pub loss_mode: String,
    pub first_loss: f64,
    pub final_loss: f64,
    pub probe_accuracy: f64,
    /// Probe accuracy minus the delta reference, in accuracy units.
    pub delta: f64,
    pub is_reference: bool,
    pub is_delta_base: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub title: String,
    pub budget: String,
    /// What the delta column is measured against.
    pub delta_base: String,
    pub rows: Vec<SweepRow>,
    pub notes: Vec<String>,
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn signed_pct(x: f64) -> String {
    let v = 100.0 * x;
    // avoid "-0.0"
    if v.abs() < 0.05 {
        "+0.0".to_string()
    } else {
        format!("{v:+.1}")
    }
}

impl SweepTable {
    pub fn row(&self, name: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Plain-text table; accuracy in percent with deltas in parentheses.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let _ = writeln!(out, "budget: {}", self.budget);
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(8);
        let _ = writeln!(
            out,
            "| {:<name_w$} | {:>10} | {:>10} | {:>16} | {:<9} |",
            "run", "loss@1", "loss@end", "probe acc (Δ)", "role"
        );
        let dash = |n: usize| "-".repeat(n + 2);
        let _ = writeln!(out, "|{}|{}|{}|{}|{}|", dash(name_w), dash(10), dash(10), dash(16), dash(9));
        for r in &self.rows {
            let role = match (r.is_reference, r.is_delta_base) {
                (true, true) => "reference*",
                (true, false) => "reference",
                (false, true) => "Δ-base",
                _ => "",
            };
            let acc = format!("{} ({})", pct(r.probe_accuracy), signed_pct(r.delta));
            let _ = writeln!(
                out,
                "| {:<name_w$} | {:>10.6} | {:>10.6} | {:>16} | {:<9} |",
                r.name, r.first_loss, r.final_loss, acc, role
            );
        }
        let _ = writeln!(out, "Δ = probe accuracy minus {}", self.delta_base);
        for n in &self.notes {
            let _ = writeln!(out, "{n}");
        }
        out
    }
}

fn budget_label(config: &TrainConfig, train: &Dataset, bank: &TeacherBank) -> String {
    let samples = match config.train_samples {
        0 => train.len(),
        k => k.min(train.len()),
    };
    format!(
        "desk scale, {} epochs × {} samples, batch {}, student D={} L={}, teachers D={} ({}px); not an ImageNet-scale result",
        config.epochs,
        samples,
        config.batch_size,
        config.student.embed_dim,
        config.student.depth,
        bank.dim(),
        config.student.image_size
    )
}

fn sweep_run(
    config: &TrainConfig,
    bank: &TeacherBank,
    train: &Dataset,
    test: &Dataset,
    name: String,
) -> Result<SweepRow> {
    let out = run_training(config, bank, train, Some(test), None)?;
    let m = &out.metrics;
    log::info!("sweep run {name}: final loss {:?}, probe {:?}", m.final_loss(), m.probe_accuracy);
    Ok(SweepRow {
        name,
        teachers: bank.labels().to_vec(),
        loss_mode: config.loss_mode.to_string(),
        first_loss: m.first_loss().unwrap_or(f64::NAN),
        final_loss: m.final_loss().unwrap_or(f64::NAN),
        probe_accuracy: m.probe_accuracy.unwrap_or(f64::NAN),
        delta: 0.0,
        is_reference: false,
        is_delta_base: false,
    })
}

/// All non-empty subsets of `0..m` ordered by size, then lexicographically.
pub fn all_subsets(m: usize) -> Vec<Vec<usize>> {
    let mut subsets: Vec<Vec<usize>> = (1..1u32 << m)
        .map(|mask| (0..m).filter(|&i| mask & (1 << i) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    subsets
}

/// Trains one student per teacher subset at a fixed seed and budget.
/// Deltas are against the best single-teacher row; the full-bank row is
/// flagged as the reference.
pub fn sweep_teacher_combinations(
    config: &TrainConfig,
    bank: &TeacherBank,
    train: &Dataset,
    test: &Dataset,
    subsets: &[Vec<usize>],
) -> Result<SweepTable> {
    if subsets.is_empty() || subsets.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("teacher subsets must be non-empty".into()));
    }
    if config.epochs == 0 {
        return Err(Error::Config("sweeps need epochs >= 1".into()));
    }
    let mut rows = Vec::with_capacity(subsets.len());
    for s in subsets {
        let sub = bank.subset(s)?;
        let name = sub.labels().join("+");
        let mut row = sweep_run(config, &sub, train, test, name)?;
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        row.is_reference = sorted.len() == bank.len();
        rows.push(row);
    }
    let singles: Vec<usize> = (0..rows.len()).filter(|&i| subsets[i].len() == 1).collect();
    let base = singles
        .iter()
        .copied()
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if rows[b].probe_accuracy >= rows[i].probe_accuracy => Some(b),
            _ => Some(i),
        })
        .unwrap_or(0);
    let base_acc = rows[base].probe_accuracy;
    rows[base].is_delta_base = true;
    for r in &mut rows {
        r.delta = r.probe_accuracy - base_acc;
    }
    let delta_base = if singles.is_empty() {
        format!("the first row ({})", rows[base].name)
    } else {
        format!("the best single teacher ({})", rows[base].name)
    };
    Ok(SweepTable {
        title: "teacher combinations".into(),
        budget: budget_label(config, train, bank),
        delta_base,
        rows,
        notes: vec!["reference = full teacher bank".into()],
    })
}

/// Trains one student per loss mode at a fixed seed, budget and bank.
/// Deltas are against `tfd+sfd`.
pub fn sweep_loss_modes(config: &TrainConfig, bank: &TeacherBank, train: &Dataset, test: &Dataset) -> Result<SweepTable> {
    if config.epochs == 0 {
        return Err(Error::Config("sweeps need epochs >= 1".into()));
    }
    let mut rows = Vec::with_capacity(LossMode::ALL.len());
    for mode in LossMode::ALL {
        let cfg = TrainConfig {
            loss_mode: mode,
            ..config.clone()
        };
        let mut row = sweep_run(&cfg, bank, train, test, mode.to_string())?;
        row.is_reference = mode == LossMode::TfdSfd;
        row.is_delta_base = row.is_reference;
        rows.push(row);
    }
    let base = rows.iter().find(|r| r.is_reference).unwrap().probe_accuracy;
    for r in &mut rows {
        r.delta = r.probe_accuracy - base;
    }
    let acc = |m: LossMode| rows.iter().find(|r| r.loss_mode == m.as_str()).unwrap().probe_accuracy;
    let holds = acc(LossMode::TfdSfd) >= acc(LossMode::Tfd).max(acc(LossMode::Sfd));
    let notes = vec![
        format!(
            "observed: tfd+sfd >= max(tfd, sfd) on probe accuracy: {} ({} vs {} / {}); reported only, toy-scale margins are within noise",
            if holds { "yes" } else { "no" },
            pct(acc(LossMode::TfdSfd)),
            pct(acc(LossMode::Tfd)),
            pct(acc(LossMode::Sfd))
        ),
        "loss columns are not comparable across modes; mse rows report squared error".into(),
    ];
    Ok(SweepTable {
        title: "distillation losses".into(),
        budget: budget_label(config, train, bank),
        delta_base: "tfd+sfd".into(),
        rows,
        notes,
    })
}

impl SweepTable {
    /// Whether the combined loss matched or beat both single terms; only
    /// meaningful for loss-mode tables.
    pub fn combined_beats_single_terms(&self) -> Option<bool> {
        let acc = |n: &str| self.row(n).map(|r| r.probe_accuracy);
        Some(acc("tfd+sfd")? >= acc("tfd")?.max(acc("sfd")?))
    }
}
