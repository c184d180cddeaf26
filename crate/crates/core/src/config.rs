//! Run configuration and its flat `key=value` text form.
//!
//! ```text
//! # comment
//! student.embed_dim=16
//! teachers=teachers/toy-mim.dmtc,teachers/toy-random.dmtc
//! schedule.base_lr=0.0015
//! loss_mode=tfd+sfd
//! ```
//!
//! Keys mirror the struct fields; omitted keys keep their defaults and
//! unknown or repeated keys are rejected. The schedule's `total_epochs` and
//! `steps_per_epoch` are derived from `epochs`, `batch_size` and the dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::fusion::LossMode;
use crate::optim::{AdamWConfig, ScheduleConfig};
use crate::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.05,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub student: ViTConfig,
    pub teachers: Vec<PathBuf>,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleConfig,
    pub optim: AdamWConfig,
    pub augment: AugmentConfig,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Directory holding `train.dmtd` and `test.dmtd`.
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    /// Checkpoint interval in epochs; the final epoch is always saved.
    pub save_every: usize,
    /// Leading training samples to use; 0 means all.
    pub train_samples: usize,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    /// The desk-scale reference run.
    fn default() -> Self {
        Self {
            student: ViTConfig::micro(),
            teachers: Vec::new(),
            epochs: 50,
            batch_size: 64,
            schedule: ScheduleConfig {
                base_lr: 1.5e-4,
                warmup_epochs: 2.5,
                total_epochs: 50,
                steps_per_epoch: 1,
                floor_lr: 1e-5,
            },
            optim: AdamWConfig::default(),
            augment: AugmentConfig::default(),
            loss_mode: LossMode::TfdSfd,
            seed: 0,
            dataset: PathBuf::from("data"),
            output_dir: PathBuf::from("run"),
            save_every: 10,
            train_samples: 0,
            probe: ProbeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.student.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.save_every == 0 {
            return Err(Error::Config("save_every must be >= 1".into()));
        }
        if self.epochs > 0 {
            self.schedule_for(1)?.validate()?;
        }
        let o = &self.optim;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.probe.epochs == 0 || !(self.probe.lr > 0.0) {
            return Err(Error::Config("probe needs epochs >= 1 and lr > 0".into()));
        }
        Ok(())
    }

    /// Schedule with the derived fields filled in.
    pub fn schedule_for(&self, steps_per_epoch: usize) -> Result<ScheduleConfig> {
        let s = ScheduleConfig {
            total_epochs: self.epochs,
            steps_per_epoch,
            ..self.schedule.clone()
        };
        s.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.student;
        let a = &self.augment;
        vec![
            ("student.image_size", s.image_size.to_string()),
            ("student.patch_size", s.patch_size.to_string()),
            ("student.depth", s.depth.to_string()),
            ("student.embed_dim", s.embed_dim.to_string()),
            ("student.num_heads", s.num_heads.to_string()),
            ("student.mlp_ratio", s.mlp_ratio.to_string()),
            (
                "teachers",
                self.teachers.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            ),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("schedule.base_lr", self.schedule.base_lr.to_string()),
            ("schedule.warmup_epochs", self.schedule.warmup_epochs.to_string()),
            ("schedule.floor_lr", self.schedule.floor_lr.to_string()),
            ("optim.beta1", self.optim.beta1.to_string()),
            ("optim.beta2", self.optim.beta2.to_string()),
            ("optim.eps", self.optim.eps.to_string()),
            ("optim.weight_decay", self.optim.weight_decay.to_string()),
            ("augment.scale_min", a.scale_min.to_string()),
            ("augment.scale_max", a.scale_max.to_string()),
            ("augment.flip_prob", a.flip_prob.to_string()),
            ("augment.brightness", a.brightness.to_string()),
            ("augment.contrast", a.contrast.to_string()),
            ("augment.saturation", a.saturation.to_string()),
            ("augment.seed", a.seed.to_string()),
            ("loss_mode", self.loss_mode.to_string()),
            ("seed", self.seed.to_string()),
            ("dataset", self.dataset.display().to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("save_every", self.save_every.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("probe.epochs", self.probe.epochs.to_string()),
            ("probe.lr", self.probe.lr.to_string()),
            ("probe.weight_decay", self.probe.weight_decay.to_string()),
        ]
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), (lineno + 1, v.to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
        }
        let mut c = Self::default();
        for (k, (line, v)) in &seen {
            c.set(k, v)
                .map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
        }
        let v = value;
        match key {
            "student.image_size" => self.student.image_size = num(key, v)?,
            "student.patch_size" => self.student.patch_size = num(key, v)?,
            "student.depth" => self.student.depth = num(key, v)?,
            "student.embed_dim" => self.student.embed_dim = num(key, v)?,
            "student.num_heads" => self.student.num_heads = num(key, v)?,
            "student.mlp_ratio" => self.student.mlp_ratio = num(key, v)?,
            "teachers" => {
                self.teachers = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "epochs" => {
                self.epochs = num(key, v)?;
                self.schedule.total_epochs = self.epochs;
            }
            "batch_size" => self.batch_size = num(key, v)?,
            "schedule.base_lr" => self.schedule.base_lr = num(key, v)?,
            "schedule.warmup_epochs" => self.schedule.warmup_epochs = num(key, v)?,
            "schedule.floor_lr" => self.schedule.floor_lr = num(key, v)?,
            "optim.beta1" => self.optim.beta1 = num(key, v)?,
            "optim.beta2" => self.optim.beta2 = num(key, v)?,
            "optim.eps" => self.optim.eps = num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = num(key, v)?,
            "augment.scale_min" => self.augment.scale_min = num(key, v)?,
            "augment.scale_max" => self.augment.scale_max = num(key, v)?,
            "augment.flip_prob" => self.augment.flip_prob = num(key, v)?,
            "augment.brightness" => self.augment.brightness = num(key, v)?,
            "augment.contrast" => self.augment.contrast = num(key, v)?,
            "augment.saturation" => self.augment.saturation = num(key, v)?,
            "augment.seed" => self.augment.seed = num(key, v)?,
            "loss_mode" => self.loss_mode = v.parse().map_err(|e: Error| e.to_string())?,
            "seed" => self.seed = num(key, v)?,
            "dataset" => self.dataset = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "save_every" => self.save_every = num(key, v)?,
            "train_samples" => self.train_samples = num(key, v)?,
            "probe.epochs" => self.probe.epochs = num(key, v)?,
            "probe.lr" => self.probe.lr = num(key, v)?,
            "probe.weight_decay" => self.probe.weight_decay = num(key, v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}
