//! Command-line front end for `fusion-kd`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use fusion_distill::checkpoint::{
    encoder_from_checkpoint, inspect_bytes, vit_from_attrs, Checkpoint,
};
use fusion_distill::config::TrainConfig;
use fusion_distill::data::{gen_data, load_split};
use fusion_distill::gradcheck::GradCheck;
use fusion_distill::gradsuite::tiny_suite;
use fusion_distill::teacher::{load_bank, make_toy_teacher, save_teacher, TeacherFlavor, ToyTeacherConfig};
use fusion_distill::trainer::{
    all_subsets, linear_probe, sweep_loss_modes, sweep_teacher_combinations, train, StudentState, SweepTable,
};
use fusion_distill::vit::{param_count, ViTEncoder};
use fusion_distill::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "fusion-kd",
    version,
    about = "Multi-teacher fused-target distillation for small ViT encoders",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic labeled dataset (train.dmtd + test.dmtd) into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2048)]
        n_train: usize,
        #[arg(long, default_value_t = 512)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train toy teachers on a dataset and save them as frozen checkpoints.
    MakeTeachers {
        /// Dataset directory from gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated flavors; teacher i uses seed + i.
        #[arg(long, value_delimiter = ',', default_value = "masked-reconstruction,instance-contrastive,random-frozen")]
        flavors: Vec<String>,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 512)]
        train_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a distillation job from a config file.
    Distill {
        #[command(flatten)]
        run: RunArgs,
        /// Override the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Linear-probe accuracy of a checkpoint's encoder.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the one recorded in a train-state checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        probe_epochs: Option<usize>,
        /// Also probe a randomly initialized student of the same shape with this seed.
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one student per teacher subset and print a comparison table.
    SweepTeachers {
        #[command(flatten)]
        run: RunArgs,
        /// Subsets as `0;1;2;0,1;0,1,2` (indices into the config's teacher list); default all.
        #[arg(long)]
        subsets: Option<String>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train one student per loss mode and print a comparison table.
    SweepLosses {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference gradient suites.
    Gradcheck {
        /// Run the tiny-configuration suite.
        #[arg(long, required = true)]
        tiny: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the header, tensor table and parameter counts of a checkpoint.
    InspectCkpt {
        path: PathBuf,
        /// Accepted for uniformity; inspection is not random.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::load(&self.config)?;
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            cfg.set(k.trim(), v.trim()).map_err(Error::Config)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn parse_and_dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::InvalidArgument(format!("writing output: {e}"))
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(io_err)?
    };
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::GenData {
            out: dir,
            n_train,
            n_test,
            seed,
        } => {
            let (train, test) = gen_data(&dir, n_train, n_test, seed)?;
            say!(out, "wrote {} ({n_train} samples)", train.display());
            say!(out, "wrote {} ({n_test} samples)", test.display());
        }
        Command::MakeTeachers {
            data,
            out: dir,
            flavors,
            epochs,
            train_samples,
            seed,
        } => {
            let flavors = flavors
                .iter()
                .map(|f| f.trim().parse::<TeacherFlavor>())
                .collect::<Result<Vec<_>>>()?;
            let (train_set, _) = load_split(&data)?;
            let cfg = ToyTeacherConfig {
                epochs,
                train_samples,
                ..ToyTeacherConfig::default()
            };
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            let mut paths = Vec::new();
            for (i, flavor) in flavors.iter().enumerate() {
                let (enc, report) = make_toy_teacher(seed + i as u64, *flavor, &train_set, &cfg)?;
                let path = dir.join(format!("{}-{i}.dmtc", flavor.label()));
                save_teacher(&enc, flavor.label(), &path)?;
                match (report.initial_loss, report.final_loss) {
                    (Some(a), Some(b)) => say!(
                        out,
                        "{}: objective {a:.6} -> {b:.6} ({:.3}x), saved {}",
                        flavor.label(),
                        b / a,
                        path.display()
                    ),
                    _ => say!(out, "{}: seeded init, saved {}", flavor.label(), path.display()),
                }
                paths.push(path.display().to_string());
            }
            say!(out, "teachers={}", paths.join(","));
        }
        Command::Distill { run, output } => {
            let mut cfg = run.load()?;
            if let Some(o) = output {
                cfg.output_dir = o;
            }
            let outcome = train(&cfg)?;
            for e in &outcome.metrics.epochs {
                say!(
                    out,
                    "epoch {:>3}  loss {:.6}  tfd {:.6}  sfd {:.6}  lr {:.3e}",
                    e.epoch,
                    e.loss,
                    e.tfd,
                    e.sfd,
                    e.lr
                );
            }
            if let Some(acc) = outcome.metrics.probe_accuracy {
                say!(out, "probe accuracy {acc:.4}");
            }
            for p in &outcome.saved {
                say!(out, "saved {}", p.display());
            }
        }
        Command::Eval {
            checkpoint,
            data,
            probe_epochs,
            baseline,
            seed,
        } => {
            let ckpt = fusion_distill::checkpoint::load_checkpoint(&checkpoint)?;
            let (encoder, mut probe, dataset) = match ckpt.attr("kind") {
                Some("train-state") => {
                    let (st, cfg, _) = StudentState::from_checkpoint(&ckpt)?;
                    (st.encoder, cfg.probe, Some(cfg.dataset))
                }
                _ => (encoder_from_checkpoint(&ckpt)?.0, Default::default(), None),
            };
            let dir = data
                .or(dataset)
                .ok_or_else(|| Error::Config("no dataset given (--data)".into()))?;
            if let Some(e) = probe_epochs {
                probe.epochs = e;
            }
            let (train_set, test_set) = load_split(&dir)?;
            let acc = linear_probe(&encoder, &train_set, &test_set, &probe)?;
            say!(out, "probe accuracy {acc:.4}");
            if baseline {
                let rnd = ViTEncoder::init(encoder.config(), seed)?;
                let b = linear_probe(&rnd, &train_set, &test_set, &probe)?;
                say!(out, "random-init probe accuracy (seed {seed}) {b:.4}");
            }
        }
        Command::SweepTeachers { run, subsets, json } => {
            let cfg = run.load()?;
            let (train_set, test_set) = load_split(&cfg.dataset)?;
            let bank = load_bank(&cfg.teachers)?;
            let subsets = match subsets {
                Some(s) => parse_subsets(&s)?,
                None => all_subsets(bank.len()),
            };
            let table = sweep_teacher_combinations(&cfg, &bank, &train_set, &test_set, &subsets)?;
            emit_table(out, &table, json.as_deref())?;
        }
        Command::SweepLosses { run, json } => {
            let cfg = run.load()?;
            let (train_set, test_set) = load_split(&cfg.dataset)?;
            let bank = load_bank(&cfg.teachers)?;
            let table = sweep_loss_modes(&cfg, &bank, &train_set, &test_set)?;
            emit_table(out, &table, json.as_deref())?;
        }
        Command::Gradcheck { tiny: _, seed } => {
            let cfg = GradCheck::default();
            let results = tiny_suite(seed, cfg)?;
            let mut all = true;
            for r in &results {
                all &= r.passed;
                say!(
                    out,
                    "{:<24} entries {:>5}  max rel err {:.3e}  {}",
                    r.component,
                    r.entries,
                    r.max_rel_err,
                    if r.passed { "ok" } else { "FAIL" }
                );
            }
            say!(out, "tolerance {:.0e}: {}", cfg.tol, if all { "all passed" } else { "FAILED" });
            return Ok(if all { 0 } else { 2 });
        }
        Command::InspectCkpt { path, seed: _ } => inspect(&path, out)?,
    }
    Ok(0)
}

fn parse_subsets(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .map(str::trim)
        .filter(|g| !g.is_empty())
        .map(|g| {
            g.split(',')
                .map(|i| {
                    i.trim()
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad teacher index `{i}` in `{g}`")))
                })
                .collect()
        })
        .collect()
}

fn emit_table(out: &mut dyn Write, table: &SweepTable, json: Option<&Path>) -> Result<()> {
    write!(out, "{}", table.render()).map_err(io_err)?;
    if let Some(p) = json {
        let text = serde_json::to_string_pretty(table).expect("table serializes");
        std::fs::write(p, text + "\n").map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn inspect(path: &Path, out: &mut dyn Write) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let (version, attrs, entries) = inspect_bytes(&bytes)?;
    say!(out, "file: {}", path.display());
    say!(out, "format version: {version}");
    for (k, v) in &attrs {
        if k == "config" {
            say!(out, "attr config:");
            for line in v.lines() {
                say!(out, "    {line}");
            }
        } else {
            say!(out, "attr {k} = {v}");
        }
    }
    say!(out, "{:<48} {:<16} {:<5} {:>10}", "tensor", "shape", "dtype", "offset");
    let mut total = 0usize;
    for e in &entries {
        let n: usize = e.shape.iter().product();
        total += n;
        say!(
            out,
            "{:<48} {:<16} {:<5} {:>10}",
            e.name,
            format!("{:?}", e.shape),
            e.dtype.as_str(),
            e.offset
        );
    }
    say!(out, "tensors: {}", entries.len());
    say!(out, "total scalars: {total}");

    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if attrs.contains_key("vit.image_size") {
        let config = vit_from_attrs("vit", &ckpt)?;
        let prefix = attrs.get("encoder_prefix").map(String::as_str).unwrap_or("");
        let expected = param_count(&config);
        let names: Vec<String> = config
            .param_shapes()
            .into_iter()
            .map(|(n, _)| format!("{prefix}{n}"))
            .collect();
        let found: usize = names.iter().filter_map(|n| ckpt.get(n)).map(|t| t.len()).sum();
        say!(
            out,
            "encoder parameters: {found} (param_count {expected}: {})",
            if found == expected { "match" } else { "MISMATCH" }
        );
    }
    Ok(())
}
