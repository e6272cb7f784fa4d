//! Command-line entry points.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use paed_core::evaluation::{detect_recording, evaluate_network};
use paed_core::features::{segment_stream, SegmentMode};
use paed_core::model::{HeadKind, Network};
use paed_core::training::{train_run_with, EpochLog};
use paed_core::{Precision, Real};

use crate::config::RunConfig;
use crate::datasets::{self, Split};
use crate::error::{Error, Result};
use crate::{audio, checkpoint, features, reports};

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(
    name = "paed",
    version,
    about = "Polyphonic audio event detection with attention-based multi-task networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// output directory, created if missing
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a generated corpus.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// output directory for the checkpoint, log and config
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split of a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write detected events of a recording as annotation text.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the attention masks of one task and level for a segment.
    AttnDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// 1-based task id
        #[arg(long)]
        task: usize,
        /// 1-based block level
        #[arg(long)]
        level: usize,
        /// 1-based segment index
        #[arg(long, default_value_t = 1)]
        segment: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Configuration sources shared by `gen` and `train`. Precedence from low
/// to high: defaults, `--config` file, `PAED_*` environment, flags.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// override one key, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve<I: IntoIterator<Item = (String, String)>>(&self, env: I) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_env(env)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::usage(format!("--set {o}: {e}")))?;
        }
        Ok(cfg)
    }
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split `{s}` (train, val or test)"))
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn main_with<A, T, E>(args: A, env: E) -> u8
where
    A: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    E: IntoIterator<Item = (String, String)>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command, env) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run<E: IntoIterator<Item = (String, String)>>(command: Command, env: E) -> Result<()> {
    match command {
        Command::Gen { config, out } => cmd_gen(&config.resolve(env)?, &out),
        Command::Train {
            config,
            corpus,
            out,
        } => cmd_train(&config.resolve(env)?, &corpus, &out),
        Command::Eval {
            checkpoint,
            corpus,
            split,
            out,
        } => cmd_eval(&checkpoint, &corpus, split, &out),
        Command::Predict {
            checkpoint,
            wav,
            out,
        } => cmd_predict(&checkpoint, &wav, &out),
        Command::AttnDump {
            checkpoint,
            wav,
            task,
            level,
            segment,
            out,
        } => cmd_attn_dump(&checkpoint, &wav, task, level, segment, &out),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.corpus_spec()?;
    let corpus = datasets::synth_generate(&spec)?;
    create_dir(out)?;
    datasets::write_corpus(out, &corpus, &cfg.echo())?;
    write(&out.join(CONFIG_FILE), cfg.echo())?;
    let [train, val, test] = Split::ALL.map(|s| corpus.split(s).len());
    println!(
        "wrote {train} train, {val} val and {test} test recordings to {}",
        out.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<()> {
    match cfg.precision {
        Precision::High => train_as::<f64>(cfg, corpus, out),
        Precision::Fast => train_as::<f32>(cfg, corpus, out),
    }
}

fn train_as<S: Real>(cfg: &RunConfig, corpus: &Path, out: &Path) -> Result<()> {
    let model = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let set = cfg.category_set()?;
    let train = datasets::load_split::<S>(corpus, Split::Train, &set)?;
    let val = datasets::load_split::<S>(corpus, Split::Val, &set)?;
    let mut net = Network::<S>::new(model, cfg.seed)?;
    let outcome = train_run_with(&mut net, &train, &val, &train_cfg, |e: &EpochLog| {
        log::info!(
            "epoch {} step {} train loss {:.4} val micro F1 {:.4}",
            e.epoch,
            e.step,
            e.train_loss,
            e.val_micro_f1
        )
    })?;
    for name in &outcome.skipped {
        log::warn!("{name} is shorter than one segment and was not trained on");
    }
    create_dir(out)?;
    checkpoint::save(&out.join(CHECKPOINT_FILE), cfg, &outcome.best)?;
    write(
        &out.join(TRAIN_LOG_FILE),
        reports::train_log_csv(&outcome.log),
    )?;
    write(&out.join(CONFIG_FILE), cfg.echo())?;
    let last = outcome.log.last().map_or(0.0, |e| e.val_micro_f1);
    let best = outcome.log[outcome.best_epoch - 1].val_micro_f1;
    println!("final validation micro F1 {last:.4}");
    println!(
        "best validation micro F1 {best:.4} (epoch {}, saved)",
        outcome.best_epoch
    );
    Ok(())
}

/// Raw checkpoint contents, before choosing the working precision.
struct Opened {
    cfg: RunConfig,
    records: checkpoint::Records,
    path: PathBuf,
}

impl Opened {
    fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (cfg, records) = checkpoint::decode(&bytes, path)?;
        Ok(Self {
            cfg,
            records,
            path: path.to_path_buf(),
        })
    }

    fn network<S: Real>(&self) -> Result<Network<S>> {
        checkpoint::restore(&self.cfg, &self.records, &self.path)
    }
}

pub fn cmd_eval(ckpt: &Path, corpus: &Path, split: Split, out: &Path) -> Result<()> {
    let opened = Opened::read(ckpt)?;
    match opened.cfg.precision {
        Precision::High => eval_as::<f64>(&opened, corpus, split, out),
        Precision::Fast => eval_as::<f32>(&opened, corpus, split, out),
    }
}

fn eval_as<S: Real>(opened: &Opened, corpus: &Path, split: Split, out: &Path) -> Result<()> {
    let cfg = &opened.cfg;
    let net = opened.network::<S>()?;
    let set = cfg.category_set()?;
    let recs = datasets::load_split::<S>(corpus, split, &set)?;
    if recs.is_empty() {
        return Err(Error::Data(format!(
            "{} split of {} is empty",
            split.name(),
            corpus.display()
        )));
    }
    let report = evaluate_network(&net, &recs, cfg.threshold)?;
    create_dir(out)?;
    write(
        &out.join("per_class.csv"),
        reports::per_class_csv(&report, &set),
    )?;
    write(&out.join("by_degree.csv"), reports::by_degree_csv(&report))?;
    write(&out.join(CONFIG_FILE), cfg.echo())?;
    println!(
        "{}: macro F1 {:.4} (average), micro F1 {:.4} (overall), {} frames",
        split.name(),
        report.macro_f1,
        report.micro_f1(),
        report.frames
    );
    Ok(())
}

/// Sibling file holding the configuration echo of a `predict` output.
pub fn predict_config_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config");
    out.with_file_name(name)
}

pub fn cmd_predict(ckpt: &Path, wav: &Path, out: &Path) -> Result<()> {
    let opened = Opened::read(ckpt)?;
    let labels = match opened.cfg.precision {
        Precision::High => detect_as::<f64>(&opened, wav)?,
        Precision::Fast => detect_as::<f32>(&opened, wav)?,
    };
    let set = opened.cfg.category_set()?;
    let (hop, frame_len) = (features::HOP as f64, features::FRAME_LEN as f64);
    let sr = f64::from(features::SAMPLE_RATE);
    let events = datasets::merge_frames(&labels, &set, hop / sr, frame_len / sr);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    datasets::write_annotations(out, &events)?;
    write(&predict_config_path(out), opened.cfg.echo())?;
    println!("{} events written to {}", events.len(), out.display());
    Ok(())
}

fn read_features<S: Real>(wav: &Path) -> Result<paed_core::features::Spectrogram<S>> {
    let samples = audio::read_wav(wav)?;
    let spec = features::log_mel(&samples, features::SAMPLE_RATE).map_err(|e| match e {
        Error::Data(m) => Error::format(wav, None, m),
        e => e,
    })?;
    datasets::cast_spectrogram(&spec)
}

fn detect_as<S: Real>(
    opened: &Opened,
    wav: &Path,
) -> Result<paed_core::labelspace::FrameLabelMatrix> {
    let net = opened.network::<S>()?;
    let spec = read_features::<S>(wav)?;
    Ok(detect_recording(&net, &spec, opened.cfg.threshold)?)
}

pub fn cmd_attn_dump(
    ckpt: &Path,
    wav: &Path,
    task: usize,
    level: usize,
    segment: usize,
    out: &Path,
) -> Result<()> {
    let opened = Opened::read(ckpt)?;
    let cfg = &opened.cfg;
    let tasks = match cfg.model_config()?.head {
        HeadKind::MultiTask(d) => d.tasks(),
        HeadKind::Baseline { .. } => {
            return Err(Error::Data(format!(
                "{} is a baseline checkpoint and has no attention masks",
                ckpt.display()
            )))
        }
    };
    if !(1..=tasks).contains(&task) {
        return Err(Error::usage(format!(
            "--task must be in 1..={tasks}, got {task}"
        )));
    }
    let levels = cfg.filters.len();
    if !(1..=levels).contains(&level) {
        return Err(Error::usage(format!(
            "--level must be in 1..={levels}, got {level}"
        )));
    }
    match cfg.precision {
        Precision::High => dump_as::<f64>(&opened, wav, task, level, segment, out),
        Precision::Fast => dump_as::<f32>(&opened, wav, task, level, segment, out),
    }
}

fn dump_as<S: Real>(
    opened: &Opened,
    wav: &Path,
    task: usize,
    level: usize,
    segment: usize,
    out: &Path,
) -> Result<()> {
    let net = opened.network::<S>()?;
    let spec = read_features::<S>(wav)?;
    let segments = segment_stream(&spec, SegmentMode::Test)?;
    if !(1..=segments.len()).contains(&segment) {
        return Err(Error::usage(format!(
            "--segment must be in 1..={}, got {segment}",
            segments.len()
        )));
    }
    let (tf, ch) = net.attention_masks(&segments[segment - 1].values, task - 1, level - 1)?;
    create_dir(out)?;
    write(&out.join("tf_mask.csv"), reports::grid_csv(&tf))?;
    write(
        &out.join("channel_mask.csv"),
        reports::grid_csv(&ch.clone().reshape(&[1, ch.len()])?),
    )?;
    write(&out.join("tf_mask.pgm"), reports::pgm(&tf))?;
    write(&out.join("channel_mask.pgm"), reports::pgm(&ch))?;
    write(&out.join(CONFIG_FILE), opened.cfg.echo())?;
    println!(
        "task {task} level {level}: TF mask {}x{}, channel mask {}",
        tf.shape()[0],
        tf.shape()[1],
        ch.len()
    );
    Ok(())
}
