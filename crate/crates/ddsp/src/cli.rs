//! The `ddsp` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime failures, 2 on usage and
//! validation errors. Every file a command writes lands under `--out`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ddsp_core::datagen::{self, hard_presets, matching_frame_config, presets_for, separation_frame_config, ParamBox, SAMPLE_RATE};
use ddsp_core::gradcheck::{self, Group, FAULT_KINDS};
use ddsp_core::metrics::match_sources;
use ddsp_core::nn::{OptimizerKind, TrainConfig};
use ddsp_core::separation::{train_unsupervised, SeparatorConfig, SeparatorNetwork, TrainItem};
use ddsp_core::soundmatch::{evaluate_matcher, train_matcher, Clock, LossKind, MatchModel, MatcherConfig, MatcherNetwork};
use ddsp_core::spectral::{MultiScaleConfig, RepresentationKind};
use ddsp_core::synth::{mix, FrameConfig, Signal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::binary::{read_checkpoint, write_checkpoint, Architecture};
use crate::config::{merge, ConfigFile};
use crate::dataset::{generate_matching_set, generate_separation_set, Dataset, MatchingRequest, SeparationRequest, Task};
use crate::wav::{read_wav, write_wav, SampleFormat};
use crate::{Error, Result};

/// Optimizer defaults applied when the corresponding flag is absent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainDefaults {
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub final_lr_fraction: f64,
}

pub const SEPARATION_DEFAULTS: TrainDefaults = TrainDefaults { learning_rate: 1e-4, clip_norm: Some(1000.0), final_lr_fraction: 0.05 };
pub const MATCHING_DEFAULTS: TrainDefaults = TrainDefaults { learning_rate: 1e-3, clip_norm: None, final_lr_fraction: 0.05 };

#[derive(Debug, Parser)]
#[command(name = "ddsp", version, about = "Differentiable source-filter synthesis: data, training, separation and sound matching")]
pub struct Cli {
    /// Base seed for everything random.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// JSON file with defaults for the command's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for dataset generation (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a separator on mixtures only.
    TrainSep(TrainSepArgs),
    /// Train a sound-matching network.
    TrainMatch(TrainMatchArgs),
    /// Separate one mixture with a trained separator.
    Separate(SeparateArgs),
    /// Evaluate a checkpoint on a range of dataset items.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenDataArgs {
    /// `separation` or `matching`.
    #[arg(long)]
    pub task: Option<String>,
    /// Number of sources (separation).
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of items to generate.
    #[arg(long)]
    pub items: Option<usize>,
    /// `choir` (disjoint ranges) or `hard` (overlapping ranges).
    #[arg(long)]
    pub presets: Option<String>,
    /// Cache Gram matrices (matching).
    #[arg(long)]
    pub gram: bool,
    /// `temporal-scattering` or `multiscale-spectrogram` (matching).
    #[arg(long)]
    pub representation: Option<String>,
    /// Override the number of frames.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Override the number of harmonics.
    #[arg(long)]
    pub harmonics: Option<usize>,
    /// Override the all-pole filter order.
    #[arg(long)]
    pub order: Option<usize>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainOpts {
    /// Optimization steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Items per step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `adam` or `sgd`.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    /// Rescale gradients whose L2 norm exceeds this.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Cosine-decay the learning rate to this fraction of its initial value.
    #[arg(long)]
    pub final_lr_fraction: Option<f64>,
    /// Train on the first N items of the dataset (default: all).
    #[arg(long)]
    pub train_items: Option<usize>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainSepArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainMatchArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `parameter`, `representation` or `pnp`.
    #[arg(long)]
    pub loss: Option<String>,
    /// Representation for the representation loss and evaluation.
    #[arg(long)]
    pub representation: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SeparateArgs {
    /// Separator checkpoint written by `train-sep`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset holding the item; its ground truth is used for SI-SDR.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Item index within `--data`.
    #[arg(long)]
    pub item: Option<usize>,
    /// Mixture WAV to separate instead of a dataset item.
    #[arg(long)]
    pub mixture: Option<PathBuf>,
    /// f0 CSV (frame, one column per source) for `--mixture`.
    #[arg(long)]
    pub f0: Option<PathBuf>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    /// Separator or matcher checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Item range `a..b` (default: all items).
    #[arg(long)]
    pub items: Option<String>,
    /// Representation for matcher evaluation (default: the dataset's).
    #[arg(long)]
    pub representation: Option<String>,
}

#[derive(Debug, Default, Clone, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GradcheckArgs {
    /// Comma-separated groups: autodiff, synth, spectral, end-to-end.
    #[arg(long)]
    pub ops: Option<String>,
    /// Corrupt the adjoint of one op kind (testing the checker itself).
    #[arg(long)]
    pub inject_fault: Option<String>,
}

/// Settings shared by every command after merging the config file.
#[derive(Debug, Clone)]
pub struct Global {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
}

struct InstantClock(Instant);

impl Clock for InstantClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Usage(format!("missing required flag --{flag}")))
}

fn json_bytes(path: &Path, v: &Value) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|source| Error::Json { path: path.into(), source })?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    fs::write(path, json_bytes(path, v)?).map_err(Error::io(path))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn parse_hidden(s: &Option<String>) -> Result<Option<Vec<usize>>> {
    let Some(s) = s else { return Ok(None) };
    let widths = s
        .split(',')
        .map(|w| w.trim().parse::<usize>().map_err(|_| Error::Usage(format!("invalid hidden width `{w}`"))))
        .collect::<Result<Vec<_>>>()?;
    if widths.contains(&0) {
        return Err(Error::Usage("hidden widths must be positive".into()));
    }
    Ok(Some(widths))
}

fn parse_range(s: &Option<String>, len: usize) -> Result<std::ops::Range<usize>> {
    let Some(s) = s else { return Ok(0..len) };
    let (a, b) = s.split_once("..").ok_or_else(|| Error::Usage(format!("item range `{s}` must look like a..b")))?;
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| Error::Usage(format!("invalid item range `{s}`")));
    let (a, b) = (parse(a)?, parse(b)?);
    if a >= b {
        return Err(Error::Usage(format!("item range `{s}` is empty")));
    }
    if b > len {
        return Err(Error::OutOfRange { index: b - 1, len });
    }
    Ok(a..b)
}

fn train_config(opts: &TrainOpts, seed: u64, defaults: TrainDefaults) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: opts.learning_rate.unwrap_or(defaults.learning_rate),
        steps: opts.steps.unwrap_or(d.steps),
        batch_size: opts.batch_size.unwrap_or(d.batch_size),
        seed,
        optimizer: match &opts.optimizer {
            Some(s) => OptimizerKind::parse(s)?,
            None => d.optimizer,
        },
        checkpoint_interval: opts.checkpoint_interval.unwrap_or(0),
        clip_norm: opts.clip_norm.or(defaults.clip_norm),
        final_lr_fraction: opts.final_lr_fraction.unwrap_or(defaults.final_lr_fraction),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_count(opts: &TrainOpts, ds: &Dataset) -> Result<usize> {
    let n = opts.train_items.unwrap_or(ds.len());
    if n == 0 {
        return Err(Error::Usage("--train-items must be at least 1".into()));
    }
    if n > ds.len() {
        return Err(Error::OutOfRange { index: n - 1, len: ds.len() });
    }
    Ok(n)
}

fn write_trace(path: &Path, losses: &[f64]) -> Result<()> {
    let csv_err = |source| Error::Csv { path: path.into(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["step", "loss"]).map_err(csv_err)?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(Error::io(path))
}

fn checkpoint_name(step: usize) -> String {
    format!("step_{step:08}.ckpt")
}

fn open_dataset(args_data: &Option<PathBuf>, task: Task) -> Result<Dataset> {
    let ds = Dataset::open(&required(args_data, "data")?)?;
    if ds.task() != task {
        return Err(Error::Usage(format!("--data holds a {} dataset, this command needs {}", ds.task().name(), task.name())));
    }
    if ds.is_empty() {
        return Err(Error::Usage("dataset has no items".into()));
    }
    Ok(ds)
}

fn cmd_gen_data(a: &GenDataArgs, g: &Global, log: &mut dyn Write) -> Result<()> {
    let task = Task::parse(&required(&a.task, "task")?)?;
    let items = a.items.unwrap_or(16);
    if items == 0 {
        return Err(Error::Usage("--items must be at least 1".into()));
    }
    let base = match task {
        Task::Separation => separation_frame_config(),
        Task::Matching => matching_frame_config(),
    };
    let frame = FrameConfig {
        frames: a.frames.unwrap_or(base.frames),
        harmonics: a.harmonics.unwrap_or(base.harmonics),
        order: a.order.unwrap_or(base.order),
        hop: base.hop,
    };
    frame.validate()?;
    let manifest = match task {
        Task::Separation => {
            if a.gram || a.representation.is_some() {
                return Err(Error::Usage("--gram and --representation only apply to matching data".into()));
            }
            let k = a.k.unwrap_or(4);
            let presets = match a.presets.as_deref().unwrap_or("choir") {
                "choir" => presets_for(k)?,
                "hard" => hard_presets(k)?,
                other => return Err(Error::Usage(format!("unknown preset set `{other}` (expected choir or hard)"))),
            };
            generate_separation_set(&g.out, &SeparationRequest { presets, frame, items, seed: g.seed }, g.threads)?
        }
        Task::Matching => {
            if a.k.is_some() || a.presets.is_some() {
                return Err(Error::Usage("--k and --presets only apply to separation data".into()));
            }
            let rep = match &a.representation {
                Some(s) => RepresentationKind::parse(s)?,
                None => RepresentationKind::MultiScaleSpectrogram,
            };
            let req = MatchingRequest { space: ParamBox::new(frame)?, items, seed: g.seed, gram: a.gram.then_some(rep) };
            generate_matching_set(&g.out, &req, g.threads, |line| eprintln!("{line}"))?
        }
    };
    let path = g.out.join(crate::dataset::MANIFEST_FILE);
    writeln!(log, "{}", path.display()).map_err(Error::io("<stdout>"))?;
    if !manifest.skipped.is_empty() {
        eprintln!("{} of {} items skipped", manifest.skipped.len(), manifest.requested);
    }
    Ok(())
}

fn separator_config(ds: &Dataset, hidden: Option<Vec<usize>>) -> Result<SeparatorConfig> {
    let k = ds.manifest().sources.ok_or_else(|| Error::format(ds.root(), "separation manifest lacks a source count"))?;
    let mut cfg = SeparatorConfig::new(k, ds.frame(), SAMPLE_RATE);
    if let Some(h) = hidden {
        cfg.hidden = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train_sep(a: &TrainSepArgs, g: &Global, log: &mut dyn Write) -> Result<()> {
    let ds = open_dataset(&a.data, Task::Separation)?;
    let train = train_config(&a.train, g.seed, SEPARATION_DEFAULTS)?;
    let cfg = separator_config(&ds, parse_hidden(&a.train.hidden)?)?;
    let n = train_count(&a.train, &ds)?;
    let items: Vec<TrainItem> = ds.train_items(0..n)?;
    ensure_dir(&g.out)?;
    let ckpt_dir = g.out.join("checkpoints");
    if train.checkpoint_interval > 0 {
        ensure_dir(&ckpt_dir)?;
    }
    let mut net = SeparatorNetwork::new(cfg.clone(), g.seed)?;
    let arch = Architecture::Separator(cfg.clone());
    let start = Instant::now();
    let trace = train_unsupervised(&mut net, &items, &train, &MultiScaleConfig::default(), |step, net| {
        if train.checkpoint_interval > 0 && step % train.checkpoint_interval == 0 {
            write_checkpoint(&ckpt_dir.join(checkpoint_name(step)), &arch, net.weights())
                .map_err(|e| ddsp_core::Error::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    })
    .map_err(|e| match e {
        ddsp_core::Error::NonFiniteLoss { step, batch } => Error::Core(ddsp_core::Error::NonFiniteLoss { step, batch }),
        other => Error::Core(other),
    })?;
    let seconds = start.elapsed().as_secs_f64();
    finish_training(
        g,
        &arch,
        net.weights(),
        &trace,
        seconds,
        json!({
            "schema": "ddsp.train-sep/1",
            "architecture": arch.to_string(),
            "train_items": n,
            "steps": train.steps,
            "batch_size": train.batch_size,
            "learning_rate": train.learning_rate,
            "optimizer": train.optimizer.name(),
            "clip_norm": train.clip_norm,
            "final_lr_fraction": train.final_lr_fraction,
            "seed": g.seed,
        }),
        log,
    )
}

fn finish_training(
    g: &Global,
    arch: &Architecture,
    weights: &[f64],
    losses: &[f64],
    seconds: f64,
    mut metrics: Value,
    log: &mut dyn Write,
) -> Result<()> {
    write_checkpoint(&g.out.join("model.ckpt"), arch, weights)?;
    write_trace(&g.out.join("trace.csv"), losses)?;
    let tail = &losses[losses.len().saturating_sub(10)..];
    let obj = metrics.as_object_mut().expect("metrics object");
    obj.insert("final_loss".into(), json!(losses.last().copied()));
    obj.insert("mean_loss_last_10".into(), json!(tail.iter().sum::<f64>() / tail.len() as f64));
    write_json(&g.out.join("metrics.json"), &metrics)?;
    write_json(
        &g.out.join("timing.json"),
        &json!({ "schema": "ddsp.timing/1", "steps": losses.len(), "total_seconds": seconds, "seconds_per_step": seconds / losses.len() as f64 }),
    )?;
    writeln!(log, "{}", g.out.join("model.ckpt").display()).map_err(Error::io("<stdout>"))
}

fn matcher_model(ds: &Dataset, rep: &Option<String>) -> Result<MatchModel> {
    let space = ds.param_box()?.ok_or_else(|| Error::format(ds.root(), "matching manifest lacks a parameter box"))?;
    let kind = match rep {
        Some(s) => RepresentationKind::parse(s)?,
        None => ds.representation()?.unwrap_or(RepresentationKind::MultiScaleSpectrogram),
    };
    Ok(MatchModel::new(space, kind, SAMPLE_RATE)?)
}

fn cmd_train_match(a: &TrainMatchArgs, g: &Global, log: &mut dyn Write) -> Result<()> {
    let ds = open_dataset(&a.data, Task::Matching)?;
    let kind = LossKind::parse(&required(&a.loss, "loss")?)?;
    if kind == LossKind::Pnp && !ds.has_grams() {
        return Err(Error::Usage(format!(
            "--loss pnp needs cached Gram matrices, but {} was generated without them (rerun gen-data with --gram)",
            ds.root().display()
        )));
    }
    let train = train_config(&a.train, g.seed, MATCHING_DEFAULTS)?;
    let model = matcher_model(&ds, &a.representation)?;
    if kind == LossKind::Pnp {
        if let Some(rep) = ds.representation()? {
            if rep != model.rep.kind() {
                return Err(Error::Usage(format!("Gram matrices were computed for {}, not {}", rep.name(), model.rep.kind().name())));
            }
        }
    }
    let mut cfg = MatcherConfig::new(ds.frame(), SAMPLE_RATE);
    if let Some(h) = parse_hidden(&a.train.hidden)? {
        cfg.hidden = h;
    }
    cfg.validate()?;
    let n = train_count(&a.train, &ds)?;
    let data = (0..n).map(|i| ds.match_example(i, kind == LossKind::Pnp)).collect::<Result<Vec<_>>>()?;
    ensure_dir(&g.out)?;
    let ckpt_dir = g.out.join("checkpoints");
    if train.checkpoint_interval > 0 {
        ensure_dir(&ckpt_dir)?;
    }
    let mut net = MatcherNetwork::new(cfg.clone(), g.seed)?;
    let arch = Architecture::Matcher(cfg);
    let clock = InstantClock(Instant::now());
    let trace = train_matcher(&mut net, &model, &data, kind, &train, &clock, |step, net| {
        if train.checkpoint_interval > 0 && step % train.checkpoint_interval == 0 {
            write_checkpoint(&ckpt_dir.join(checkpoint_name(step)), &arch, net.weights())
                .map_err(|e| ddsp_core::Error::InvalidConfig(e.to_string()))?;
        }
        Ok(())
    })?;
    let seconds: f64 = trace.step_seconds.iter().sum();
    finish_training(
        g,
        &arch,
        net.weights(),
        &trace.losses,
        seconds,
        json!({
            "schema": "ddsp.train-match/1",
            "architecture": arch.to_string(),
            "loss": kind.name(),
            "representation": model.rep.kind().name(),
            "train_items": n,
            "steps": train.steps,
            "batch_size": train.batch_size,
            "learning_rate": train.learning_rate,
            "optimizer": train.optimizer.name(),
            "clip_norm": train.clip_norm,
            "final_lr_fraction": train.final_lr_fraction,
            "seed": g.seed,
        }),
        log,
    )
}

fn load_separator(path: &Path, expected: Option<&SeparatorConfig>) -> Result<SeparatorNetwork> {
    let (arch, weights) = read_checkpoint(path)?;
    let Architecture::Separator(cfg) = arch else {
        return Err(Error::ArchitectureMismatch {
            expected: expected.map_or_else(|| "a separator".to_string(), |c| c.to_string()),
            found: arch.to_string(),
        });
    };
    if let Some(e) = expected {
        if e.sources != cfg.sources || e.frame != cfg.frame || e.sample_rate != cfg.sample_rate {
            return Err(Error::ArchitectureMismatch { expected: e.to_string(), found: cfg.to_string() });
        }
    }
    Ok(SeparatorNetwork::from_weights(cfg, weights)?)
}

fn load_matcher(path: &Path, frame: FrameConfig) -> Result<MatcherNetwork> {
    let (arch, weights) = read_checkpoint(path)?;
    let expected = MatcherConfig::new(frame, SAMPLE_RATE);
    match arch {
        Architecture::Matcher(cfg) if cfg.frame == frame && cfg.sample_rate == SAMPLE_RATE => {
            Ok(MatcherNetwork::from_weights(cfg, weights)?)
        }
        other => Err(Error::ArchitectureMismatch { expected: expected.to_string(), found: other.to_string() }),
    }
}

fn si_sdr_json(refs: &[Signal], ests: &[Signal]) -> Result<Value> {
    let refs: Vec<&[f64]> = refs.iter().map(Signal::samples).collect();
    let ests: Vec<&[f64]> = ests.iter().map(Signal::samples).collect();
    let m = match_sources(&refs, &ests)?;
    Ok(json!({ "assignment": m.assignment, "per_source_db": m.per_source, "mean_db": m.mean }))
}

fn cmd_separate(a: &SeparateArgs, g: &Global, log: &mut dyn Write) -> Result<()> {
    let ckpt = required(&a.checkpoint, "checkpoint")?;
    let (item, truth, expected, source_desc) = match (&a.data, &a.mixture) {
        (Some(_), Some(_)) => return Err(Error::Usage("give either --data/--item or --mixture/--f0, not both".into())),
        (Some(_), None) => {
            let ds = open_dataset(&a.data, Task::Separation)?;
            let index = required(&a.item, "item")?;
            let eval = ds.eval_item(index)?;
            let cfg = separator_config(&ds, None)?;
            (eval.train, Some(eval.sources), Some(cfg), json!({ "dataset": ds.root().display().to_string(), "item": index }))
        }
        (None, Some(mix_path)) => {
            let mixture = read_wav(mix_path)?;
            let f0_path = required(&a.f0, "f0")?;
            let f0 = read_f0_csv(&f0_path)?;
            let k = f0.1;
            let noise_seeds = (0..k).map(|j| datagen::source_noise_seed(g.seed, j)).collect();
            (TrainItem { mixture, f0: f0.0, noise_seeds }, None, None, json!({ "mixture": mix_path.display().to_string() }))
        }
        (None, None) => return Err(Error::Usage("missing input: give --data and --item, or --mixture and --f0".into())),
    };
    let net = load_separator(&ckpt, expected.as_ref())?;
    let k = net.config().sources;
    if item.noise_seeds.len() != k {
        return Err(Error::ArchitectureMismatch {
            expected: format!("{k} sources per input"),
            found: format!("{} f0 columns", item.noise_seeds.len()),
        });
    }
    let est = net.estimate(&item)?;
    let reconstruction = mix(&est.sources)?;
    let max_diff = reconstruction.samples().iter().zip(est.mixture.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure_dir(&g.out)?;
    for (j, s) in est.sources.iter().enumerate() {
        write_wav(&g.out.join(format!("source_{j}_est.wav")), s, SampleFormat::Float32)?;
    }
    write_wav(&g.out.join("reconstruction.wav"), &reconstruction, SampleFormat::Float32)?;
    let loss = ddsp_core::separation::reconstruction_loss(&est, &item.mixture, &MultiScaleConfig::default())?;
    let si_sdr = match &truth {
        Some(refs) => si_sdr_json(refs, &est.sources)?,
        None => Value::Null,
    };
    let metrics = json!({
        "schema": "ddsp.separate/1",
        "architecture": net.config().to_string(),
        "input": source_desc,
        "sources": k,
        "files": (0..k).map(|j| format!("source_{j}_est.wav")).collect::<Vec<_>>(),
        "reconstruction_file": "reconstruction.wav",
        "reconstruction_loss": loss,
        "reconstruction_max_abs_error": max_diff,
        "si_sdr": si_sdr,
    });
    write_json(&g.out.join("metrics.json"), &metrics)?;
    writeln!(log, "{}", g.out.join("metrics.json").display()).map_err(Error::io("<stdout>"))
}

fn read_f0_csv(path: &Path) -> Result<(Vec<f64>, usize)> {
    let csv_err = |source| Error::Csv { path: path.into(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let cols = r.headers().map_err(csv_err)?.len();
    if cols < 2 {
        return Err(Error::format(path, "expected a frame column and at least one f0 column"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        for f in rec.iter().skip(1) {
            out.push(f.parse::<f64>().map_err(|e| Error::format(path, e.to_string()))?);
        }
    }
    Ok((out, cols - 1))
}

fn mean_sorted(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum::<f64>() / s.len() as f64
}

fn cmd_eval(a: &EvalArgs, g: &Global, log: &mut dyn Write) -> Result<()> {
    let ckpt = required(&a.checkpoint, "checkpoint")?;
    let ds = Dataset::open(&required(&a.data, "data")?)?;
    if ds.is_empty() {
        return Err(Error::Usage("dataset has no items".into()));
    }
    let range = parse_range(&a.items, ds.len())?;
    let metrics = match ds.task() {
        Task::Separation => {
            let net = load_separator(&ckpt, Some(&separator_config(&ds, None)?))?;
            let mut items = Vec::new();
            let (mut scores, mut baselines) = (Vec::new(), Vec::new());
            for i in range.clone() {
                let eval = ds.eval_item(i)?;
                let est = net.estimate(&eval.train)?;
                let refs: Vec<&[f64]> = eval.sources.iter().map(Signal::samples).collect();
                let ests: Vec<&[f64]> = est.sources.iter().map(Signal::samples).collect();
                let m = match_sources(&refs, &ests)?;
                let mixes: Vec<&[f64]> = vec![eval.train.mixture.samples(); refs.len()];
                let b = match_sources(&refs, &mixes)?;
                scores.push(m.mean);
                baselines.push(b.mean);
                items.push(json!({ "index": i, "assignment": m.assignment, "per_source_db": m.per_source, "mean_db": m.mean, "baseline_db": b.mean }));
            }
            let (mean, base) = (mean_sorted(&scores), mean_sorted(&baselines));
            json!({
                "schema": "ddsp.eval.separation/1",
                "architecture": net.config().to_string(),
                "items": items,
                "mean_si_sdr_db": mean,
                "mean_baseline_db": base,
                "improvement_db": mean - base,
            })
        }
        Task::Matching => {
            let net = load_matcher(&ckpt, ds.frame())?;
            let model = matcher_model(&ds, &a.representation)?;
            let test = range.clone().map(|i| ds.match_example(i, false)).collect::<Result<Vec<_>>>()?;
            let report = evaluate_matcher(&net, &model, &test)?;
            json!({
                "schema": "ddsp.eval.matching/1",
                "architecture": net.config().to_string(),
                "representation": model.rep.kind().name(),
                "items": range.clone().zip(report.param_errors.iter().zip(&report.rep_distances)).map(|(i, (p, r))| json!({ "index": i, "param_error": p, "rep_distance": r })).collect::<Vec<_>>(),
                "mean_param_error": report.mean_param_error,
                "mean_rep_distance": report.mean_rep_distance,
            })
        }
    };
    ensure_dir(&g.out)?;
    write_json(&g.out.join("metrics.json"), &metrics)?;
    writeln!(log, "{}", g.out.join("metrics.json").display()).map_err(Error::io("<stdout>"))
}

fn cmd_gradcheck(a: &GradcheckArgs, g: &Global, log: &mut dyn Write) -> Result<bool> {
    let groups = match &a.ops {
        None => Group::ALL.to_vec(),
        Some(s) => s.split(',').map(|t| Group::parse(t.trim())).collect::<std::result::Result<Vec<_>, _>>()?,
    };
    let fault = match &a.inject_fault {
        None => None,
        Some(k) => Some(
            *FAULT_KINDS
                .iter()
                .find(|f| **f == k.as_str())
                .ok_or_else(|| Error::Usage(format!("unknown op kind `{k}` (known: {})", FAULT_KINDS.join(", "))))?,
        ),
    };
    let outcomes = gradcheck::run_suite(&groups, g.seed, fault)?;
    let io = Error::io("<stdout>");
    let mut out = String::new();
    out.push_str(&format!("{:<12} {:<20} {:>12} {:>10}  result\n", "group", "check", "max rel err", "tolerance"));
    for o in &outcomes {
        out.push_str(&format!(
            "{:<12} {:<20} {:>12.3e} {:>10.0e}  {}\n",
            o.group.name(),
            o.name,
            o.max_rel_error,
            o.tolerance,
            if o.passed() { "ok" } else { "FAIL" }
        ));
    }
    let failing: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name).collect();
    if failing.is_empty() {
        out.push_str(&format!("all {} checks passed\n", outcomes.len()));
    } else {
        out.push_str(&format!("failing: {}\n", failing.join(", ")));
    }
    log.write_all(out.as_bytes()).map_err(io)?;
    Ok(failing.is_empty())
}

fn merged<T: Serialize + serde::de::DeserializeOwned + Clone>(args: &T, file: &Option<(PathBuf, ConfigFile)>) -> Result<T> {
    match file {
        Some((path, f)) => merge(args, &f.command, path),
        None => Ok(args.clone()),
    }
}

fn global_from(cli: &Cli, file: &Option<(PathBuf, ConfigFile)>) -> Result<Global> {
    let get = |key: &str| -> Result<Option<u64>> {
        match file.as_ref().and_then(|(_, f)| f.global.get(key)) {
            None => Ok(None),
            Some(v) => v.as_u64().map(Some).ok_or_else(|| Error::Usage(format!("config key `{key}` must be a non-negative integer"))),
        }
    };
    let seed = match cli.seed {
        Some(s) => s,
        None => get("seed")?.unwrap_or(0),
    };
    let threads = match cli.threads {
        Some(t) => t,
        None => get("threads")?.map_or(1, |t| t as usize),
    };
    if threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    Ok(Global { seed, out: cli.out.clone(), threads })
}

/// Runs a parsed command, writing human-readable output to `log`.
/// Returns the process exit code.
pub fn execute(cli: &Cli, log: &mut dyn Write) -> Result<i32> {
    let file = match &cli.config {
        Some(p) => Some((p.clone(), ConfigFile::load(p)?)),
        None => None,
    };
    let g = global_from(cli, &file)?;
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(&merged(a, &file)?, &g, log)?,
        Command::TrainSep(a) => cmd_train_sep(&merged(a, &file)?, &g, log)?,
        Command::TrainMatch(a) => cmd_train_match(&merged(a, &file)?, &g, log)?,
        Command::Separate(a) => cmd_separate(&merged(a, &file)?, &g, log)?,
        Command::Eval(a) => cmd_eval(&merged(a, &file)?, &g, log)?,
        Command::Gradcheck(a) => {
            if !cmd_gradcheck(&merged(a, &file)?, &g, log)? {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command.
/// Errors are reported on stderr; the return value is the exit code.
pub fn run<I, T>(args: I, log: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli, log) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
