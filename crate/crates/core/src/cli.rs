//! Command-line front end behind the `demix` binary.
//!
//! Every flag may also come from a TOML file given with `--config`: keys are
//! read from the table named after the command (e.g. `[train]`), falling
//! back to top-level keys. Command-line flags win on conflict.
//!
//! Exit codes: 0 success, 1 usage/configuration, 2 data or format error,
//! 3 check failure (gradient check or real-time budget).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, STEM_NAMES};
use crate::error::{Error, Result};
use crate::eval::{bench_block, evaluate_dataset, Separator, DEFAULT_BENCH_ITERATIONS};
use crate::io::{load_track, load_weights, read_wav, save_weights, scan_dataset, write_wav, WavEncoding, WavSpec};
use crate::model::{forward_offline, Arch, Model, ModelConfig};
use crate::stream::{concat, open_session};
use crate::train::{train_loop, Augmentations, LossKind, TrainConfig, TrainData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "demix", version, about = "Real-time music source separation")]
pub struct Cli {
    /// TOML file with defaults for any flag
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Separate a WAV file offline into four stem files
    Separate(SeparateArgs),
    /// Simulate real-time streaming over a WAV file
    Stream(StreamArgs),
    /// Train a model on a dataset tree
    Train(TrainArgs),
    /// Score a model (or an oracle/baseline) on a dataset tree
    Eval(EvalArgs),
    /// Time per-block inference against the real-time budget
    Bench(BenchArgs),
    /// Run the finite-difference gradient suite
    Gradcheck(GradcheckArgs),
    /// Print parameter counts per tensor
    Inspect(InspectArgs),
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelArgs {
    /// Weight file (its config is read from `<file>.toml`)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Build a randomly initialised preset instead: hs_tasnet, hs_tasnet_small, tasnet
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    /// Seed for random initialisation and sampling
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ModelArgs {
    fn load(&self) -> Result<Model<f32>> {
        match (&self.model, &self.arch) {
            (Some(p), _) => load_weights(p),
            (None, Some(a)) => Model::build(&ModelConfig::preset(a.parse()?), self.seed.unwrap_or(0)),
            (None, None) => Err(Error::Config("pass --model <weights> or --arch <name>".into())),
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outdir: Option<PathBuf>,
    /// Align output with input instead of prepending `window - hop` zeros
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub trim_latency: bool,
    /// Output encoding: float32, pcm16, pcm24
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoding: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Samples per channel per push
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chunk: Option<usize>,
    /// Line-delimited JSON stats report
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Also write the streamed stems here
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outdir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub trim_latency: bool,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Dataset root: `<split>/<track>/{mixture,vocals,drums,bass,other}.wav`
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Checkpoint directory
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch_hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub combined_hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub conv_basis: Option<usize>,
    /// l1, multi_domain, si_snr, sd_sdr
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<String>,
    /// Waveform weight of the multi-domain loss
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excerpt_seconds: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_seconds: Option<f64>,
    /// Disable channel swap, random gain and source shuffling
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub no_augment: bool,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Line-delimited JSON report
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Split to score (default: `test`, else every split)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    /// Use the reference stems as estimates (harness check)
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub oracle: bool,
    /// Use the mixture as every estimate (do-nothing baseline)
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub baseline: bool,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of consecutive seeds
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

/// Overlays command-line values on the `[section]` (or top-level) table of
/// the config file.
fn merge<A: Serialize + DeserializeOwned>(cli: &A, config: Option<&Path>, section: &str) -> Result<A> {
    let Some(path) = config else {
        return Ok(toml::Table::try_from(cli)
            .and_then(|t| Ok(t.try_into::<A>().expect("round trip of parsed flags")))
            .map_err(|e| Error::Config(e.to_string()))?);
    };
    let text = fs::read_to_string(path)?;
    let file: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut table = match file.get(section) {
        Some(toml::Value::Table(t)) => t.clone(),
        _ => file
            .into_iter()
            .filter(|(_, v)| !v.is_table())
            .collect(),
    };
    let flags = toml::Table::try_from(cli).map_err(|e| Error::Config(e.to_string()))?;
    table.extend(flags);
    table
        .try_into::<A>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Config(format!("missing required flag --{flag}")))
}

enum Status {
    Ok,
    CheckFailed(String),
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(Status::Ok) => EXIT_OK,
        Ok(Status::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            EXIT_CHECK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<Status> {
    let cfg = cli.config.as_deref();
    match &cli.command {
        Command::Separate(a) => cmd_separate(&merge(a, cfg, "separate")?),
        Command::Stream(a) => cmd_stream(&merge(a, cfg, "stream")?),
        Command::Train(a) => cmd_train(&merge(a, cfg, "train")?),
        Command::Eval(a) => cmd_eval(&merge(a, cfg, "eval")?),
        Command::Bench(a) => cmd_bench(&merge(a, cfg, "bench")?),
        Command::Gradcheck(a) => cmd_gradcheck(&merge(a, cfg, "gradcheck")?),
        Command::Inspect(a) => cmd_inspect(&merge(a, cfg, "inspect")?),
    }
}

fn read_stereo(path: &Path, model: &Model<f32>) -> Result<(Waveform, WavSpec)> {
    let (wave, spec) = read_wav(path)?;
    if wave.channel_count() != model.config().channels {
        return Err(Error::Format(format!(
            "{} has {} channel(s); the model expects {}",
            path.display(),
            wave.channel_count(),
            model.config().channels
        )));
    }
    if wave.sample_rate != model.config().sample_rate {
        return Err(Error::Format(format!(
            "{} is {} Hz; the model runs at {} Hz",
            path.display(),
            wave.sample_rate,
            model.config().sample_rate
        )));
    }
    Ok((wave, spec))
}

fn write_stems(dir: &Path, stems: &[Vec<Vec<f32>>], sample_rate: u32, encoding: WavEncoding) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, channels) in STEM_NAMES.iter().zip(stems) {
        let spec = WavSpec {
            sample_rate,
            channels: channels.len() as u16,
            encoding,
        };
        write_wav(dir.join(format!("{name}.wav")), &Waveform::new(sample_rate, channels.clone())?, spec)?;
    }
    Ok(())
}

fn cmd_separate(a: &SeparateArgs) -> Result<Status> {
    let model = a.model.load()?;
    let input = required(&a.input, "input")?;
    let outdir = required(&a.outdir, "outdir")?;
    let encoding = a.encoding.as_deref().unwrap_or("float32").parse()?;
    let (wave, _) = read_stereo(&input, &model)?;
    let stems = forward_offline(&model, &wave, a.trim_latency)?;
    let planar: Vec<Vec<Vec<f32>>> = stems.stems.into_iter().map(|w| w.channels).collect();
    write_stems(&outdir, &planar, wave.sample_rate, encoding)?;
    println!(
        "separated {} ({} samples) into {}",
        input.display(),
        planar[0][0].len(),
        outdir.display()
    );
    Ok(Status::Ok)
}

fn cmd_stream(a: &StreamArgs) -> Result<Status> {
    let model = a.model.load()?;
    let input = required(&a.input, "input")?;
    let chunk = a.chunk.unwrap_or(model.config().hop);
    if chunk == 0 {
        return Err(Error::Config("--chunk must be positive".into()));
    }
    let (wave, _) = read_stereo(&input, &model)?;
    let interleaved = wave.interleaved();
    let ch = wave.channel_count();
    let mut session = open_session(&model);
    let mut hops = Vec::new();
    for block in interleaved.chunks(chunk * ch) {
        hops.extend(session.push(block)?);
    }
    let streamed_frames = session.stats().frames_processed();
    hops.push(session.flush()?);
    let mut stems = concat(&hops);
    if !a.trim_latency {
        let lead = model.config().window - model.config().hop;
        for c in stems.iter_mut().flatten() {
            c.splice(0..0, std::iter::repeat(0.0).take(lead));
            c.truncate(lead + wave.len());
        }
    }
    let stats = session.stats();
    let budget = crate::eval::budget_ms(model.config().hop, model.config().sample_rate);
    let mean = stats.mean().as_secs_f64() * 1000.0;
    let record = serde_json::json!({
        "kind": "stream",
        "model": model.config().arch.name(),
        "chunk": chunk,
        "latency_samples": session.latency_samples(),
        "samples_in": session.samples_in(),
        "frames_streamed": streamed_frames,
        "frames_processed": stats.frames_processed(),
        "mean_ms": mean,
        "max_ms": stats.max().as_secs_f64() * 1000.0,
        "budget_ms": budget,
        "pass": mean < budget,
    });
    println!("{record}");
    if let Some(r) = &a.report {
        fs::write(r, format!("{record}\n"))?;
    }
    if let Some(dir) = &a.outdir {
        write_stems(dir, &stems, wave.sample_rate, WavEncoding::Float32)?;
    }
    Ok(Status::Ok)
}

fn load_split(index: &crate::io::DatasetIndex, names: &[&str]) -> Result<Vec<crate::audio::StemSet>> {
    let tracks = names.iter().find_map(|n| index.splits.get(*n)).cloned().unwrap_or_default();
    tracks.iter().map(|t| load_track(&t.dir).map(|(_, s)| s)).collect()
}

fn cmd_train(a: &TrainArgs) -> Result<Status> {
    let data_root = required(&a.data, "data")?;
    let out = required(&a.out, "out")?;
    let arch: Arch = a.arch.as_deref().unwrap_or("hs_tasnet_small").parse()?;
    let mut mc = ModelConfig::preset(arch);
    if let Some(v) = a.branch_hidden {
        mc.branch_hidden = v;
    }
    if let Some(v) = a.combined_hidden {
        mc.combined_hidden = v;
    }
    if let Some(v) = a.conv_basis {
        mc.conv_basis = v;
    }
    let seed = a.seed.unwrap_or(0);
    let defaults = TrainConfig::default();
    let loss = match a.loss.as_deref().unwrap_or("l1") {
        "l1" => LossKind::L1,
        "multi_domain" => LossKind::MultiDomain {
            alpha: a.alpha.unwrap_or(0.5),
        },
        "si_snr" => LossKind::SiSnr,
        "sd_sdr" => LossKind::SdSdr,
        other => return Err(Error::Config(format!("unknown loss `{other}`"))),
    };
    let tc = TrainConfig {
        loss,
        lr: a.lr.unwrap_or(defaults.lr),
        seed,
        max_epochs: a.epochs.unwrap_or(defaults.max_epochs),
        steps_per_epoch: a.steps_per_epoch.unwrap_or(defaults.steps_per_epoch),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        excerpt_seconds: a.excerpt_seconds.unwrap_or(defaults.excerpt_seconds),
        valid_seconds: a.valid_seconds.unwrap_or(defaults.valid_seconds),
        augmentations: if a.no_augment {
            Augmentations::none()
        } else {
            Augmentations::default()
        },
        ..defaults
    };
    let index = scan_dataset(&data_root)?;
    for w in &index.warnings {
        eprintln!("warning: {w}");
    }
    let mut train = load_split(&index, &["train"])?;
    if train.is_empty() {
        train = index
            .splits
            .values()
            .flatten()
            .map(|t| load_track(&t.dir).map(|(_, s)| s))
            .collect::<Result<_>>()?;
    }
    let valid = load_split(&index, &["valid", "validation"])?;
    let data = TrainData { train, valid };
    let mut model = Model::<f32>::build(&mc, seed)?;
    fs::create_dir_all(&out)?;
    let mut log = fs::File::create(out.join("train_log.jsonl"))?;
    let outcome = train_loop(&mut model, &data, &tc, Some(&mut log))?;
    log.flush()?;
    for r in &outcome.reports {
        println!(
            "epoch {:>3}  train {:.6}  valid {:.6}  lr {:.2e}{}",
            r.epoch,
            r.train_loss,
            r.valid_loss,
            r.lr,
            if r.stopped { "  (stopped)" } else { "" }
        );
    }
    let weights = out.join("model.hstn");
    save_weights(&outcome.best, &weights)?;
    println!("best valid loss {:.6}; weights in {}", outcome.best_valid_loss, weights.display());
    Ok(Status::Ok)
}

fn cmd_eval(a: &EvalArgs) -> Result<Status> {
    let root = required(&a.data, "data")?;
    let model;
    let sep = if a.oracle {
        Separator::Oracle
    } else if a.baseline {
        Separator::Mixture
    } else {
        model = a.model.load()?;
        Separator::Model(&model)
    };
    let report = evaluate_dataset(&sep, &root, a.split.as_deref())?;
    print!("{}", report.to_text());
    if let Some(p) = &a.report {
        fs::write(p, report.to_json_lines())?;
    }
    Ok(Status::Ok)
}

fn cmd_bench(a: &BenchArgs) -> Result<Status> {
    let model = a.model.load()?;
    let report = bench_block(&model, a.iters.unwrap_or(DEFAULT_BENCH_ITERATIONS), a.model.seed.unwrap_or(0))?;
    print!("{}", report.to_text());
    if let Some(p) = &a.report {
        fs::write(p, format!("{}\n", report.to_json_line()))?;
    }
    if report.pass {
        Ok(Status::Ok)
    } else {
        Ok(Status::CheckFailed(format!(
            "mean block time {:.3} ms exceeds the {:.3} ms budget",
            report.mean_ms, report.budget_ms
        )))
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Status> {
    let results = crate::gradcheck::run_suite(a.seed.unwrap_or(0), a.seeds.unwrap_or(3).max(1))?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<44} seed {:>3}  coords {:>5}  max rel err {:.2e} (< {:.0e})  {}",
            r.name,
            r.seed,
            r.coordinates,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
        failed += usize::from(!r.passed());
    }
    if failed == 0 {
        Ok(Status::Ok)
    } else {
        Ok(Status::CheckFailed(format!("{failed} of {} gradient checks", results.len())))
    }
}

/// Published totals, for the deviation column.
fn published_params(arch: Arch) -> f64 {
    match arch {
        Arch::HsTasnet => 42e6,
        Arch::HsTasnetSmall => 16e6,
        Arch::Tasnet => 51e6,
    }
}

fn cmd_inspect(a: &InspectArgs) -> Result<Status> {
    let model = a.model.load()?;
    let cfg = model.config();
    println!("architecture {}", cfg.arch.name());
    println!(
        "window {} / hop {} at {} Hz (latency {:.1} ms)",
        cfg.window,
        cfg.hop,
        cfg.sample_rate,
        1000.0 * cfg.latency_samples() as f64 / cfg.sample_rate as f64
    );
    for p in model.params() {
        println!("{:<28} {:>18} {:>12}", p.name, format!("{:?}", p.shape), p.len());
    }
    for (layer, count) in model.layer_table() {
        println!("layer {layer:<22} {count:>12}");
    }
    let total = model.param_count();
    let published = published_params(cfg.arch);
    println!(
        "total {total} parameters ({:.2} M; published {:.0} M, {:+.1}%)",
        total as f64 / 1e6,
        published / 1e6,
        100.0 * (total as f64 - published) / published
    );
    Ok(Status::Ok)
}
