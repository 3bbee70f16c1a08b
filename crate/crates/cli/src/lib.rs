//! Subcommands behind the `perceparator` binary: `train`, `separate`,
//! `eval` and `bench`.
//!
//! Each command writes its report to the supplied writer and returns a
//! [`CliError`] carrying the process exit code on failure:
//! 1 for bad input or configuration, 2 for numeric or runtime failures.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use perceparator::attention::{complexity_probe, ProbeConfig};
use perceparator::data::{read_manifest, synth_dataset, wav_read, wav_write, Example};
use perceparator::model::{separate, ModelParams};
use perceparator::objectives::{si_snr_improvement, upit_loss};
use perceparator::training::EpochMetrics;
use perceparator::{Checkpoint, Error, RunConfig, Trainer};

pub const SEED_ENV: &str = "PERCEP_SEED";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,lr,loss,si_snri";
pub const LATEST_CHECKPOINT: &str = "latest.pcpr";

#[derive(Debug, Parser)]
#[command(name = "perceparator", version, about = "Train and run the perceparator speech separator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file, writing metrics.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Split a mixture WAV into source1.wav … sourceN.wav.
    Separate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a `mix<TAB>ref1<TAB>ref2…` manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Attention cost table and fitted scaling exponents.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![125, 250, 500, 1000])]
        chunks: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        latent: usize,
        #[arg(long, default_value_t = 256)]
        feat: usize,
        #[arg(long, default_value_t = 16)]
        heads: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. }
            | Error::InvalidConfig(_)
            | Error::HeadsDoNotDivideF { .. }
            | Error::Manifest { .. }
            | Error::UnsupportedFormat { .. }
            | Error::FormatVersionMismatch { .. }
            | Error::CorruptChecksum { .. }
            | Error::UnexpectedEof(_)
            | Error::MalformedCheckpoint(_)
            | Error::TooManySources(_)
            | Error::TooFewItems(_)
            | Error::InputTooShort { .. }
            | Error::Io { .. } => 1,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

fn out_err(e: std::io::Error) -> CliError {
    CliError::runtime(format!("writing output: {e}"))
}

/// Parses `PERCEP_SEED`; `None` when unset.
pub fn seed_from_env() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Dispatches a parsed command line. `seed` is the environment override.
pub fn run(cli: Cli, seed: Option<u64>, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Train { config, epochs, resume } => {
            cmd_train(&TrainArgs { config, epochs, resume: resume.clone(), seed }, out).map(|_| ())
        }
        Command::Separate { ckpt, input, out: dir } => cmd_separate(&ckpt, &input, &dir).map(|files| {
            for f in files {
                let _ = writeln!(out, "{}", f.display());
            }
        }),
        Command::Eval { ckpt, manifest, csv } => cmd_eval(&ckpt, &manifest, csv.as_deref(), out).map(|_| ()),
        Command::Bench { chunks, latent, feat, heads, csv } => {
            cmd_bench(&chunks, latent, feat, heads, csv.as_deref(), out)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub epochs: Option<usize>,
    pub resume: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn load_run_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut run = RunConfig::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        run.seed = s;
    }
    Ok(run)
}

/// Training mixtures: the manifest's WAV files, or synthetic pairs.
pub fn training_data(run: &RunConfig) -> CliResult<Vec<Example>> {
    match &run.manifest {
        Some(path) => load_examples(path),
        None => Ok(synth_dataset(run.synth_items, run.seed, run.duration, run.sample_rate)?),
    }
}

fn load_examples(manifest: &Path) -> CliResult<Vec<Example>> {
    let entries = read_manifest(manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let mixture = wav_read(&e.mixture)?;
        let references = e
            .references
            .iter()
            .map(|p| wav_read(p).map(|w| w.samples))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(bad) = references.iter().find(|r| r.len() != mixture.samples.len()) {
            return Err(CliError::usage(format!(
                "{}:{}: reference has {} samples, mixture has {}",
                manifest.display(),
                e.line,
                bad.len(),
                mixture.samples.len()
            )));
        }
        out.push(Example { mixture: mixture.samples, references });
    }
    Ok(out)
}

fn metrics_row(m: &EpochMetrics) -> String {
    format!("{},{},{},{}", m.epoch, m.lr, m.loss, m.si_snri)
}

/// Trains until `train.epochs` (or `--epochs`) epochs are complete. With
/// `resume`, model and optimizer state come from the checkpoint and rows
/// are appended to the existing metrics file.
pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<Vec<EpochMetrics>> {
    let mut run = load_run_config(&args.config, args.seed)?;
    if let Some(e) = args.epochs {
        run.epochs = e;
    }
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.run.model != run.model {
                return Err(CliError::usage(format!(
                    "{}: checkpoint model settings differ from {}",
                    path.display(),
                    args.config.display()
                )));
            }
            let mut t = Trainer::from_checkpoint(ckpt)?;
            t.run.epochs = run.epochs;
            t.run.output_dir = run.output_dir.clone();
            t.run.checkpoint_every = run.checkpoint_every;
            t
        }
        None => Trainer::new(run)?,
    };
    let data = training_data(&trainer.run)?;
    let dir = trainer.run.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let fresh = args.resume.is_none() || !metrics_path.exists();
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&metrics_path)
        .map_err(|e| io_err(&metrics_path, e))?;
    if fresh {
        writeln!(metrics, "{METRICS_HEADER}").map_err(out_err)?;
    }
    let mut rows = Vec::new();
    while trainer.epoch < trainer.run.epochs {
        let m = trainer.train_epoch(&data)?;
        writeln!(metrics, "{}", metrics_row(&m)).map_err(out_err)?;
        writeln!(out, "epoch {} lr {:.3e} loss {:.4} si_snri {:.3}", m.epoch, m.lr, m.loss, m.si_snri).map_err(out_err)?;
        let last = trainer.epoch == trainer.run.epochs;
        if trainer.epoch % trainer.run.checkpoint_every == 0 || last {
            let ckpt = trainer.checkpoint();
            ckpt.save(&dir.join(format!("epoch{:04}.pcpr", trainer.epoch)))?;
            ckpt.save(&dir.join(LATEST_CHECKPOINT))?;
        }
        rows.push(m);
    }
    Ok(rows)
}

pub fn load_model(ckpt: &Path) -> CliResult<ModelParams<f32>> {
    let c = Checkpoint::load(ckpt)?;
    Ok(ModelParams::from_store(&c.run.model, c.params)?)
}

/// Writes `source{k}.wav` for every estimated source and returns the paths.
pub fn cmd_separate(ckpt: &Path, input: &Path, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let model = load_model(ckpt)?;
    let wav = wav_read(input)?;
    let sources = separate(&model, &wav.samples)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut paths = Vec::new();
    for (k, s) in sources.iter().enumerate() {
        let p = out_dir.join(format!("source{}.wav", k + 1));
        let peak = s.iter().fold(0.0f32, |a, v| a.max(v.abs()));
        if peak > 1.0 {
            let scaled: Vec<f32> = s.iter().map(|v| v / peak).collect();
            wav_write(&p, &scaled, wav.sample_rate)?;
        } else {
            wav_write(&p, s, wav.sample_rate)?;
        }
        paths.push(p);
    }
    Ok(paths)
}

/// Mean SI-SNRi over sources under the best utterance-level permutation.
pub fn score_item(estimates: &[Vec<f32>], references: &[Vec<f32>], mixture: &[f32]) -> CliResult<f64> {
    let (_, assignment) = upit_loss(estimates, references)?;
    let mut total = 0.0;
    for (i, &j) in assignment.permutation.iter().enumerate() {
        total += si_snr_improvement(&estimates[i], &references[j], mixture)?;
    }
    Ok(total / assignment.permutation.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub items: Vec<(PathBuf, f64)>,
    pub mean: f64,
    pub median: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn summarize(items: Vec<(PathBuf, f64)>) -> CliResult<EvalReport> {
    if items.is_empty() {
        return Err(CliError::usage("manifest has no entries"));
    }
    let scores: Vec<f64> = items.iter().map(|(_, s)| *s).collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let median = median(&scores);
    Ok(EvalReport { items, mean, median })
}

pub fn cmd_eval(ckpt: &Path, manifest: &Path, csv: Option<&Path>, out: &mut dyn Write) -> CliResult<EvalReport> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(CliError::usage(format!("{}: manifest has no entries", manifest.display())));
    }
    let model = load_model(ckpt)?;
    let mut items = Vec::with_capacity(entries.len());
    for e in &entries {
        let mix = wav_read(&e.mixture)?.samples;
        let refs = e.references.iter().map(|p| wav_read(p).map(|w| w.samples)).collect::<Result<Vec<_>, _>>()?;
        let est = separate(&model, &mix)?;
        let score = score_item(&est, &refs, &mix)
            .map_err(|err| CliError { code: err.code, message: format!("{}:{}: {}", manifest.display(), e.line, err) })?;
        items.push((e.mixture.clone(), score));
    }
    let report = summarize(items)?;
    for (p, s) in &report.items {
        writeln!(out, "{}\t{s:.3}", p.display()).map_err(out_err)?;
    }
    writeln!(out, "mean SI-SNRi {:.3} dB, median {:.3} dB over {} items", report.mean, report.median, report.items.len())
        .map_err(out_err)?;
    if let Some(path) = csv {
        let mut text = String::from("mixture,si_snri\n");
        for (p, s) in &report.items {
            text.push_str(&format!("{},{s}\n", p.display()));
        }
        fs::write(path, text).map_err(|e| io_err(path, e))?;
    }
    Ok(report)
}

/// Prints the probe table; fails with exit code 2 when a fitted exponent
/// is outside tolerance.
pub fn cmd_bench(
    chunks: &[usize],
    latent: usize,
    features: usize,
    heads: usize,
    csv: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let configs: Vec<ProbeConfig> =
        chunks.iter().map(|&chunk| ProbeConfig { chunk, latent, features, heads }).collect();
    let report = complexity_probe(&configs)?;
    write!(out, "{}", report.render_table()).map_err(out_err)?;
    if let Some(path) = csv {
        fs::write(path, report.to_csv()).map_err(|e| io_err(path, e))?;
    }
    if report.within_tolerance() {
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "fitted exponents {:.4} (chunk) and {:.4} (reference) are outside tolerance",
            report.chunk_exponent, report.reference_exponent
        )))
    }
}
