//! The `care` command-line tool.
//!
//! Exit codes: 0 success, 1 input or output error, 2 configuration error,
//! 3 failed verification threshold.

mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use manifest::to_json_bytes;
pub use manifest::{manifest_path_for, write_atomic, InputDigest, RunManifest, MANIFEST_VERSION};

use crate::annotations::{load_auto, write_jsonl, AnnotationFormat, Domain, LoadOptions};
use crate::content_stats::{
    annotation_weights, gap_report, write_weights_csv, BoxRatioModel, Smoothing, WeightMode, GAP_REPORT_VERSION,
    MIN_BANDWIDTH,
};
use crate::toy::{generate_domain, to_dataset, write_features_csv, ToyDomainSpec};
use crate::trainer::{
    bench, prepare_data, read_config, render_table, train, BenchConfig, ConfigError, ExperimentConfig,
    BENCH_REPORT_VERSION, TRAIN_REPORT_VERSION,
};
use crate::verify::{identity_report, IDENTITY_REPORT_VERSION};

/// Largest identity discrepancy `verify` accepts.
pub const VERIFY_THRESHOLD: f64 = 1e-8;
/// Environment variable bounding bench parallelism.
pub const THREADS_ENV: &str = "CARE_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Acceptance(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Config(_) => 2,
            CliError::Acceptance(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Input(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "care",
    version,
    about = "Sim2real gap statistics, reweighting and toy training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Coco,
    Jsonl,
}

impl From<FormatArg> for AnnotationFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Coco => AnnotationFormat::Coco,
            FormatArg::Jsonl => AnnotationFormat::Jsonl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Source (synthetic) annotations.
    #[arg(long)]
    pub source: PathBuf,
    /// Target (real) annotations.
    #[arg(long)]
    pub target: PathBuf,
    /// Input format; inferred from the extension when omitted (`.jsonl` or COCO JSON).
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Clip boxes that overshoot the image instead of rejecting the file.
    #[arg(long)]
    pub clamp: bool,
    /// Output file; a `<out>.manifest.json` is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Class histograms, weights and box statistics for a domain pair.
    Stats(PairArgs),
    /// Per-annotation class weight, box weight and their product as CSV.
    Weights {
        #[command(flatten)]
        pair: PairArgs,
        /// Emit the unsmoothed density ratio instead of the bounded weight.
        #[arg(long)]
        raw_ratio: bool,
        /// Which domain's annotations to list.
        #[arg(long, value_enum, default_value = "target")]
        rows: DomainArg,
    },
    /// Train one configuration on the toy task.
    Train {
        /// Experiment config (TOML or JSON).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path; a `<out>.manifest.json` is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation grid over several seeds.
    Bench {
        /// Bench config (TOML or JSON).
        #[arg(long)]
        config: PathBuf,
        /// Directory for bench.json, bench.txt and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the reweighting identity on random finite distributions.
    Verify {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample one domain of a toy task as JSONL annotations.
    Generate {
        /// Task file (TOML or JSON); the built-in task when omitted.
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long, value_enum)]
        domain: DomainArg,
        /// Number of instances, one image each.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the instance features as CSV.
        #[arg(long)]
        features: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Stats(pair) => cmd_stats(&pair),
        Command::Weights { pair, raw_ratio, rows } => cmd_weights(&pair, raw_ratio, rows),
        Command::Train { config, seed, out } => cmd_train(&config, seed, &out),
        Command::Bench { config, out } => cmd_bench(&config, &out),
        Command::Verify { trials, seed, out } => cmd_verify(trials, seed, out.as_deref()),
        Command::Generate {
            task,
            domain,
            n,
            seed,
            out,
            features,
        } => cmd_generate(task.as_deref(), domain, n, seed, &out, features.as_deref()),
    }
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn finish(mut manifest: RunManifest, manifest_path: &Path, outputs: &[&Path]) -> Result<(), CliError> {
    manifest.outputs = outputs.iter().map(|p| p.to_path_buf()).collect();
    write_output(manifest_path, &to_json_bytes(&manifest))
}

fn load_pair(
    pair: &PairArgs,
) -> Result<
    (
        crate::annotations::DetectionDataset,
        crate::annotations::DetectionDataset,
    ),
    CliError,
> {
    let opts = LoadOptions { clamp: pair.clamp };
    let format = pair.format.map(AnnotationFormat::from);
    let load = |path: &Path, domain| load_auto(path, format, domain, opts).map_err(|e| CliError::Input(e.to_string()));
    Ok((load(&pair.source, Domain::Source)?, load(&pair.target, Domain::Target)?))
}

fn pair_manifest(
    subcommand: &str,
    pair: &PairArgs,
    extra: serde_json::Value,
    version: u32,
) -> Result<RunManifest, CliError> {
    let format = pair.format.map(|f| format!("{f:?}").to_lowercase());
    let config = json!({
        "source": pair.source,
        "target": pair.target,
        "format": format,
        "clamp": pair.clamp,
        "options": extra,
    });
    let mut m = RunManifest::new(subcommand, config, None, version);
    m.add_input(&pair.source).map_err(io_err(&pair.source))?;
    m.add_input(&pair.target).map_err(io_err(&pair.target))?;
    Ok(m)
}

pub fn cmd_stats(pair: &PairArgs) -> Result<(), CliError> {
    let (source, target) = load_pair(pair)?;
    let report = gap_report(&source, &target).map_err(|e| CliError::Input(e.to_string()))?;
    write_output(&pair.out, &to_json_bytes(&report))?;
    let manifest = pair_manifest("stats", pair, json!({}), GAP_REPORT_VERSION)?;
    finish(manifest, &manifest_path_for(&pair.out), &[&pair.out])
}

pub fn cmd_weights(pair: &PairArgs, raw_ratio: bool, rows: DomainArg) -> Result<(), CliError> {
    let (source, target) = load_pair(pair)?;
    let model = BoxRatioModel::fit(&source, &target, Smoothing::default(), MIN_BANDWIDTH)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let mode = if raw_ratio {
        WeightMode::Raw
    } else {
        WeightMode::Smoothed
    };
    let listed = if rows == DomainArg::Source { &source } else { &target };
    let weight_rows = annotation_weights(listed, &model, mode);
    let mut buf = Vec::new();
    write_weights_csv(&weight_rows, &mut buf).map_err(|e| CliError::Input(e.to_string()))?;
    write_output(&pair.out, &buf)?;
    let extra = json!({
        "raw_ratio": raw_ratio,
        "rows": format!("{rows:?}").to_lowercase(),
        "smoothing": model.smoothing,
        "min_bandwidth": MIN_BANDWIDTH,
    });
    let manifest = pair_manifest("weights", pair, extra, 1)?;
    finish(manifest, &manifest_path_for(&pair.out), &[&pair.out])
}

fn load_experiment<T>(path: &Path) -> Result<T, CliError>
where
    T: for<'de> serde::Deserialize<'de>,
{
    read_config(path).map_err(CliError::from)
}

/// Inlines the task so the manifest alone reproduces the run.
fn resolve_experiment(
    exp: &ExperimentConfig,
    config_path: &Path,
    manifest: &mut RunManifest,
) -> Result<(ExperimentConfig, ToyDomainSpec), CliError> {
    let base = config_path.parent();
    let spec = exp.load_task(base)?;
    if let Some(p) = &exp.task_file {
        let full = match base {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.clone(),
        };
        manifest.add_input(&full).map_err(io_err(&full))?;
    }
    let resolved = ExperimentConfig {
        task: Some(spec.clone()),
        task_file: None,
        ..exp.clone()
    };
    Ok((resolved, spec))
}

pub fn cmd_train(config: &Path, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut exp: ExperimentConfig = load_experiment(config)?;
    if let Some(s) = seed {
        exp.train.seed = s;
    }
    let mut manifest = RunManifest::new(
        "train",
        serde_json::Value::Null,
        Some(exp.train.seed),
        TRAIN_REPORT_VERSION,
    );
    manifest.add_input(config).map_err(io_err(config))?;
    let (resolved, spec) = resolve_experiment(&exp, config, &mut manifest)?;
    let data = prepare_data(&spec, &resolved.data)?;
    let (report, _) = train(&resolved.train, &data)?;
    write_output(out, &to_json_bytes(&report))?;
    manifest.config = serde_json::to_value(&resolved).expect("serializable");
    finish(manifest, &manifest_path_for(out), &[out])
}

fn bench_threads() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

pub fn cmd_bench(config: &Path, out_dir: &Path) -> Result<(), CliError> {
    let cfg: BenchConfig = load_experiment(config)?;
    let threads = bench_threads()?;
    let mut manifest = RunManifest::new("bench", serde_json::Value::Null, None, BENCH_REPORT_VERSION);
    manifest.add_input(config).map_err(io_err(config))?;
    let (experiment, spec) = resolve_experiment(&cfg.experiment, config, &mut manifest)?;
    let resolved = BenchConfig {
        experiment,
        seeds: cfg.seeds.clone(),
        cells: Some(cfg.cells()),
    };
    let data = prepare_data(&spec, &resolved.experiment.data)?;
    let report = bench(&resolved, &data, threads)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let json_path = out_dir.join("bench.json");
    let table_path = out_dir.join("bench.txt");
    write_output(&json_path, &to_json_bytes(&report))?;
    write_output(&table_path, render_table(&report).as_bytes())?;
    manifest.config = serde_json::to_value(&resolved).expect("serializable");
    finish(manifest, &out_dir.join("manifest.json"), &[&json_path, &table_path])
}

pub fn cmd_verify(trials: usize, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let report = identity_report(trials, seed);
    let bytes = to_json_bytes(&report);
    match out {
        Some(path) => {
            write_output(path, &bytes)?;
            let manifest = RunManifest::new(
                "verify",
                json!({ "trials": trials }),
                Some(seed),
                IDENTITY_REPORT_VERSION,
            );
            finish(manifest, &manifest_path_for(path), &[path])?;
        }
        None => print!("{}", String::from_utf8(bytes).expect("json is utf-8")),
    }
    let worst = report
        .max_abs_discrepancy
        .max(report.max_abs_discrepancy_equal_appearance);
    if !(worst < VERIFY_THRESHOLD) {
        return Err(CliError::Acceptance(format!(
            "identity discrepancy {worst:e} exceeds {VERIFY_THRESHOLD:e}"
        )));
    }
    Ok(())
}

pub fn cmd_generate(
    task: Option<&Path>,
    domain: DomainArg,
    n: usize,
    seed: u64,
    out: &Path,
    features: Option<&Path>,
) -> Result<(), CliError> {
    let exp = ExperimentConfig {
        task: None,
        task_file: task.map(Path::to_path_buf),
        data: Default::default(),
        train: Default::default(),
    };
    let mut manifest = RunManifest::new("generate", serde_json::Value::Null, Some(seed), 1);
    let spec = match task {
        Some(p) => {
            manifest.add_input(p).map_err(io_err(p))?;
            exp.load_task(None)?
        }
        None => exp.load_task(None)?,
    };
    let domain = Domain::from(domain);
    let instances = generate_domain(&spec, domain, n, seed).map_err(|e| CliError::Config(e.to_string()))?;
    let ds = to_dataset(&instances, &spec.classes, domain);
    let mut buf = Vec::new();
    write_jsonl(&ds, &mut buf).map_err(|e| CliError::Input(e.to_string()))?;
    write_output(out, &buf)?;
    let mut outputs = vec![out];
    if let Some(fpath) = features {
        let mut fbuf = Vec::new();
        write_features_csv(&instances, &mut fbuf).map_err(|e| CliError::Input(e.to_string()))?;
        write_output(fpath, &fbuf)?;
        outputs.push(fpath);
    }
    manifest.config = json!({ "task": spec, "domain": domain, "n": n });
    finish(manifest, &manifest_path_for(out), &outputs)
}
