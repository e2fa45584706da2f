//! The `midgan` command-line tool.
//!
//! Every subcommand returns an exit code: 0 on success, 1 when the input is
//! invalid (bad flags, unreadable or malformed config, failed validation), 2
//! when a run fails at runtime.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use midgan_core::eval::{
    generations_harness, pad_experiment, realism_report, FeatureEmbedder, GenerationsOptions,
    PadDetectorConfig, RealismOptions, TestSet,
};
use midgan_core::networks::NetworkConfig;
use midgan_core::run::{read_run_info, RunDirectory, RunInfo};
use midgan_core::toy_data::{
    generate_toy_dataset, list_images, split_dataset, DomainLabel, ToyDomain, ToyDomainSpec,
};
use midgan_core::trainer::{fit, translate_corpus, TrainConfig};
use midgan_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "midgan", version, about = "Multi-domain image translation on a toy iris corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural toy dataset, one directory per domain.
    Datagen(DatagenArgs),
    /// Train a model and write checkpoints, samples and metrics to a run directory.
    Train(TrainArgs),
    /// Translate a directory of images from one domain to another.
    Generate(GenerateArgs),
    /// Per-domain FID between real and synthetic directories.
    Evaluate(EvaluateArgs),
    /// Train and score presentation-attack detectors with and without synthetic data.
    PadBench(PadBenchArgs),
    /// Retrain from scratch on each generation's synthetic output.
    Generations(GenerationsArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub per_domain: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    /// Comma-separated domain names; `print` and `lens` get their artifacts,
    /// anything else renders clean.
    #[arg(long, value_delimiter = ',', default_value = "bonafide,print,lens")]
    pub domains: Vec<String>,
    #[arg(long)]
    pub effect_strength: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config, or the `run.json` of an earlier run.
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; created if missing.
    #[arg(long)]
    pub run_dir: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// Flag overrides applied on top of the config file, in this order:
/// named flags first, then every `--set`.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Same as `total_steps` in the config file.
    #[arg(long)]
    pub total_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset root; sets `data.root`.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    /// Write a sample grid every N steps (0 disables).
    #[arg(long)]
    pub eval_interval: Option<u64>,
    /// Any config key as `dotted.key=value`, e.g. `loss.lambda_domain=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub source_dir: PathBuf,
    /// Domain name or index.
    #[arg(long)]
    pub source_domain: String,
    #[arg(long)]
    pub target_domain: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images to write; defaults to the number of source images.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Real dataset root with one subdirectory per domain.
    #[arg(long)]
    pub real: PathBuf,
    /// Synthetic root; every domain subdirectory found here is scored.
    #[arg(long)]
    pub synth: PathBuf,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub phi_seed: u64,
    #[arg(long, default_value_t = 50)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PadBenchArgs {
    /// TOML file with the keys listed below.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerationsArgs {
    /// Base training config (TOML or `run.json`); `data.root` must be set.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Synthetic images written per domain and generation.
    #[arg(long, default_value_t = 150)]
    pub per_domain: usize,
    /// Optional TOML file with detector settings.
    #[arg(long)]
    pub detector: Option<PathBuf>,
}

/// Contents of a `pad-bench` config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PadBenchConfig {
    /// Real dataset root; split into train and held-out test images.
    pub data_root: PathBuf,
    /// Synthetic images per domain; enables the augmented arm.
    pub synth_dir: Option<PathBuf>,
    /// Report directory.
    pub out: PathBuf,
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default)]
    pub detector: PadDetectorConfig,
}

fn default_split_fraction() -> f64 {
    0.7
}

fn default_channels() -> usize {
    1
}

/// Reference list of training config keys, shown by `train --help`.
fn train_keys_help() -> String {
    let mut text = String::from(
        "Config keys (TOML; values shown are defaults, total_steps is required):\n\n",
    );
    text.push_str(&TrainConfig::new(1000).to_toml_string());
    text
}

fn pad_keys_help() -> String {
    let example = PadBenchConfig {
        data_root: "data".into(),
        synth_dir: Some("synthetic".into()),
        out: "reports/pad".into(),
        split_fraction: default_split_fraction(),
        split_seed: 0,
        channels: 1,
        detector: PadDetectorConfig::default(),
    };
    format!(
        "Config keys (TOML; data_root and out are required, synth_dir is optional):\n\n{}",
        toml::to_string(&example).expect("config serializes")
    )
}

fn command() -> clap::Command {
    Cli::command()
        .mut_subcommand("train", |c| c.after_long_help(train_keys_help()))
        .mut_subcommand("generations", |c| c.after_long_help(train_keys_help()))
        .mut_subcommand("pad-bench", |c| c.after_long_help(pad_keys_help()))
}

fn config_error(path: &Path, message: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {message}", path.display()))
}

fn strip_nulls(v: serde_json::Value) -> Option<serde_json::Value> {
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::Object(m) => Some(serde_json::Value::Object(
            m.into_iter().filter_map(|(k, v)| strip_nulls(v).map(|v| (k, v))).collect(),
        )),
        serde_json::Value::Array(a) => {
            Some(serde_json::Value::Array(a.into_iter().filter_map(strip_nulls).collect()))
        }
        other => Some(other),
    }
}

/// Reads a config file as a TOML table. A `.json` file is taken to be a
/// `run.json` and its `config` field is used.
fn read_config_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| config_error(path, format!("cannot read config file: {e}")))?;
    if path.extension().is_some_and(|e| e == "json") {
        let info: RunInfo<serde_json::Value> = read_run_info(path)?;
        let value = strip_nulls(info.config).unwrap_or(serde_json::Value::Null);
        toml::Table::try_from(value).map_err(|e| config_error(path, e))
    } else {
        text.parse::<toml::Table>().map_err(|e| config_error(path, e))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Loads a training config and applies flag overrides. Unknown keys and
/// missing required keys are reported as config errors naming the key.
pub fn resolve_config(path: &Path, overrides: &Overrides) -> Result<TrainConfig> {
    let mut table = read_config_table(path)?;
    // A relative data root in a file is taken relative to that file, so the
    // config works from any working directory.
    if let Some(toml::Value::String(root)) = table.get("data").and_then(|d| d.get("root")).cloned() {
        if Path::new(&root).is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            set_key(&mut table, "data.root", toml::Value::String(base.join(root).to_string_lossy().into_owned()))?;
        }
    }
    if let Some(v) = overrides.total_steps {
        set_key(&mut table, "total_steps", toml::Value::Integer(v as i64))?;
    }
    if let Some(v) = overrides.batch_size {
        set_key(&mut table, "batch_size", toml::Value::Integer(v as i64))?;
    }
    if let Some(v) = overrides.seed {
        set_key(&mut table, "seed", toml::Value::Integer(v as i64))?;
    }
    if let Some(v) = &overrides.data_root {
        set_key(&mut table, "data.root", toml::Value::String(v.to_string_lossy().into_owned()))?;
    }
    if let Some(v) = overrides.checkpoint_interval {
        set_key(&mut table, "checkpoint_interval", toml::Value::Integer(v as i64))?;
    }
    if let Some(v) = overrides.eval_interval {
        set_key(&mut table, "eval_interval", toml::Value::Integer(v as i64))?;
    }
    for kv in &overrides.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        set_key(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let mut cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| config_error(path, e.message()))?;
    if let Some(root) = cfg.data.root.take() {
        cfg.data.root = Some(fs::canonicalize(&root).unwrap_or(root));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_root(cfg: &TrainConfig) -> Result<&Path> {
    cfg.data
        .root
        .as_deref()
        .ok_or_else(|| Error::Config("data.root must be set (in the config or with --data-root)".into()))
}

fn datagen(a: &DatagenArgs) -> Result<()> {
    let mut spec = ToyDomainSpec {
        image_size: a.size,
        channels: a.channels,
        seed: a.seed,
        ..ToyDomainSpec::default()
    };
    if let Some(s) = a.effect_strength {
        spec.effect_strength = s;
    }
    let labels: Vec<DomainLabel> = a.domains.iter().enumerate().map(|(i, n)| DomainLabel::new(i, n.trim())).collect();
    let manifest = generate_toy_dataset(&spec, a.per_domain, &ToyDomain::from_labels(&labels), &a.out)?;
    println!(
        "wrote {} images in {} domains to {}",
        manifest.count * manifest.domains.len(),
        manifest.domains.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let cfg = resolve_config(&a.config, &a.overrides)?;
    let root = data_root(&cfg)?;
    let split = split_dataset(root, cfg.data.split_fraction, cfg.data.split_seed)?;
    let run = RunDirectory::create(&a.run_dir)?;
    run.write_run_info(&RunInfo::new(&argv.join(" "), cfg.seed, cfg.clone()))?;
    let ckpt = fit(&cfg, &split, &run, a.resume.as_deref())?;
    println!("final checkpoint: {}", ckpt.display());
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let count = match a.count {
        Some(n) => n,
        None => list_images(&a.source_dir)?.len(),
    };
    translate_corpus(&a.ckpt, &a.source_dir, &a.source_domain, &a.target_domain, count, &a.out)?;
    println!("wrote {count} images to {}", a.out.display());
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let net = NetworkConfig {
        channels: a.channels,
        phi_seed: a.phi_seed,
        ..NetworkConfig::default()
    };
    let embedder = FeatureEmbedder::new(&net)?;
    let opts = RealismOptions {
        bootstrap: a.bootstrap,
        seed: a.seed,
        ..RealismOptions::default()
    };
    let report = realism_report(&a.real, &a.synth, &embedder, &opts)?;
    report.write(&a.out)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| config_error(path, format!("cannot read config file: {e}")))?;
    toml::from_str(&text).map_err(|e| config_error(path, e.message()))
}

fn pad_bench(a: &PadBenchArgs) -> Result<()> {
    let cfg: PadBenchConfig = read_toml(&a.config)?;
    cfg.detector.validate()?;
    let split = split_dataset(&cfg.data_root, cfg.split_fraction, cfg.split_seed)?;
    let test_sets = vec![TestSet {
        name: "toy-test".into(),
        items: split.test.clone(),
    }];
    let report = pad_experiment(&split, cfg.synth_dir.as_deref(), &test_sets, &cfg.detector, cfg.channels)?;
    report.write(&cfg.out, "pad")?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn generations(a: &GenerationsArgs) -> Result<()> {
    let cfg = resolve_config(&a.config, &Overrides::default())?;
    let root = data_root(&cfg)?.to_path_buf();
    let detector = match &a.detector {
        Some(p) => read_toml(p)?,
        None => PadDetectorConfig::default(),
    };
    let opts = GenerationsOptions {
        real_root: root,
        work_dir: a.out.clone(),
        per_domain: a.per_domain,
        detector,
    };
    let report = generations_harness(&cfg, a.k, &opts)?;
    report.write(&a.out)?;
    print!("{}", report.to_markdown());
    Ok(())
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let matches = match command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let words: Vec<String> = argv.iter().map(|s| s.to_string_lossy().into_owned()).collect();
    let result = match &cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Train(a) => train(a, &words),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::PadBench(a) => pad_bench(a),
        Command::Generations(a) => generations(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
