//! Command-line front end.
//!
//! Every run merges an optional INI file (sections `[dataset]`, `[model]`,
//! `[train]`, `[output]`) with command-line flags, flags taking precedence,
//! and writes the fully resolved configuration next to its outputs as
//! `resolved-<subcommand>.ini`. Feeding that file back through `--config`
//! repeats the run.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical
//! failure (blow-up, non-finite values, or a failed gradient/stability check).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, CommandFactory, Parser, Subcommand};
use ini::{EscapePolicy, Ini};
use log::{info, warn};

use crate::datagen::{self, GeneratorConfig, System};
use crate::dataio::{self, Checkpoint, Delimiter};
use crate::dictionary::DictionarySpec;
use crate::error::NaedError;
use crate::gradients;
use crate::model::Parameters;
use crate::portrait::{self, PortraitFormat, PortraitSpec, Window};
use crate::signal::Dataset;
use crate::stability::{self, StabilityConfig};
use crate::trainer::{self, BatchSize, TrainConfig, TrainReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Keys accepted in each section. `param.<name>` entries of `[dataset]` set
/// generator system parameters.
const SCHEMA: &[(&str, &[&str])] = &[
    (
        "dataset",
        &[
            "system",
            "seed",
            "samples",
            "train_fraction",
            "final_time",
            "sample_rate",
            "noise_variance",
            "forcing_terms",
            "reference_substeps",
            "lv_input_mode",
            "lorenz_classical",
            "train",
            "test",
            "format",
            "delimiter",
            "input_dim",
            "classes",
            "batch",
            "max_samples",
        ],
    ),
    ("model", &["dict", "m", "k", "period", "checkpoint"]),
    (
        "train",
        &[
            "seed",
            "learning_rate",
            "epochs",
            "batch_size",
            "substeps",
            "tol",
            "patience",
            "lambda",
            "lambda_grid",
            "restarts",
            "init_scale",
            "threads",
            "fd_step",
            "tolerance",
            "l1_trials",
            "wiener_paths",
            "max_l1",
            "wiener_refine",
        ],
    ),
    ("output", &["dir", "format", "window", "grid", "samples"]),
];

#[derive(Debug, Parser)]
#[command(name = "naed", version, about = "Classify time signals with learned forced dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset pair.
    Generate(GenerateArgs),
    /// Train a model and write checkpoint, report and epoch log.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Compare adjoint gradients with finite differences on a random problem.
    Gradcheck(GradcheckArgs),
    /// Choose the sparsity threshold by stratified cross-validation.
    CvLambda(CvArgs),
    /// Phase portrait of a model with two hidden dimensions.
    Portrait(PortraitArgs),
    /// Empirical check of the perturbation stability bounds.
    StabilityCheck(StabilityArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// INI configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Worker threads (NAED_THREADS overrides).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// oscillator, van-der-pol, lorenz, lotka-volterra or gated-diffusion.
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    final_time: Option<f64>,
    #[arg(long)]
    sample_rate: Option<f64>,
    #[arg(long)]
    noise_variance: Option<f64>,
    #[arg(long)]
    forcing_terms: Option<usize>,
    #[arg(long)]
    reference_substeps: Option<usize>,
    /// Lotka–Volterra recorded signal: x or xdot.
    #[arg(long)]
    lv_input: Option<String>,
    /// Use the drift σ(u₂ − u₁) for the Lorenz system.
    #[arg(long)]
    lorenz_classical: bool,
    /// System parameter override, repeatable: `--param kappa=0.36`.
    #[arg(long = "param", value_name = "NAME=VALUE")]
    params: Vec<String>,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Training dataset.
    #[arg(long)]
    train: Option<String>,
    /// Held-out dataset.
    #[arg(long)]
    test: Option<String>,
    /// jsonl (default) or ucr.
    #[arg(long)]
    data_format: Option<String>,
    /// UCR delimiter: tab, comma or whitespace (detected by default).
    #[arg(long)]
    delimiter: Option<String>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// poly or fourier.
    #[arg(long)]
    dict: Option<String>,
    /// Hidden dimension.
    #[arg(long)]
    m: Option<usize>,
    /// Polynomial degree or number of Fourier harmonics.
    #[arg(long)]
    k: Option<usize>,
    /// Fourier period (defaults to the final time of the data).
    #[arg(long)]
    period: Option<f64>,
}

#[derive(Debug, Args)]
struct OptimArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// `full` or a mini-batch size.
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    substeps: Option<usize>,
    /// Relative loss change regarded as converged.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Hard threshold for β (0 trains a dense model).
    #[arg(long)]
    lambda: Option<f64>,
    /// Random initializations; the lowest training loss wins.
    #[arg(long)]
    restarts: Option<usize>,
    /// Multiplier on the initial β range.
    #[arg(long)]
    init_scale: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
}

#[derive(Debug, Args)]
struct CheckpointDataArgs {
    #[arg(long)]
    checkpoint: Option<String>,
    /// Dataset to evaluate on.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    data_format: Option<String>,
    #[arg(long)]
    delimiter: Option<String>,
    #[arg(long)]
    substeps: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    input: CheckpointDataArgs,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    substeps: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Number of random series in the batch.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    fd_step: Option<f64>,
    /// Largest acceptable relative error.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Comma-separated candidate thresholds.
    #[arg(long)]
    lambda_grid: Option<String>,
}

#[derive(Debug, Args)]
struct PortraitArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    input: CheckpointDataArgs,
    /// svg or csv.
    #[arg(long)]
    format: Option<String>,
    /// `h1min,h1max,h2min,h2max`; fitted to the trajectories by default.
    #[arg(long, allow_hyphen_values = true)]
    window: Option<String>,
    /// Grid points per axis.
    #[arg(long)]
    grid: Option<usize>,
    /// Comma-separated sample ids to draw.
    #[arg(long)]
    samples: Option<String>,
}

#[derive(Debug, Args)]
struct StabilityArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    input: CheckpointDataArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    l1_trials: Option<usize>,
    #[arg(long)]
    wiener_paths: Option<usize>,
    #[arg(long)]
    max_l1: Option<f64>,
    #[arg(long)]
    wiener_refine: Option<usize>,
    /// Use at most this many series of the dataset.
    #[arg(long)]
    max_samples: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Validation(String),
    Numerical(String),
}

impl From<NaedError> for CliError {
    fn from(e: NaedError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Validation(format!("i/o error on {}: {e}", path.display()))
}

/// Merged configuration: INI values overridden by flags.
struct Settings {
    values: BTreeMap<(String, String), String>,
    command: &'static str,
}

impl Settings {
    fn new(command: &'static str, config: Option<&Path>) -> CliResult<Self> {
        let mut settings = Self {
            values: BTreeMap::new(),
            command,
        };
        let Some(path) = config else {
            return Ok(settings);
        };
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let ini = Ini::load_from_str_noescape(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let Some(section) = section else {
                    return Err(CliError::Validation(format!(
                        "{}: key `{key}` must sit inside a section",
                        path.display()
                    )));
                };
                check_key(section, key)?;
                settings.values.insert((section.to_string(), key.to_string()), value.trim().to_string());
            }
        }
        Ok(settings)
    }

    fn set(&mut self, section: &str, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.values.insert((section.to_string(), key.to_string()), v.to_string());
        }
    }

    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(&(section.to_string(), key.to_string())).map(String::as_str)
    }

    fn get<T: FromStr>(&self, section: &str, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(section, key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Validation(format!("invalid value `{v}` for [{section}] {key}: {e}")))
            })
            .transpose()
    }

    /// Value or default; the default is recorded so the resolved file is
    /// complete.
    fn get_or<T: FromStr + ToString>(&mut self, section: &str, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(section, key)? {
            Some(v) => Ok(v),
            None => {
                self.set(section, key, Some(default.to_string()));
                Ok(default)
            }
        }
    }

    fn require<T: FromStr>(&self, section: &str, key: &str, flag: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(section, key)?.ok_or_else(|| {
            CliError::Usage(format!(
                "`{}` needs {flag} (or `{key}` in the [{section}] section of the config)",
                self.command
            ))
        })
    }

    fn output_dir(&mut self) -> CliResult<PathBuf> {
        let dir = PathBuf::from(self.get_or("output", "dir", "naed-out".to_string())?);
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        Ok(dir)
    }

    fn write_resolved(&self, dir: &Path) -> CliResult<()> {
        let mut ini = Ini::new();
        for ((section, key), value) in &self.values {
            ini.with_section(Some(section.as_str())).set(key.as_str(), value.as_str());
        }
        let path = dir.join(format!("resolved-{}.ini", self.command));
        ini.write_to_file_policy(&path, EscapePolicy::Nothing)
            .map_err(|e| io_error(&path, e))
    }
}

fn check_key(section: &str, key: &str) -> CliResult<()> {
    let Some((_, keys)) = SCHEMA.iter().find(|(s, _)| *s == section) else {
        return Err(CliError::Validation(format!("unknown config section [{section}]")));
    };
    if keys.contains(&key) || (section == "dataset" && key.starts_with("param.")) {
        Ok(())
    } else {
        Err(CliError::Validation(format!("unknown config key `{key}` in [{section}]")))
    }
}

fn apply_common(settings: &mut Settings, common: &CommonArgs) {
    settings.set("output", "dir", common.out.as_ref());
    settings.set("train", "threads", common.threads);
}

fn apply_model(settings: &mut Settings, model: &ModelArgs) {
    settings.set("model", "dict", model.dict.as_ref());
    settings.set("model", "m", model.m);
    settings.set("model", "k", model.k);
    settings.set("model", "period", model.period);
}

fn apply_data(settings: &mut Settings, data: &DataArgs) {
    settings.set("dataset", "train", data.train.as_ref());
    settings.set("dataset", "test", data.test.as_ref());
    settings.set("dataset", "format", data.data_format.as_ref());
    settings.set("dataset", "delimiter", data.delimiter.as_ref());
}

fn apply_optim(settings: &mut Settings, o: &OptimArgs) {
    settings.set("train", "seed", o.seed);
    settings.set("train", "learning_rate", o.learning_rate);
    settings.set("train", "epochs", o.epochs);
    settings.set("train", "batch_size", o.batch_size.as_ref());
    settings.set("train", "substeps", o.substeps);
    settings.set("train", "tol", o.tol);
    settings.set("train", "patience", o.patience);
    settings.set("train", "lambda", o.lambda);
    settings.set("train", "restarts", o.restarts);
    settings.set("train", "init_scale", o.init_scale);
}

fn apply_checkpoint_data(settings: &mut Settings, input: &CheckpointDataArgs) {
    settings.set("model", "checkpoint", input.checkpoint.as_ref());
    settings.set("dataset", "test", input.data.as_ref());
    settings.set("dataset", "format", input.data_format.as_ref());
    settings.set("dataset", "delimiter", input.delimiter.as_ref());
    settings.set("train", "substeps", input.substeps);
}

fn configure_threads(settings: &mut Settings) -> CliResult<()> {
    let from_env = match std::env::var("NAED_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|e| CliError::Validation(format!("invalid NAED_THREADS `{v}`: {e}")))?,
        ),
        Err(_) => None,
    };
    let threads = match from_env {
        Some(n) => {
            settings.set("train", "threads", Some(n));
            Some(n)
        }
        None => settings.get::<usize>("train", "threads")?,
    };
    if let Some(n) = threads.filter(|&n| n > 0) {
        // a second call in the same process keeps the first pool
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("thread pool already initialized; ignoring threads = {n}");
        }
    }
    Ok(())
}

fn load_dataset(settings: &mut Settings, key: &str, flag: &str) -> CliResult<Dataset> {
    let path: String = settings.require("dataset", key, flag)?;
    let format = settings.get_or("dataset", "format", "jsonl".to_string())?;
    let path = Path::new(&path);
    match format.as_str() {
        "jsonl" => Ok(dataio::read_dataset(path)?),
        "ucr" => {
            let delimiter = match settings.get::<String>("dataset", "delimiter")?.as_deref() {
                None | Some("auto") => None,
                Some("tab") => Some(Delimiter::Tab),
                Some("comma") => Some(Delimiter::Comma),
                Some("whitespace") => Some(Delimiter::Whitespace),
                Some(other) => {
                    return Err(CliError::Validation(format!(
                        "unknown delimiter `{other}` (expected tab, comma or whitespace)"
                    )))
                }
            };
            Ok(dataio::read_ucr(path, delimiter)?)
        }
        other => Err(CliError::Validation(format!("unknown dataset format `{other}` (expected jsonl or ucr)"))),
    }
}

fn model_spec(settings: &mut Settings, default_period: f64) -> CliResult<DictionarySpec> {
    let dict = settings.get_or("model", "dict", "poly".to_string())?;
    let m = settings.get_or("model", "m", 2usize)?;
    let k = settings.get_or("model", "k", 1usize)?;
    let spec = match dict.as_str() {
        "poly" | "polynomial" => DictionarySpec::polynomial(m, k)?,
        "fourier" => {
            let period = settings.get_or("model", "period", default_period)?;
            DictionarySpec::fourier(m, k, period)?
        }
        other => return Err(CliError::Validation(format!("unknown dictionary `{other}` (expected poly or fourier)"))),
    };
    Ok(spec)
}

fn train_config(settings: &mut Settings) -> CliResult<TrainConfig> {
    let defaults = TrainConfig::default();
    let seed: u64 = settings.require("train", "seed", "--seed")?;
    let batch = settings.get_or("train", "batch_size", "full".to_string())?;
    let batch_size = if batch == "full" {
        BatchSize::Full
    } else {
        BatchSize::Mini(
            batch
                .parse()
                .map_err(|_| CliError::Validation(format!("batch_size must be `full` or a count, got `{batch}`")))?,
        )
    };
    let config = TrainConfig {
        learning_rate: settings.get_or("train", "learning_rate", defaults.learning_rate)?,
        max_epochs: settings.get_or("train", "epochs", defaults.max_epochs)?,
        batch_size,
        substeps: settings.get_or("train", "substeps", defaults.substeps)?,
        convergence_tol: settings.get_or("train", "tol", defaults.convergence_tol)?,
        patience: settings.get_or("train", "patience", defaults.patience)?,
        sparse_lambda: settings.get_or("train", "lambda", defaults.sparse_lambda)?,
        init_beta_scale: settings.get_or("train", "init_scale", defaults.init_beta_scale)?,
        seed,
        ..defaults
    };
    config.validate()?;
    Ok(config)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(NaedError::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn class_summary(name: &str, ds: &Dataset) -> String {
    let counts = ds.class_counts();
    let total = ds.len().max(1) as f64;
    let parts: Vec<String> = counts
        .iter()
        .enumerate()
        .map(|(c, n)| format!("class {c}: {n} ({:.1}%)", 100.0 * *n as f64 / total))
        .collect();
    format!("{name}: {} series, {}", ds.len(), parts.join(", "))
}

fn cmd_generate(args: GenerateArgs) -> CliResult<()> {
    let mut s = Settings::new("generate", args.common.config.as_deref())?;
    apply_common(&mut s, &args.common);
    s.set("dataset", "system", args.system.as_ref());
    s.set("dataset", "seed", args.seed);
    s.set("dataset", "samples", args.samples);
    s.set("dataset", "train_fraction", args.train_fraction);
    s.set("dataset", "final_time", args.final_time);
    s.set("dataset", "sample_rate", args.sample_rate);
    s.set("dataset", "noise_variance", args.noise_variance);
    s.set("dataset", "forcing_terms", args.forcing_terms);
    s.set("dataset", "reference_substeps", args.reference_substeps);
    s.set("dataset", "lv_input_mode", args.lv_input.as_ref());
    if args.lorenz_classical {
        s.set("dataset", "lorenz_classical", Some(true));
    }
    for p in &args.params {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--param expects NAME=VALUE, got `{p}`")))?;
        s.set("dataset", &format!("param.{}", k.trim()), Some(v.trim()));
    }
    configure_threads(&mut s)?;

    let system: System = s.require::<String>("dataset", "system", "--system")?.parse()?;
    let seed: u64 = s.require("dataset", "seed", "--seed")?;
    let mut cfg = GeneratorConfig::new(system, seed);
    cfg.samples = s.get_or("dataset", "samples", cfg.samples)?;
    cfg.train_fraction = s.get_or("dataset", "train_fraction", cfg.train_fraction)?;
    cfg.final_time = s.get_or("dataset", "final_time", cfg.final_time)?;
    cfg.sample_rate = s.get_or("dataset", "sample_rate", cfg.sample_rate)?;
    cfg.noise_variance = s.get_or("dataset", "noise_variance", cfg.noise_variance)?;
    cfg.forcing_terms = s.get_or("dataset", "forcing_terms", cfg.forcing_terms)?;
    cfg.reference_substeps = s.get_or("dataset", "reference_substeps", cfg.reference_substeps)?;
    cfg.lv_input_mode = s.get_or("dataset", "lv_input_mode", "x".to_string())?.parse()?;
    cfg.lorenz_classical = s.get_or("dataset", "lorenz_classical", false)?;
    let overrides: Vec<(String, String)> = s
        .values
        .iter()
        .filter(|((sec, k), _)| sec == "dataset" && k.starts_with("param."))
        .map(|((_, k), v)| (k["param.".len()..].to_string(), v.clone()))
        .collect();
    for (k, v) in overrides {
        let value: f64 = v
            .parse()
            .map_err(|e| CliError::Validation(format!("invalid value `{v}` for parameter {k}: {e}")))?;
        cfg.set_param(&k, value)?;
    }
    cfg.validate()?;

    let dir = s.output_dir()?;
    let (train, test) = datagen::generate(&cfg)?;
    let train_path = dir.join("train.jsonl");
    let test_path = dir.join("test.jsonl");
    dataio::write_dataset(&train_path, &train)?;
    dataio::write_dataset(&test_path, &test)?;
    s.write_resolved(&dir)?;
    eprintln!("{}", class_summary("train", &train));
    eprintln!("{}", class_summary("test", &test));
    info!("wrote {} and {}", train_path.display(), test_path.display());
    Ok(())
}

struct TrainedModel {
    spec: DictionarySpec,
    params: Parameters,
    report: TrainReport,
    seed: u64,
}

fn train_with_restarts(
    train: &Dataset,
    test: Option<&Dataset>,
    spec: &DictionarySpec,
    config: &TrainConfig,
    restarts: usize,
) -> CliResult<TrainedModel> {
    let mut best: Option<TrainedModel> = None;
    for r in 0..restarts.max(1) {
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(r as u64),
            ..config.clone()
        };
        let (params, report) = trainer::train(train, test, spec, &cfg)?;
        let best_loss = report.loss_history.iter().cloned().fold(f64::INFINITY, f64::min);
        info!(
            "initialization seed {}: best loss {best_loss:.6}, train accuracy {:.4}{}",
            cfg.seed,
            report.train_accuracy,
            report.test_accuracy.map(|a| format!(", test accuracy {a:.4}")).unwrap_or_default()
        );
        let better = best.as_ref().map_or(true, |b| {
            best_loss < b.report.loss_history.iter().cloned().fold(f64::INFINITY, f64::min)
        });
        if better {
            best = Some(TrainedModel {
                spec: spec.clone(),
                params,
                report,
                seed: cfg.seed,
            });
        }
    }
    Ok(best.expect("at least one restart"))
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let mut s = Settings::new("train", args.common.config.as_deref())?;
    apply_common(&mut s, &args.common);
    apply_data(&mut s, &args.data);
    apply_model(&mut s, &args.model);
    apply_optim(&mut s, &args.optim);
    configure_threads(&mut s)?;

    let train = load_dataset(&mut s, "train", "--train")?;
    let test = match s.raw("dataset", "test") {
        Some(_) => Some(load_dataset(&mut s, "test", "--test")?),
        None => None,
    };
    let spec = model_spec(&mut s, train.max_final_time())?;
    let config = train_config(&mut s)?;
    let restarts = s.get_or("train", "restarts", 1usize)?;
    let dir = s.output_dir()?;

    let start = std::time::Instant::now();
    let best = train_with_restarts(&train, test.as_ref(), &spec, &config, restarts)?;
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), best.seed.to_string());
    meta.insert("epochs".to_string(), best.report.epochs.to_string());
    dataio::write_checkpoint(
        &dir.join("checkpoint.json"),
        &Checkpoint {
            spec: best.spec,
            params: best.params,
            meta,
        },
    )?;
    // wall time varies between runs, so it goes to the log instead
    let mut report = serde_json::to_value(&best.report).map_err(NaedError::from)?;
    if let Some(obj) = report.as_object_mut() {
        obj.remove("wall_time_secs");
        obj.insert("seed".into(), best.seed.into());
    }
    write_json(&dir.join("report.json"), &report)?;
    let csv_path = dir.join("epochs.csv");
    let mut csv = Vec::new();
    best.report.write_epoch_csv(&mut csv).map_err(|e| io_error(&csv_path, e))?;
    fs::write(&csv_path, csv).map_err(|e| io_error(&csv_path, e))?;
    s.write_resolved(&dir)?;
    eprintln!(
        "train accuracy {:.4}{}, nonzero beta {}, {} epochs, {:.1}s",
        best.report.train_accuracy,
        best.report.test_accuracy.map(|a| format!(", test accuracy {a:.4}")).unwrap_or_default(),
        best.report.nonzero_beta_count,
        best.report.epochs,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_checkpoint(s: &mut Settings) -> CliResult<Checkpoint> {
    let path: String = s.require("model", "checkpoint", "--checkpoint")?;
    Ok(dataio::read_checkpoint(Path::new(&path))?)
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult<()> {
    let mut s = Settings::new("evaluate", args.common.config.as_deref())?;
    apply_common(&mut s, &args.common);
    apply_checkpoint_data(&mut s, &args.input);
    configure_threads(&mut s)?;
    let ckpt = load_checkpoint(&mut s)?;
    let data = load_dataset(&mut s, "test", "--data")?;
    let substeps = s.get_or("train", "substeps", 1usize)?;
    let dir = s.output_dir()?;
    let accuracy = trainer::evaluate(
        &ckpt.params,
        &ckpt.spec,
        &data.series,
        crate::integrator::SolverConfig::with_substeps(substeps),
    )?;
    write_json(
        &dir.join("accuracy.json"),
        &serde_json::json!({ "accuracy": accuracy, "samples": data.len() }),
    )?;
    s.write_resolved(&dir)?;
    eprintln!("accuracy {accuracy:.4} on {} series", data.len());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let mut s = Settings::new("gradcheck", args.common.config.as_deref())?;
    apply_common(&mut s, &args.common);
    apply_model(&mut s, &args.model);
    s.set("train", "seed", args.seed);
    s.set("train", "substeps", args.substeps);
    s.set("dataset", "input_dim", args.input_dim);
    s.set("dataset", "classes", args.classes);
    s.set("dataset", "batch", args.batch);
    s.set("train", "fd_step", args.fd_step);
    s.set("train", "tolerance", args.tolerance);
    configure_threads(&mut s)?;

    let seed = s.get_or("train", "seed", 0u64)?;
    let substeps = s.get_or("train", "substeps", 8usize)?;
    let input_dim = s.get_or("dataset", "input_dim", 1usize)?;
    let classes = s.get_or("dataset", "classes", 2usize)?;
    let batch = s.get_or("dataset", "batch", 6usize)?;
    let fd_step = s.get_or("train", "fd_step", gradients::DEFAULT_FD_STEP)?;
    let tolerance = s.get_or("train", "tolerance", 1e-3)?;
    let spec = model_spec(&mut s, 20.0)?;
    if substeps == 0 || input_dim == 0 || classes < 2 || batch == 0 {
        return Err(CliError::Validation(
            "gradcheck needs substeps, input_dim and batch ≥ 1 and classes ≥ 2".into(),
        ));
    }
    let dir = s.output_dir()?;

    let (params, series) = gradients::gradcheck_problem(&spec, input_dim, classes, batch, seed)?;
    let mut levels = vec![substeps, 2 * substeps];
    if substeps >= 2 {
        levels.insert(0, substeps / 2);
    }
    let report = gradients::convergence_study(&params, &spec, &series, &levels, fd_step)?;
    let at = report
        .levels
        .iter()
        .find(|l| l.substeps == substeps)
        .expect("requested level is part of the study");
    let passed = at.max_error < tolerance;
    write_json(
        &dir.join("gradcheck.json"),
        &serde_json::json!({
            "substeps": substeps,
            "max_relative_error": at.max_error,
            "tolerance": tolerance,
            "passed": passed,
            "blocks": gradients::BLOCK_NAMES,
            "study": report,
        }),
    )?;
    s.write_resolved(&dir)?;
    for l in &report.levels {
        eprintln!("s = {:>3}: max relative error {:.3e} {:?}", l.substeps, l.max_error, l.block_errors);
    }
    let ratios: Vec<String> = report.ratios.iter().map(|r| format!("{r:.2}")).collect();
    eprintln!("convergence ratios per doubling: {}", ratios.join(", "));
    if passed {
        eprintln!("gradcheck passed: {:.3e} < {tolerance:e}", at.max_error);
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradcheck failed: max relative error {:.3e} at s = {substeps} exceeds {tolerance:e}",
            at.max_error
        )))
    }
}

fn cmd_cv(args: CvArgs) -> CliResult<()> {
    let mut s = Settings::new("cv-lambda", args.common.config.as_deref())?;
    apply_common(&mut s, &args.common);
    apply_data(&mut s, &args.data);
    apply_model(&mut s, &args.model);
    apply_optim(&mut s, &args.optim);
    s.set("train", "lambda_grid", args.lambda_grid.as_ref());
    configure_threads(&mut s)?;

    let data = load_dataset(&mut s, "train", "--train")?;
    let spec = model_spec(&mut s, data.max_final_time())?;
    let config = train_config(&mut s)?;
    let default_grid = trainer::LAMBDA_GRID.map(|l| l.to_string()).join(",");
    let grid_text = s.get_or("train", "lambda_grid", default_grid)?;
    let grid = grid_text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Validation(format!("invalid lambda_grid entry `{v}`: {e}")))
        })
        .collect::<CliResult<Vec<f64>>>()?;
    let dir = s.output_dir()?;
    let report = trainer::cross_validate_lambda(&data, &spec, &config, &grid)?;
    write_json(&dir.join("cv.json"), &report)?;
    let mut table = String::from("lambda,fold,accuracy\n");
    for score in &report.scores {
        for (f, acc) in score.fold_accuracies.iter().enumerate() {
            table.push_str(&format!("{},{},{}\n", score.lambda, f, acc));
        }
    }
    let table_path = dir.join("cv_folds.csv");
    fs::write(&table_path, table).map_err(|e| io_error(&table_path, e))?;
    s.write_resolved(&dir)?;
    for score in &report.scores {
        eprintln!("lambda {:<6} mean accuracy {:.4}", score.lambda, score.mean_accuracy);
    }
    eprintln!("chosen lambda {}", report.chosen);
    Ok(())
}

fn parse_window(text: &str) -> CliResult<Window> {
    let v: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Validation(format!("invalid window `{text}`: {e}")))?;
    if v.len() != 4 {
        return Err(CliError::Validation(format!("window needs four numbers, got `{text}`")));
    }
    Ok(Window::new(v[0], v[1], v[2], v[3])?)
}

fn cmd_portrait(args: PortraitArgs) -> CliResult<()> {
    let mut s = Settings::new("portrait", args.common.config.as_deref())?;
    apply_common(&mut s, &args.common);
    apply_checkpoint_data(&mut s, &args.input);
    s.set("output", "format", args.format.as_ref());
    s.set("output", "window", args.window.as_ref());
    s.set("output", "grid", args.grid);
    s.set("output", "samples", args.samples.as_ref());
    configure_threads(&mut s)?;

    let ckpt = load_checkpoint(&mut s)?;
    let data = load_dataset(&mut s, "test", "--data")?;
    let format: PortraitFormat = s.get_or("output", "format", "svg".to_string())?.parse()?;
    let grid = s.get_or("output", "grid", 21usize)?;
    let substeps = s.get_or("train", "substeps", 1usize)?;
    let sample_ids: Vec<String> = s
        .get::<String>("output", "samples")?
        .map(|v| v.split(',').map(|id| id.trim().to_string()).filter(|id| !id.is_empty()).collect())
        .unwrap_or_default();
    let window = match s.get::<String>("output", "window")? {
        Some(text) => parse_window(&text)?,
        None => {
            let w = portrait::fitted_window(&ckpt.params, &ckpt.spec, &data, &sample_ids, substeps)?;
            s.set(
                "output",
                "window",
                Some(format!("{},{},{},{}", w.h1_min, w.h1_max, w.h2_min, w.h2_max)),
            );
            w
        }
    };
    let dir = s.output_dir()?;
    let pspec = PortraitSpec {
        window,
        grid_resolution: grid,
        sample_ids,
        format,
        substeps,
    };
    let computed = portrait::compute_portrait(&ckpt.params, &ckpt.spec, &data, &pspec)?;
    let name = match format {
        PortraitFormat::Svg => "portrait.svg",
        PortraitFormat::Csv => "portrait.csv",
    };
    let path = dir.join(name);
    fs::write(&path, computed.render(format)).map_err(|e| io_error(&path, e))?;
    s.write_resolved(&dir)?;
    let [(r1, i1), (r2, i2)] = computed.eigenvalues;
    eprintln!("linear part eigenvalues: {r1:.4}{i1:+.4}i, {r2:.4}{i2:+.4}i");
    if computed.overlay.is_none() && computed.classes == 2 {
        warn!("readout matrix is singular; anchor and row overlay omitted");
    }
    Ok(())
}

fn cmd_stability(args: StabilityArgs) -> CliResult<()> {
    let mut s = Settings::new("stability-check", args.common.config.as_deref())?;
    apply_common(&mut s, &args.common);
    apply_checkpoint_data(&mut s, &args.input);
    s.set("train", "seed", args.seed);
    s.set("train", "l1_trials", args.l1_trials);
    s.set("train", "wiener_paths", args.wiener_paths);
    s.set("train", "max_l1", args.max_l1);
    s.set("train", "wiener_refine", args.wiener_refine);
    s.set("dataset", "max_samples", args.max_samples);
    configure_threads(&mut s)?;

    let ckpt = load_checkpoint(&mut s)?;
    let data = load_dataset(&mut s, "test", "--data")?;
    let defaults = StabilityConfig::default();
    let config = StabilityConfig {
        l1_trials: s.get_or("train", "l1_trials", defaults.l1_trials)?,
        wiener_paths: s.get_or("train", "wiener_paths", defaults.wiener_paths)?,
        max_l1: s.get_or("train", "max_l1", defaults.max_l1)?,
        wiener_refine: s.get_or("train", "wiener_refine", defaults.wiener_refine)?,
        substeps: s.get_or("train", "substeps", defaults.substeps)?,
        seed: s.get_or("train", "seed", defaults.seed)?,
    };
    let max_samples = s.get_or("dataset", "max_samples", 100usize)?;
    let dir = s.output_dir()?;
    let samples = &data.series[..data.len().min(max_samples)];
    let report = stability::stability_check(&ckpt.params, &ckpt.spec, samples, &config)?;
    write_json(&dir.join("stability.json"), &report)?;
    s.write_resolved(&dir)?;
    let l1 = &report.l1;
    let w = &report.wiener;
    eprintln!(
        "L = {:.4e}; L1 perturbations: {} violations in {} trials (max ratio {:.3e}), {} certified flips",
        l1.constant.value, l1.violations, l1.trials, l1.max_ratio, l1.certified_flips
    );
    eprintln!(
        "Wiener paths: {} pathwise violations in {}, tail {:.4} and sup tail {:.4} against bound {:.4}",
        w.pathwise_violations, w.paths, w.empirical_tail, w.sup_tail, w.tail_bound
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Numerical("stability bounds violated".into()))
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::CvLambda(a) => cmd_cv(a),
        Command::Portrait(a) => cmd_portrait(a),
        Command::StabilityCheck(a) => cmd_stability(a),
    }
}

fn subcommand_name(command: &Command) -> &'static str {
    match command {
        Command::Generate(_) => "generate",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Gradcheck(_) => "gradcheck",
        Command::CvLambda(_) => "cv-lambda",
        Command::Portrait(_) => "portrait",
        Command::StabilityCheck(_) => "stability-check",
    }
}

/// Parse `argv` (program name first), run the subcommand and return the exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let name = subcommand_name(&cli.command);
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let mut cmd = Cli::command();
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("{}", sub.render_usage());
            }
            EXIT_USAGE
        }
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            EXIT_VALIDATION
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("error: {msg}");
            EXIT_NUMERICAL
        }
    }
}
