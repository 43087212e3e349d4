//! Command-line pipeline: dataset synthesis, training, evaluation and the
//! α-sweep. Every value resolves as defaults < config file < flags, the
//! resolved configuration is echoed to the output directory before any
//! compute, and partial outputs are removed when a command fails.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{evaluate, sweep_alpha, write_sweep_csv};
use crate::featio::{
    generate_synthetic_dataset, write_feature_file, write_truth_file, DatasetManifest,
    ManifestEntry, SyntheticSpec,
};
use crate::netcore::{load_checkpoint, save_checkpoint};
use crate::trainer::{train_with_validation, LossMode, TrainingConfig};

#[derive(Parser)]
#[command(
    name = "arnet",
    version,
    about = "Weakly supervised anomaly-score regression over clip features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic weakly-labeled dataset with a manifest
    Synth(SynthArgs),
    /// Train a model from a training manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint against a test manifest with frame truth
    Eval(EvalArgs),
    /// Train and evaluate once per alpha value
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Master seed; init, dropout, sampling and synthesis all derive from it
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// key=value configuration file; flags take precedence over its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Feature dimension F
    #[arg(long)]
    pub dim: Option<usize>,
    /// Number of normal videos
    #[arg(long)]
    pub normal: Option<usize>,
    /// Number of abnormal videos
    #[arg(long)]
    pub abnormal: Option<usize>,
    /// Smallest per-video clip count
    #[arg(long)]
    pub clips_min: Option<usize>,
    /// Largest per-video clip count
    #[arg(long)]
    pub clips_max: Option<usize>,
    /// Fraction of an abnormal video's clips that are anomalous
    #[arg(long)]
    pub span: Option<f64>,
    /// Distance between class feature centers, in noise-scale units
    #[arg(long)]
    pub separation: Option<f64>,
    /// Probability of flipping a video's stored label
    #[arg(long)]
    pub label_noise: Option<f64>,
    /// Replace a non-empty output directory
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training manifest CSV
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Optional validation manifest; keeps the best-frame-AUC checkpoint
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    /// Top-k divisor α (k = ceil(t/α))
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Center-loss weight λ
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Adam learning rate
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    /// Dropout probability of the hidden layer
    #[arg(long, alias = "dropout")]
    pub dropout_p: Option<f64>,
    /// Normal videos per batch
    #[arg(long)]
    pub batch_normal: Option<usize>,
    /// Abnormal videos per batch
    #[arg(long)]
    pub batch_abnormal: Option<usize>,
    /// Optimizer iterations (one batch and one step each)
    #[arg(long)]
    pub epochs: Option<usize>,
    /// kmax-baseline, dmil or dmil-center
    #[arg(long)]
    pub loss_mode: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Parameter checkpoint to score with
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test manifest CSV; every entry needs a truth file
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Alarm threshold for the false-alarm rate
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training manifest CSV
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Test manifest CSV with truth files
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    /// Comma-separated α values, e.g. 1,2,4,8
    #[arg(long)]
    pub alphas: Option<String>,
    /// Alarm threshold for the false-alarm rate
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long, alias = "dropout")]
    pub dropout_p: Option<f64>,
    #[arg(long)]
    pub batch_normal: Option<usize>,
    #[arg(long)]
    pub batch_abnormal: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub loss_mode: Option<String>,
}

/// Keys a config file may set; anything else is rejected.
const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    "manifest",
    "val_manifest",
    "checkpoint",
    "test_manifest",
    "dim",
    "normal",
    "abnormal",
    "clips_min",
    "clips_max",
    "span",
    "separation",
    "label_noise",
    "alpha",
    "lambda",
    "learning_rate",
    "dropout_p",
    "batch_normal",
    "batch_abnormal",
    "epochs",
    "loss_mode",
    "threshold",
    "alphas",
];

/// Flat key=value configuration file. `#` starts a comment.
#[derive(Debug)]
struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            if !path.exists() {
                return Err(Error::Invalid(format!(
                    "config file does not exist: {}",
                    path.display()
                )));
            }
            for (line_no, raw) in fs::read_to_string(path)?.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Format(format!(
                        "{}:{}: expected key=value, got {raw:?}",
                        path.display(),
                        line_no + 1
                    ))
                })?;
                let key = key.trim();
                if !KNOWN_KEYS.contains(&key) {
                    return Err(Error::Invalid(format!(
                        "{}: unknown key '{key}'",
                        path.display()
                    )));
                }
                values.insert(key.to_string(), value.trim().to_string());
            }
        }
        Ok(Self { values })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Invalid(format!("config key '{key}' has invalid value '{raw}'"))
            }),
        }
    }
}

fn resolve<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str, default: T) -> Result<T> {
    Ok(flag.or(file.get(key)?).unwrap_or(default))
}

fn resolve_required<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str) -> Result<T> {
    flag.or(file.get(key)?).ok_or_else(|| {
        Error::Invalid(format!("missing required --{} (or {key}= in config)", key.replace('_', "-")))
    })
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "{what} does not exist: {}",
            path.display()
        )));
    }
    Ok(())
}

/// Tracks files and directories created by one command so a failure leaves
/// nothing half-written behind.
#[derive(Default)]
struct OutputGuard {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl OutputGuard {
    fn create_dir_all(&mut self, path: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cursor = path;
        while !cursor.exists() {
            missing.push(cursor.to_path_buf());
            match cursor.parent() {
                Some(parent) if !parent.as_os_str().is_empty() => cursor = parent,
                _ => break,
            }
        }
        fs::create_dir_all(path)?;
        missing.reverse();
        self.dirs.extend(missing);
        Ok(())
    }

    fn note_file(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    fn cleanup(&mut self) {
        for file in self.files.drain(..).rev() {
            let _ = fs::remove_file(file);
        }
        for dir in self.dirs.drain(..).rev() {
            let _ = fs::remove_dir(dir);
        }
    }
}

fn run_guarded(body: impl FnOnce(&mut OutputGuard) -> Result<()>) -> Result<()> {
    let mut guard = OutputGuard::default();
    match body(&mut guard) {
        Ok(()) => Ok(()),
        Err(e) => {
            guard.cleanup();
            Err(e)
        }
    }
}

fn write_echo(
    guard: &mut OutputGuard,
    out_dir: &Path,
    entries: &[(&str, String)],
) -> Result<()> {
    let path = out_dir.join("config_echo.txt");
    let mut text = String::new();
    for (key, value) in entries {
        text.push_str(&format!("{key}={value}\n"));
    }
    fs::write(&path, text)?;
    guard.note_file(path);
    Ok(())
}

fn kv(key: &'static str, value: impl Display) -> (&'static str, String) {
    (key, value.to_string())
}

// ── synth ────────────────────────────────────────────────────────────────────

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let out: PathBuf = resolve_required(args.common.out, &file, "out")?;
    let spec = SyntheticSpec {
        feature_dim: resolve(args.dim, &file, "dim", 32)?,
        n_normal: resolve(args.normal, &file, "normal", 20)?,
        n_abnormal: resolve(args.abnormal, &file, "abnormal", 20)?,
        clip_count_range: (
            resolve(args.clips_min, &file, "clips_min", 24)?,
            resolve(args.clips_max, &file, "clips_max", 48)?,
        ),
        anomaly_span_fraction: resolve(args.span, &file, "span", 0.3)?,
        class_separation: resolve(args.separation, &file, "separation", 4.0)?,
        label_noise_rate: resolve(args.label_noise, &file, "label_noise", 0.0)?,
        seed: resolve(args.common.seed, &file, "seed", 0)?,
    };
    spec.validate()?;

    if out.exists() && out.read_dir()?.next().is_some() {
        if !args.overwrite {
            return Err(Error::Invalid(format!(
                "output directory {} is not empty (pass --overwrite to replace it)",
                out.display()
            )));
        }
        fs::remove_dir_all(&out)?;
    }

    run_guarded(|guard| {
        guard.create_dir_all(&out)?;
        guard.create_dir_all(&out.join("features"))?;
        guard.create_dir_all(&out.join("truth"))?;
        write_echo(
            guard,
            &out,
            &[
                kv("command", "synth"),
                kv("dim", spec.feature_dim),
                kv("normal", spec.n_normal),
                kv("abnormal", spec.n_abnormal),
                kv("clips_min", spec.clip_count_range.0),
                kv("clips_max", spec.clip_count_range.1),
                kv("span", spec.anomaly_span_fraction),
                kv("separation", spec.class_separation),
                kv("label_noise", spec.label_noise_rate),
                kv("seed", spec.seed),
                kv("out", out.display()),
            ],
        )?;

        let bags = generate_synthetic_dataset(&spec)?;
        let mut entries = Vec::with_capacity(bags.len());
        for bag in &bags {
            let feature_rel = PathBuf::from("features").join(format!("{}.bin", bag.video_id));
            let truth_rel = PathBuf::from("truth").join(format!("{}.txt", bag.video_id));
            let feature_abs = out.join(&feature_rel);
            write_feature_file(bag, &feature_abs)?;
            guard.note_file(feature_abs);
            let truth_abs = out.join(&truth_rel);
            write_truth_file(bag.frame_truth.as_ref().unwrap(), &truth_abs)?;
            guard.note_file(truth_abs);
            entries.push(ManifestEntry {
                video_id: bag.video_id.clone(),
                label: bag.label.unwrap(),
                feature_path: feature_rel,
                frame_count: bag.frame_count,
                truth_path: Some(truth_rel),
            });
        }
        let manifest = DatasetManifest {
            entries,
            feature_dim: spec.feature_dim,
            base_dir: out.clone(),
        };
        let manifest_path = out.join("manifest.csv");
        manifest.save(&manifest_path)?;
        guard.note_file(manifest_path.clone());
        println!("{}", manifest_path.display());
        Ok(())
    })
}

// ── train ────────────────────────────────────────────────────────────────────

struct TrainSettings {
    manifest: PathBuf,
    val_manifest: Option<PathBuf>,
    out: PathBuf,
    config: TrainingConfig,
}

/// Training-related flag values shared by `train` and `sweep`.
#[derive(Default)]
struct TrainFlags {
    manifest: Option<PathBuf>,
    val_manifest: Option<PathBuf>,
    alpha: Option<f64>,
    lambda: Option<f64>,
    learning_rate: Option<f64>,
    dropout_p: Option<f64>,
    batch_normal: Option<usize>,
    batch_abnormal: Option<usize>,
    epochs: Option<usize>,
    loss_mode: Option<String>,
}

fn resolve_train_settings(
    file: &ConfigFile,
    common: CommonArgs,
    flags: TrainFlags,
) -> Result<TrainSettings> {
    let defaults = TrainingConfig::default();
    let loss_mode = match flags.loss_mode.or(file.get::<String>("loss_mode")?) {
        Some(raw) => LossMode::from_str(&raw)?,
        None => defaults.loss_mode,
    };
    let config = TrainingConfig {
        alpha: resolve(flags.alpha, file, "alpha", defaults.alpha)?,
        lambda: resolve(flags.lambda, file, "lambda", defaults.lambda)?,
        learning_rate: resolve(
            flags.learning_rate,
            file,
            "learning_rate",
            defaults.learning_rate,
        )?,
        dropout_p: resolve(flags.dropout_p, file, "dropout_p", defaults.dropout_p)?,
        batch_normal: resolve(flags.batch_normal, file, "batch_normal", defaults.batch_normal)?,
        batch_abnormal: resolve(
            flags.batch_abnormal,
            file,
            "batch_abnormal",
            defaults.batch_abnormal,
        )?,
        epochs: resolve(flags.epochs, file, "epochs", defaults.epochs)?,
        seed: resolve(common.seed, file, "seed", defaults.seed)?,
        loss_mode,
    };
    config.validate()?;
    let manifest: PathBuf = resolve_required(flags.manifest, file, "manifest")?;
    require_exists(&manifest, "manifest")?;
    let val_manifest: Option<PathBuf> = match flags.val_manifest.or(file.get("val_manifest")?) {
        Some(p) => {
            require_exists(&p, "validation manifest")?;
            Some(p)
        }
        None => None,
    };
    let out: PathBuf = resolve_required(common.out, file, "out")?;
    Ok(TrainSettings {
        manifest,
        val_manifest,
        out,
        config,
    })
}

fn train_echo_entries(settings: &TrainSettings) -> Vec<(&'static str, String)> {
    let c = &settings.config;
    vec![
        kv("command", "train"),
        kv("manifest", settings.manifest.display()),
        kv(
            "val_manifest",
            settings
                .val_manifest
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        ),
        kv("alpha", c.alpha),
        kv("lambda", c.lambda),
        kv("learning_rate", c.learning_rate),
        kv("dropout_p", c.dropout_p),
        kv("batch_normal", c.batch_normal),
        kv("batch_abnormal", c.batch_abnormal),
        kv("epochs", c.epochs),
        kv("seed", c.seed),
        kv("loss_mode", c.loss_mode),
        kv("out", settings.out.display()),
    ]
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let settings = resolve_train_settings(
        &file,
        args.common,
        TrainFlags {
            manifest: args.manifest,
            val_manifest: args.val_manifest,
            alpha: args.alpha,
            lambda: args.lambda,
            learning_rate: args.learning_rate,
            dropout_p: args.dropout_p,
            batch_normal: args.batch_normal,
            batch_abnormal: args.batch_abnormal,
            epochs: args.epochs,
            loss_mode: args.loss_mode,
        },
    )?;

    run_guarded(|guard| {
        guard.create_dir_all(&settings.out)?;
        write_echo(guard, &settings.out, &train_echo_entries(&settings))?;

        let manifest = DatasetManifest::load(&settings.manifest)?;
        let val_bags = match &settings.val_manifest {
            Some(path) => Some(DatasetManifest::load(path)?.load_bags()?),
            None => None,
        };
        let (params, history) =
            train_with_validation(&manifest, &settings.config, val_bags.as_deref())?;

        let checkpoint_path = settings.out.join("checkpoint.bin");
        save_checkpoint(&params, &checkpoint_path)?;
        guard.note_file(checkpoint_path.clone());
        let history_path = settings.out.join("history.csv");
        history.write_csv(&history_path)?;
        guard.note_file(history_path);
        if val_bags.is_some() {
            let val_path = settings.out.join("val_history.csv");
            history.write_validation_csv(&val_path)?;
            guard.note_file(val_path);
        }
        println!("{}", checkpoint_path.display());
        Ok(())
    })
}

// ── eval ─────────────────────────────────────────────────────────────────────

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let checkpoint: PathBuf = resolve_required(args.checkpoint, &file, "checkpoint")?;
    require_exists(&checkpoint, "checkpoint")?;
    let manifest_path: PathBuf = resolve_required(args.manifest, &file, "manifest")?;
    require_exists(&manifest_path, "manifest")?;
    let threshold = resolve(args.threshold, &file, "threshold", 0.5)?;
    let out: PathBuf = resolve_required(args.common.out, &file, "out")?;
    let seed = resolve(args.common.seed, &file, "seed", 0u64)?;

    run_guarded(|guard| {
        guard.create_dir_all(&out)?;
        write_echo(
            guard,
            &out,
            &[
                kv("command", "eval"),
                kv("checkpoint", checkpoint.display()),
                kv("manifest", manifest_path.display()),
                kv("threshold", threshold),
                kv("seed", seed),
                kv("out", out.display()),
            ],
        )?;

        let params = load_checkpoint(&checkpoint)?;
        let manifest = DatasetManifest::load(&manifest_path)?;
        if params.feature_dim() != manifest.feature_dim {
            return Err(Error::Shape(format!(
                "checkpoint feature dimension F={} does not match manifest feature dimension F={}",
                params.feature_dim(),
                manifest.feature_dim
            )));
        }
        let bags = manifest.load_bags()?;
        let report = evaluate(&params, &bags, threshold)?;

        let summary_path = out.join("summary.csv");
        report.write_summary_csv(&summary_path)?;
        guard.note_file(summary_path.clone());
        let trace_dir = out.join("traces");
        guard.create_dir_all(&trace_dir)?;
        for path in report.write_trace_csvs(&trace_dir)? {
            guard.note_file(path);
        }
        println!("{}", summary_path.display());
        Ok(())
    })
}

// ── sweep ────────────────────────────────────────────────────────────────────

fn parse_alphas(raw: &str) -> Result<Vec<f64>> {
    let mut alphas = Vec::new();
    for part in raw.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let alpha: f64 = part
            .parse()
            .map_err(|_| Error::Invalid(format!("bad alpha value '{part}'")))?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Invalid(format!("alpha must be positive, got {alpha}")));
        }
        alphas.push(alpha);
    }
    if alphas.is_empty() {
        return Err(Error::Invalid("alpha list is empty".into()));
    }
    Ok(alphas)
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let file = ConfigFile::load(args.common.config.as_deref())?;
    let alphas_raw: String = resolve_required(args.alphas, &file, "alphas")?;
    let alphas = parse_alphas(&alphas_raw)?;
    let threshold = resolve(args.threshold, &file, "threshold", 0.5)?;
    let test_manifest: PathBuf = resolve_required(args.test_manifest, &file, "test_manifest")?;
    require_exists(&test_manifest, "test manifest")?;
    let settings = resolve_train_settings(
        &file,
        args.common,
        TrainFlags {
            manifest: args.manifest,
            lambda: args.lambda,
            learning_rate: args.learning_rate,
            dropout_p: args.dropout_p,
            batch_normal: args.batch_normal,
            batch_abnormal: args.batch_abnormal,
            epochs: args.epochs,
            loss_mode: args.loss_mode,
            ..TrainFlags::default()
        },
    )?;

    run_guarded(|guard| {
        guard.create_dir_all(&settings.out)?;
        let mut entries = train_echo_entries(&settings);
        entries[0] = kv("command", "sweep");
        entries.retain(|(k, _)| *k != "alpha" && *k != "val_manifest");
        entries.push(kv("test_manifest", test_manifest.display()));
        entries.push(kv(
            "alphas",
            alphas
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ));
        entries.push(kv("threshold", threshold));
        write_echo(guard, &settings.out, &entries)?;

        let manifest = DatasetManifest::load(&settings.manifest)?;
        let test_bags = DatasetManifest::load(&test_manifest)?.load_bags()?;
        let rows = sweep_alpha(&manifest, &test_bags, &settings.config, &alphas, threshold)?;

        let sweep_path = settings.out.join("sweep.csv");
        write_sweep_csv(&rows, &sweep_path)?;
        guard.note_file(sweep_path.clone());
        println!("{}", sweep_path.display());
        Ok(())
    })
}

/// Parses the process arguments, runs the selected command and maps errors
/// to a nonzero exit code.
pub fn main_impl() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
