//! Experiment runner behind the `jcas` binary.
//!
//! Every subcommand resolves one [`ExperimentConfig`] (defaults, then the
//! `--config` file, then `--set key=value` overrides, then `--seed`/`--out`)
//! and writes JSON or CSV artifacts into the output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use jcas::dataset::{gen_shapes, labels_from_grid, labels_grid, load_dataset, save_dataset, ShapesConfig, Splits};
use jcas::model::{evaluate_counts, load_checkpoint, save_checkpoint, train, TrainConfig, TrainData};
use jcas::noise::{corrupt, summarize, NoiseSpec};
use jcas::ntm::{mc_translate_oracle, translate_closed_form, translate_exact, ClassDistribution, ClassNtm, NtmJson};
use jcas::seed::derive_seed;
use jcas::{read_grid, write_grid, LabelMap};

/// File holding corrupted training labels inside a dataset directory.
pub const NOISY_LABELS: &str = "noisy_train.jgrd";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    MissingFile(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::MissingFile(_) => 4,
            CliError::Data(_) => 5,
            CliError::Numeric(_) => 6,
            CliError::CheckFailed(_) => 7,
            CliError::Io(_) => 8,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::MissingFile(_) => "missing_file",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
            CliError::CheckFailed(_) => "check_failed",
            CliError::Io(_) => "io",
        }
    }
}

impl From<jcas::Error> for CliError {
    fn from(e: jcas::Error) -> Self {
        use jcas::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Json(_) => CliError::Config(msg),
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::MissingFile(msg),
            E::Io(_) => CliError::Io(msg),
            E::NonFinite(_) | E::SingularFeature(_) | E::DegenerateRow(_) => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "jcas", version, about = "Noisy-label segmentation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON experiment config; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Sets the dataset, noise and training seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override `dotted.key=value` (value parsed as JSON, else string).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset as GRID files.
    GenData,
    /// Corrupt the training labels of a dataset with the configured noise.
    Corrupt {
        /// Dataset directory (default: --out).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Class and affinity noise rates plus the empirical class NTM.
    NoiseStats {
        /// Dataset directory (default: --out).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Noisy label stack (default: <data>/noisy_train.jgrd).
        #[arg(long)]
        noisy: Option<PathBuf>,
    },
    /// Compare exact, closed-form and Monte-Carlo affinity NTMs.
    TranslateNtm,
    /// Finite-difference checks of every gradient.
    GradCheck,
    /// Train one model and evaluate it after every epoch.
    Train {
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on the clean test split.
    Eval {
        /// Checkpoint directory (default: <out>/checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslateConfig {
    /// Class NTM to translate; defaults to the noise pattern's NTM.
    pub ntm: Option<NtmJson>,
    /// Class distribution; defaults to uniform.
    pub distribution: Option<Vec<f64>>,
    pub samples: u64,
}

impl Default for TranslateConfig {
    fn default() -> Self {
        TranslateConfig {
            ntm: None,
            distribution: None,
            samples: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: ShapesConfig,
    pub noise: NoiseSpec,
    pub noise_seed: u64,
    pub train: TrainConfig,
    pub translate: TranslateConfig,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: ShapesConfig::default(),
            noise: NoiseSpec::default(),
            noise_seed: 7,
            train: TrainConfig::default(),
            translate: TranslateConfig::default(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    fn out_dir(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("an output directory is required (--out)".into()))
    }
}

fn merge(base: &mut Value, user: Value) {
    match (base, user) {
        // A tagged value with a different tag replaces the default wholesale.
        (Value::Object(b), Value::Object(u)) if !u.contains_key("kind") || b.get("kind") == u.get("kind") => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}

fn apply_set(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("malformed key {path:?}")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*key)
            .ok_or_else(|| CliError::Config(format!("unknown config key {}", keys[..=i].join("."))))?;
    }
    Ok(())
}

pub fn resolve_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut value = serde_json::to_value(ExperimentConfig::default()).expect("defaults serialise");
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingFile(format!("config {}: {e}", path.display())),
            _ => CliError::Io(format!("config {}: {e}", path.display())),
        })?;
        let user: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        merge(&mut value, user);
    }
    for s in &common.set {
        apply_set(&mut value, s)?;
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    if let Some(seed) = common.seed {
        cfg.dataset.seed = seed;
        cfg.noise_seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    cfg.dataset.validate()?;
    cfg.noise.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.join("manifest.json").is_file() || path.join("checkpoint.json").is_file() {
        Ok(())
    } else {
        Err(CliError::MissingFile(format!("{what} not found at {}", path.display())))
    }
}

fn dataset_or_generate(cfg: &ExperimentConfig, data: Option<&Path>) -> CliResult<(ShapesConfig, Splits<f64>)> {
    match data {
        Some(dir) => {
            require_dir(dir, "dataset")?;
            Ok(load_dataset(dir)?)
        }
        None => Ok((cfg.dataset.clone(), gen_shapes(&cfg.dataset)?)),
    }
}

/// Per-image corruption with seeds derived from `noise_seed` and the index.
pub fn corrupt_labels(cfg: &ExperimentConfig, clean: &[LabelMap], classes: usize) -> CliResult<Vec<LabelMap>> {
    clean
        .iter()
        .enumerate()
        .map(|(i, l)| Ok(corrupt(l, classes, &cfg.noise, derive_seed(cfg.noise_seed, i as u64))?))
        .collect()
}

fn clean_train_labels(splits: &Splits<f64>) -> Vec<LabelMap> {
    splits.train.iter().map(|s| s.label.clone()).collect()
}

fn gen_data(cfg: &ExperimentConfig) -> CliResult<Value> {
    let out = cfg.out_dir()?;
    create_dir(out)?;
    let splits = gen_shapes::<f64>(&cfg.dataset)?;
    let manifest = save_dataset(out, &cfg.dataset, &splits)?;
    Ok(json!({"dir": out, "train": splits.train.len(), "test": splits.test.len(), "files": manifest.files.len()}))
}

fn corrupt_cmd(cfg: &ExperimentConfig, data: Option<&Path>) -> CliResult<Value> {
    let out = cfg.out_dir()?;
    let dir = data.unwrap_or(out);
    require_dir(dir, "dataset")?;
    let (ds, splits) = load_dataset::<f64>(dir)?;
    let clean = clean_train_labels(&splits);
    let noisy = corrupt_labels(cfg, &clean, ds.classes)?;
    create_dir(out)?;
    write_grid(out.join(NOISY_LABELS), &labels_grid(&noisy)?)?;
    let summary = summarize(&clean, &noisy, ds.classes)?;
    let report = json!({"noise": cfg.noise, "noise_seed": cfg.noise_seed, "summary": summary});
    write_json(&out.join("noise_report.json"), &report)?;
    Ok(json!({
        "noisy_labels": out.join(NOISY_LABELS),
        "mean_class_noise_rate": summary.mean_class_noise_rate,
        "mean_affinity_noise_rate": summary.mean_affinity_noise_rate,
    }))
}

fn noise_stats(cfg: &ExperimentConfig, data: Option<&Path>, noisy: Option<&Path>) -> CliResult<Value> {
    let out = cfg.out_dir()?;
    let dir = data.unwrap_or(out);
    require_dir(dir, "dataset")?;
    let (ds, splits) = load_dataset::<f64>(dir)?;
    let noisy_path = noisy.map(Path::to_path_buf).unwrap_or_else(|| dir.join(NOISY_LABELS));
    if !noisy_path.is_file() {
        return Err(CliError::MissingFile(format!("noisy labels not found at {}", noisy_path.display())));
    }
    let noisy = labels_from_grid(read_grid(&noisy_path)?)?;
    let clean = clean_train_labels(&splits);
    let summary = summarize(&clean, &noisy, ds.classes)?;
    create_dir(out)?;
    write_json(&out.join("noise_report.json"), &json!({ "summary": summary }))?;
    Ok(json!({
        "mean_class_noise_rate": summary.mean_class_noise_rate,
        "mean_affinity_noise_rate": summary.mean_affinity_noise_rate,
        "affinity_below_class": summary.affinity_below_class,
    }))
}

fn translate_ntm(cfg: &ExperimentConfig) -> CliResult<Value> {
    let out = cfg.out_dir()?;
    let t_c: ClassNtm<f64> = match &cfg.translate.ntm {
        Some(j) => ClassNtm::from_json(j)?,
        None => cfg.noise.class_ntm(cfg.dataset.classes)?,
    };
    let n = match &cfg.translate.distribution {
        Some(p) => ClassDistribution::new(p.clone())?,
        None => ClassDistribution::uniform(t_c.classes()),
    };
    let exact = translate_exact(&t_c, &n)?;
    let closed = translate_closed_form(&t_c, &n)?;
    let oracle = mc_translate_oracle(&t_c, &n, cfg.translate.samples, cfg.noise_seed)?;
    let report = json!({
        "class_ntm": t_c.to_json(),
        "distribution": n.proportions(),
        "exact": exact.to_json(),
        "closed_form": closed.to_json(),
        "closed_form_max_abs_diff": closed.max_abs_diff(&exact),
        "oracle": {
            "samples": cfg.translate.samples,
            "seed": cfg.noise_seed,
            "estimate": oracle.estimate,
            "std_err": oracle.std_err,
            "max_z_vs_exact": oracle.max_z(exact.data()),
        },
    });
    create_dir(out)?;
    write_json(&out.join("ntm_report.json"), &report)?;
    Ok(report)
}

fn grad_check(cfg: &ExperimentConfig) -> CliResult<Value> {
    let out = cfg.out_dir()?;
    let entries = jcas::checks::gradient_suite(cfg.train.seed)?;
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.name.as_str()).collect();
    let report = json!({"seed": cfg.train.seed, "all_passed": failed.is_empty(), "checks": entries});
    create_dir(out)?;
    write_json(&out.join("grad_check.json"), &report)?;
    if !failed.is_empty() {
        return Err(CliError::CheckFailed(format!("gradient checks failed: {}", failed.join(", "))));
    }
    Ok(json!({"all_passed": true, "checks": entries.len()}))
}

fn train_cmd(cfg: &ExperimentConfig, data: Option<&Path>) -> CliResult<Value> {
    let out = cfg.out_dir()?;
    let (ds, splits) = dataset_or_generate(cfg, data)?;
    let clean = clean_train_labels(&splits);
    let noisy = corrupt_labels(cfg, &clean, ds.classes)?;
    create_dir(out)?;
    let summary = summarize(&clean, &noisy, ds.classes)?;
    write_json(
        &out.join("noise_report.json"),
        &json!({"noise": cfg.noise, "noise_seed": cfg.noise_seed, "summary": summary}),
    )?;

    let train_data = TrainData::new(&splits, &noisy, ds.classes)?;
    let (params, history) = train(&train_data, &cfg.train)?;
    write_text(&out.join("metrics.csv"), &history.metrics_csv(ds.classes))?;
    write_text(&out.join("jac_curve.csv"), &history.jac_curve_csv())?;
    save_checkpoint(
        &out.join("checkpoint"),
        &params,
        &cfg.train,
        history.len(),
        history.class_distribution.clone(),
    )?;

    let t_c = params.class_ntm()?;
    let t_a = params.affinity_ntm()?;
    let translated = match &history.class_distribution {
        Some(p) => Some(translate_exact(&t_c, &ClassDistribution::new(p.clone())?)?.to_json()),
        None => None,
    };
    let true_ntm = cfg.noise.class_ntm(ds.classes).ok().map(|t| t.to_json());
    write_json(
        &out.join("ntm_report.json"),
        &json!({
            "mode": cfg.train.mode,
            "class_distribution": history.class_distribution,
            "learned_class_ntm": t_c.to_json(),
            "learned_affinity_ntm": t_a.to_json(),
            "translated_affinity_ntm": translated,
            "noise_class_ntm": true_ntm,
        }),
    )?;

    let final_metrics = history.epochs.last().map(|r| &r.test);
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    write_json(
        &out.join("manifest.json"),
        &json!({
            "tool": "jcas",
            "version": env!("CARGO_PKG_VERSION"),
            "created_unix": created,
            "config_hash": cfg.hash(),
            "train_config_hash": cfg.train.hash(),
            "config": cfg,
            "epochs_run": history.len(),
            "final_test": final_metrics,
        }),
    )?;
    Ok(json!({
        "mode": cfg.train.mode,
        "epochs": history.len(),
        "final_mean_jac": history.final_jac(),
        "final_mean_dice": final_metrics.map(|m| m.mean_dice),
    }))
}

fn eval_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>, data: Option<&Path>) -> CliResult<Value> {
    let out = cfg.out_dir()?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("checkpoint"));
    require_dir(&ckpt, "checkpoint")?;
    let (params, manifest) = load_checkpoint::<f64>(&ckpt)?;
    let (ds, splits) = dataset_or_generate(cfg, data)?;
    if ds.classes != params.classes {
        return Err(CliError::Data(format!(
            "checkpoint has {} classes, dataset has {}",
            params.classes, ds.classes
        )));
    }
    let counts = evaluate_counts(&params, &splits.test, manifest.mode)?;
    let report = json!({
        "mode": manifest.mode,
        "epoch": manifest.epoch,
        "config_hash": manifest.config_hash,
        "test_images": splits.test.len(),
        "foreground": counts.metrics_over(1..params.classes),
        "all_classes": counts.metrics(),
    });
    create_dir(out)?;
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

pub fn execute(cli: &Cli) -> CliResult<Value> {
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Corrupt { data } => corrupt_cmd(&cfg, data.as_deref()),
        Command::NoiseStats { data, noisy } => noise_stats(&cfg, data.as_deref(), noisy.as_deref()),
        Command::TranslateNtm => translate_ntm(&cfg),
        Command::GradCheck => grad_check(&cfg),
        Command::Train { data } => train_cmd(&cfg, data.as_deref()),
        Command::Eval { checkpoint, data } => eval_cmd(&cfg, checkpoint.as_deref(), data.as_deref()),
    }
}

/// Parses `argv` (including the program name), runs the subcommand, prints
/// a JSON result on stdout or a JSON error on stderr, and returns the exit
/// status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(v) => {
            // A closed stdout (e.g. piped into `head`) is not a failure.
            let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            0
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "code": e.exit_code(), "message": e.to_string()}));
            e.exit_code()
        }
    }
}
