//! Command-line front end: `phantom`, `train`, `eval` and `ablate`, each
//! driven by one JSON run config plus dotted-path `--set` overrides.
//!
//! Exit codes: 0 success, 2 usage or configuration error (including corrupt
//! or mismatched checkpoints), 3 numerical failure, 1 other runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::data::{
    generate_phantom, load_volume_dir, make_split, write_volume_dir, DatasetSplit, PhantomSpec, PipelineError,
};
use crate::evaluation::{evaluate, group_by_patient, predict_patient, run_ablation_with, EvalError};
use crate::network::NetworkConfig;
use crate::trainer::{fit, load_checkpoint, read_manifest, TrainConfig, TrainError, BEST_CHECKPOINT};

pub const SPLIT_FILE: &str = "split.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TXT: &str = "metrics.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TXT: &str = "ablation.txt";
pub const PHANTOM_MANIFEST: &str = "phantom_manifest.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            return CliError::Numerical(e.to_string());
        }
        match e {
            TrainError::Pipeline(p) => CliError::from(p),
            TrainError::InvalidConfig(_) | TrainError::CorruptCheckpoint(_) | TrainError::Network(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Volume(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Training(t) => CliError::from(*t),
            EvalError::Network(_) | EvalError::EmptyTestSet | EvalError::MissingMask(..) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))
}

fn to_json<S: Serialize>(value: &S) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Everything one experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub work_dir: PathBuf,
    pub label_fraction: f64,
    pub net: NetworkConfig,
    pub train: TrainConfig,
    pub phantom: Option<PhantomSpec>,
}

impl Default for RunConfig {
    /// The desk-scale phantom benchmark.
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            work_dir: PathBuf::from("runs"),
            label_fraction: 0.1,
            net: NetworkConfig::reduced((48, 48)),
            train: TrainConfig {
                max_steps: 2000,
                eval_every: 200,
                ..TrainConfig::default()
            },
            phantom: Some(PhantomSpec::default()),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(CliError::Config(format!(
                "label_fraction {} must lie in (0, 1]",
                self.label_fraction
            )));
        }
        self.net.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// Default config, overlaid with `file` (if any), then with each
    /// `key=value` override. Values parse as JSON, falling back to a plain
    /// string.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("serializable");
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let overlay: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
            merge(&mut value, overlay);
        }
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Sets the dotted path `key` in `value`, creating objects on the way.
pub fn apply_override(value: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {item:?} is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cursor = value;
    for part in key.split('.') {
        if cursor.is_null() {
            *cursor = Value::Object(Default::default());
        }
        let Value::Object(map) = cursor else {
            return Err(CliError::Config(format!("override {key:?}: {part:?} is not inside an object")));
        };
        cursor = map.entry(part.to_string()).or_insert(Value::Null);
    }
    *cursor = parsed;
    Ok(())
}

/// Writes the configured phantom volumes and a manifest into `data_dir`.
pub fn cmd_phantom(config: &RunConfig) -> Result<()> {
    let spec = config
        .phantom
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no phantom section".into()))?;
    let volumes = generate_phantom(spec)?;
    create_dir(&config.data_dir)?;
    for v in &volumes {
        write_volume_dir(v, &config.data_dir)?;
    }
    #[derive(Serialize)]
    struct Manifest<'a> {
        spec: &'a PhantomSpec,
        patients: Vec<&'a str>,
    }
    let manifest = Manifest {
        spec,
        patients: volumes.iter().map(|v| v.patient_id.as_str()).collect(),
    };
    write_file(&config.data_dir.join(PHANTOM_MANIFEST), to_json(&manifest))?;
    println!("wrote {} phantom patients to {}", volumes.len(), config.data_dir.display());
    Ok(())
}

/// Loads `data_dir` and builds the seeded split for this config.
pub fn load_split(config: &RunConfig) -> Result<DatasetSplit> {
    if !config.data_dir.is_dir() {
        return Err(CliError::Config(format!(
            "data_dir {} does not exist",
            config.data_dir.display()
        )));
    }
    let volumes = load_volume_dir(&config.data_dir)?;
    if volumes.is_empty() {
        return Err(CliError::Config(format!(
            "data_dir {} holds no volumes",
            config.data_dir.display()
        )));
    }
    Ok(make_split(&volumes, config.label_fraction, config.train.seed, config.net.crop)?)
}

/// Splits, trains and reports the final test metrics.
pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let split = load_split(config)?;
    create_dir(&config.work_dir)?;
    write_file(&config.work_dir.join(SPLIT_FILE), to_json(&split.manifest()))?;
    println!(
        "split: {} labeled, {} unlabeled, {} test slices",
        split.labeled.len(),
        split.unlabeled.len(),
        split.test.len()
    );
    let (mut state, history) = fit::<f32>(&split, &config.net, &config.train, Some(&config.work_dir))?;
    let report = match history.evals.last() {
        Some(e) if e.step == state.step => e.report.clone(),
        _ => evaluate(&mut state.model, &split.test)?,
    };
    println!(
        "step {}: test DSC {:.4} Sens {:.4}",
        state.step, report.mean_dice, report.mean_sens
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSet {
    Test,
    Labeled,
}

/// Evaluates a checkpoint on a part of the split; writes metrics files
/// into `work_dir` and optional PGM masks into `pgm_dir`.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path, on: EvalSet, pgm_dir: Option<&Path>) -> Result<()> {
    let manifest = read_manifest(checkpoint)?;
    if manifest.net != config.net {
        return Err(CliError::Config(format!(
            "checkpoint {} was trained with network {:?}, config has {:?}",
            checkpoint.display(),
            manifest.net,
            config.net
        )));
    }
    let mut state = load_checkpoint::<f32>(checkpoint)?;
    let split = load_split(config)?;
    let records = match on {
        EvalSet::Test => &split.test,
        EvalSet::Labeled => &split.labeled,
    };
    let report = evaluate(&mut state.model, records)?;
    create_dir(&config.work_dir)?;
    write_file(&config.work_dir.join(METRICS_JSON), to_json(&report))?;
    let table = report.to_table();
    write_file(&config.work_dir.join(METRICS_TXT), &table)?;
    print!("{table}");
    if let Some(dir) = pgm_dir {
        for (_, group) in group_by_patient(records) {
            predict_patient(&mut state.model, &group, dir)?;
        }
    }
    Ok(())
}

/// Runs the four-configuration component ablation.
pub fn cmd_ablate(config: &RunConfig) -> Result<()> {
    let split = load_split(config)?;
    create_dir(&config.work_dir)?;
    let result = run_ablation_with(&split, &config.net, &config.train, |i, row| {
        println!(
            "[{}/4] mem={} cif={} DSC {:.4} Sens {:.4}",
            i + 1,
            row.enable_mem,
            row.enable_cif,
            row.dice,
            row.sens
        );
    })?;
    write_file(&config.work_dir.join(ABLATION_JSON), to_json(&result))?;
    let table = result.to_table();
    write_file(&config.work_dir.join(ABLATION_TXT), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON run config; missing fields take defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.max_steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Fraction of train patients whose masks are used.
    #[arg(long, value_name = "F")]
    pub label_fraction: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic phantom volumes into data_dir.
    Phantom {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train on data_dir; logs and checkpoints go to work_dir.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Evaluate a checkpoint and write metrics.json / metrics.txt.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        split: SplitArgs,
        /// Checkpoint directory; defaults to `<work_dir>/best.ckpt`.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Records to evaluate.
        #[arg(long, value_enum, default_value = "test")]
        on: EvalSet,
        /// Also write `<pid>_<idx>_{pred,gt}.pgm` masks here.
        #[arg(long, value_name = "DIR")]
        pgm_dir: Option<PathBuf>,
    },
    /// Train and test the four MEM/CIF configurations.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        split: SplitArgs,
    },
}

#[derive(Debug, Parser)]
#[command(name = "fusionseg", version, about = "Semi-supervised dual-modality segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn resolve(common: &CommonArgs, split: Option<&SplitArgs>) -> Result<RunConfig> {
    let mut overrides = common.set.clone();
    if let Some(f) = split.and_then(|s| s.label_fraction) {
        overrides.push(format!("label_fraction={f}"));
    }
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Phantom { common } => cmd_phantom(&resolve(&common, None)?),
        Command::Train { common, split } => cmd_train(&resolve(&common, Some(&split))?),
        Command::Eval {
            common,
            split,
            checkpoint,
            on,
            pgm_dir,
        } => {
            let config = resolve(&common, Some(&split))?;
            let checkpoint = checkpoint.unwrap_or_else(|| config.work_dir.join(BEST_CHECKPOINT));
            cmd_eval(&config, &checkpoint, on, pgm_dir.as_deref())
        }
        Command::Ablate { common, split } => cmd_ablate(&resolve(&common, Some(&split))?),
    }
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let c = RunConfig::load(
            None,
            &[
                "train.weights.lambda_cons=0".into(),
                "net.crop=[64,64]".into(),
                "work_dir=out/run1".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.weights.lambda_cons, 0.0);
        assert_eq!(c.net.crop, (64, 64));
        assert_eq!(c.work_dir, PathBuf::from("out/run1"));
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        for bad in ["train.max_steps", "=3", "train..seed=1", "label_fraction=0", "bogus=1", "train.max_steps=0"] {
            let err = RunConfig::load(None, &[bad.into()]).unwrap_err();
            assert_eq!(err.exit_code(), EXIT_CONFIG, "{bad}");
        }
    }

    #[test]
    fn default_config_round_trips() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        c.validate().unwrap();
    }
}
