//! Semi-supervised optimization: each step runs the labeled and unlabeled
//! parts of a batch through the network together, combines the supervised
//! and consistency losses, backpropagates and applies one Adam update.

mod adam;
mod checkpoint;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, TensorEntry, TensorRole, MANIFEST,
};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batches, Batch, BatchTensors, DatasetSplit, PipelineError};
use crate::evaluation::{evaluate, EvalError, MetricReport};
use crate::network::{DualBranchNet, NetworkConfig, NetworkError};
use crate::nn::{Mode, Parameterized, Slot};
use crate::objectives::{objective_with_grad, LossError, LossReport, LossWeights};
use crate::scalar::Scalar;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("parameter {0} became non-finite")]
    NonFiniteParameter(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    /// True for numerical failures (non-finite losses or parameters).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TrainError::Loss(LossError::NonFiniteLoss { .. }) | TrainError::NonFiniteParameter(_)
        )
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_steps: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,
    /// Evaluate on the test split every this many steps; 0 disables.
    pub eval_every: u64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 6e-3,
            weight_decay: 4e-4,
            max_steps: 1000,
            batch_labeled: 4,
            batch_unlabeled: 4,
            seed: 2024,
            eval_every: 100,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be at least 1");
        }
        let w = &self.weights;
        if [w.beta, w.gamma_dice, w.lambda_cons].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("loss weights must be finite and non-negative");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.weight_decay)
    }
}

/// Position in the deterministic batch stream: batch `cursor` of the
/// schedule produced for `epoch`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub epoch: u64,
    pub cursor: usize,
}

pub struct TrainState<T> {
    pub step: u64,
    pub model: DualBranchNet<T>,
    pub optimizer: Adam<T>,
    pub schedule: Schedule,
    pub best_val_dice: Option<f64>,
    epoch_batches: Option<(u64, Vec<Batch>)>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(net: NetworkConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let model = DualBranchNet::new(net, train.seed)?;
        Ok(Self::from_parts(model, Adam::new(train.adam()), 0, Schedule::default(), None))
    }

    pub fn from_parts(
        model: DualBranchNet<T>,
        optimizer: Adam<T>,
        step: u64,
        schedule: Schedule,
        best_val_dice: Option<f64>,
    ) -> Self {
        Self {
            step,
            model,
            optimizer,
            schedule,
            best_val_dice,
            epoch_batches: None,
        }
    }

    /// Next batch of the stream; advances the schedule.
    pub fn next_batch(&mut self, split: &DatasetSplit, config: &TrainConfig) -> Result<Batch> {
        loop {
            let epoch = self.schedule.epoch;
            if self.epoch_batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let batches = make_batches(split, config.batch_labeled, config.batch_unlabeled, config.seed, epoch)?;
                self.epoch_batches = Some((epoch, batches));
            }
            let (_, batches) = self.epoch_batches.as_ref().expect("filled above");
            if let Some(b) = batches.get(self.schedule.cursor) {
                self.schedule.cursor += 1;
                return Ok(b.clone());
            }
            self.schedule = Schedule {
                epoch: epoch + 1,
                cursor: 0,
            };
        }
    }

    fn check_finite(&mut self) -> Result<()> {
        let mut bad = None;
        self.model.visit("", &mut |name, slot| {
            let finite = match slot {
                Slot::Param(p) => p.value.iter().all(|v| v.is_finite()),
                Slot::Buffer(b) => b.iter().all(|v| v.is_finite()),
            };
            if !finite && bad.is_none() {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(TrainError::NonFiniteParameter(name)),
            None => Ok(()),
        }
    }
}

/// One optimization step on a prepared batch (labeled rows first).
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &BatchTensors<T>,
    config: &TrainConfig,
) -> Result<LossReport> {
    let pred = state
        .model
        .forward(batch.image_a.view(), batch.image_b.view(), Mode::Train)?;
    let (report, grad_a, grad_b) = objective_with_grad(&pred, batch.mask.view(), batch.n_labeled, &config.weights)?;
    state.model.zero_grad();
    state.model.backward(grad_a.view(), grad_b.view());
    state.optimizer.step(&mut state.model);
    state.step += 1;
    state.check_finite()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub losses: Vec<LossReport>,
    pub evals: Vec<EvalRecord>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Step {
        step: u64,
        #[serde(flatten)]
        loss: &'a LossReport,
    },
    Eval {
        step: u64,
        dice: f64,
        sens: f64,
    },
}

struct Log(Option<(PathBuf, BufWriter<File>)>);

impl Log {
    fn write(&mut self, line: &LogLine<'_>) -> Result<()> {
        if let Some((path, w)) = &mut self.0 {
            let text = serde_json::to_string(line).expect("log line serializes");
            writeln!(w, "{text}").map_err(|e| io_err(path, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.0 {
            w.flush().map_err(|e| io_err(path, e))?;
        }
        Ok(())
    }
}

/// Trains for `config.max_steps` steps from a fresh initialization.
///
/// With a `work_dir`, writes the JSON-lines log and the `best.ckpt` /
/// `last.ckpt` checkpoints. Evaluation runs on `split.test` every
/// `eval_every` steps and after the final step; it is skipped when the
/// test split is empty, in which case `best.ckpt` holds the final state.
pub fn fit<T: Scalar>(
    split: &DatasetSplit,
    net: &NetworkConfig,
    config: &TrainConfig,
    work_dir: Option<&Path>,
) -> Result<(TrainState<T>, History)> {
    let mut state = TrainState::<T>::new(net.clone(), config)?;
    let history = resume(&mut state, split, config, work_dir)?;
    Ok((state, history))
}

/// Continues training `state` up to `config.max_steps` total steps.
pub fn resume<T: Scalar>(
    state: &mut TrainState<T>,
    split: &DatasetSplit,
    config: &TrainConfig,
    work_dir: Option<&Path>,
) -> Result<History> {
    config.validate()?;
    if split.labeled.is_empty() {
        return Err(PipelineError::EmptyLabeledSet.into());
    }
    let mut log = Log(None);
    if let Some(dir) = work_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join(LOG_FILE);
        let file = File::options()
            .create(true)
            .append(state.step > 0)
            .write(true)
            .truncate(state.step == 0)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        log = Log(Some((path, BufWriter::new(file))));
    }
    let mut history = History::default();
    let mut saved_best = false;
    while state.step < config.max_steps {
        let batch = state.next_batch(split, config)?;
        let tensors = batch.tensors::<T>(split);
        let loss = match train_step(state, &tensors, config) {
            Ok(loss) => loss,
            Err(e) => {
                log.flush()?;
                return Err(e);
            }
        };
        log.write(&LogLine::Step { step: state.step, loss: &loss })?;
        history.losses.push(loss);

        let due = config.eval_every > 0 && state.step.is_multiple_of(config.eval_every);
        if !split.test.is_empty() && (due || state.step == config.max_steps) {
            let report = evaluate(&mut state.model, &split.test)?;
            log.write(&LogLine::Eval {
                step: state.step,
                dice: report.mean_dice,
                sens: report.mean_sens,
            })?;
            let improved = state.best_val_dice.is_none_or(|b| report.mean_dice > b);
            history.evals.push(EvalRecord { step: state.step, report: report.clone() });
            if improved {
                state.best_val_dice = Some(report.mean_dice);
                if let Some(dir) = work_dir {
                    save_checkpoint(state, dir.join(BEST_CHECKPOINT))?;
                    saved_best = true;
                }
            }
        }
    }
    log.flush()?;
    if let Some(dir) = work_dir {
        save_checkpoint(state, dir.join(LAST_CHECKPOINT))?;
        if !saved_best && !dir.join(BEST_CHECKPOINT).join(MANIFEST).exists() {
            save_checkpoint(state, dir.join(BEST_CHECKPOINT))?;
        }
    }
    Ok(history)
}
