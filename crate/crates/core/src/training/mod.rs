//! RMSprop training from scratch and head-only fine-tuning.

mod gradcheck;
mod optim;
mod sampling;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{check_against, grad_check, GradCheckOptions, GradCheckReport};
pub use optim::{rmsprop_update, RmsProp};
pub use sampling::{shuffled_epoch, undersample_epoch};

use crate::dataset::{Manifest, SplitAssignment};
use crate::image::ImageError;
use crate::loader::{DatasetFilter, ImageSet};
use crate::nn::{BnMode, Model, NetworkError, Scalar, Tensor};
use crate::seed;
use crate::task::Task;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("class {0} has no samples")]
    DegenerateClass(usize),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(String),
    #[error("loss diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Balance {
    #[default]
    None,
    Undersample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    FromScratch,
    FinetuneHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub balance: Balance,
    pub mode: TrainMode,
    pub filter: DatasetFilter,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs: 25,
            steps_per_epoch: 1000,
            batch_size: 32,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-7,
            balance: Balance::None,
            mode: TrainMode::FromScratch,
            filter: DatasetFilter::All,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("epochs and steps_per_epoch must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.balance == Balance::Undersample && (self.batch_size < 2 || !self.batch_size.is_multiple_of(2)) {
            return bad("undersampling needs an even batch_size of at least 2");
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) || self.rmsprop_epsilon < 0.0 {
            return bad("rmsprop_decay must lie in [0, 1) and rmsprop_epsilon be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: Task,
    pub config: TrainConfig,
    pub precision: String,
    pub train_size: usize,
    pub val_size: usize,
    /// Batches available per epoch before capping at `steps_per_epoch`.
    pub available_batches: usize,
    pub steps_capped: bool,
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub wall_clock_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Trained model, the best-validation snapshot and the run record.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub best: Model<T>,
    pub report: TrainReport,
}

/// Training inputs resolved against the manifest.
struct Data {
    train: ImageSet,
    val: ImageSet,
}

fn load_data(manifest: &Manifest, split: &SplitAssignment, filter: DatasetFilter) -> Result<Data, TrainError> {
    let pick = |idx: &[usize]| -> Vec<usize> {
        idx.iter().copied().filter(|&i| filter.keep(&manifest.entries[i].label)).collect()
    };
    let (train, val) = (pick(&split.train), pick(&split.validation));
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    Ok(Data { train: ImageSet::load(manifest, &train)?, val: ImageSet::load(manifest, &val)? })
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax class per row of (B, K) logits.
pub fn predictions<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.data().chunks(k).map(argmax).collect()
}

const EVAL_BATCH: usize = 64;

/// Embeddings of every image in inference mode, in order.
fn embed_all<T: Scalar>(model: &Model<T>, set: &ImageSet) -> Result<Tensor<T>, TrainError> {
    let target = model.config().input_size;
    let e = model.config().embedding_dim;
    let mut data = Vec::with_capacity(set.len() * e);
    let positions: Vec<usize> = (0..set.len()).collect();
    for chunk in positions.chunks(EVAL_BATCH) {
        data.extend_from_slice(model.embed(&set.batch(chunk, target), BnMode::Running)?.data());
    }
    Ok(Tensor::from_vec(&[set.len(), e], data))
}

fn rows<T: Scalar>(t: &Tensor<T>, positions: &[usize]) -> Tensor<T> {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(positions.len() * w);
    for &p in positions {
        data.extend_from_slice(&t.data()[p * w..(p + 1) * w]);
    }
    Tensor::from_vec(&[positions.len(), w], data)
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Trains `model` on `task`. FromScratch updates every parameter;
/// FinetuneHead freezes the backbone, attaches the task head when missing and
/// updates only that head. Progress is reported once per epoch.
pub fn train<T: Scalar>(
    model: Model<T>,
    manifest: &Manifest,
    split: &SplitAssignment,
    task: Task,
    cfg: &TrainConfig,
    progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>, TrainError> {
    train_observed(model, manifest, split, task, cfg, progress, |_, _| {})
}

/// [`train`] that also reports every batch as (epoch, manifest indices)
/// before its optimizer step.
pub fn train_observed<T: Scalar>(
    mut model: Model<T>,
    manifest: &Manifest,
    split: &SplitAssignment,
    task: Task,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
    mut on_batch: impl FnMut(usize, &[usize]),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let data = load_data(manifest, split, cfg.filter)?;
    let train_y = data.train.classes(task);
    let val_y = data.val.classes(task);

    let frozen = cfg.mode == TrainMode::FinetuneHead;
    model.frozen_backbone = frozen;
    if !model.has_head(task) {
        model.attach_head(task, seed::derive(cfg.seed, &[seed::name_hash(task.name())]));
    }
    // a frozen backbone maps each image to a fixed embedding, so compute them once
    let cached = if frozen { Some((embed_all(&model, &data.train)?, embed_all(&model, &data.val)?)) } else { None };

    let target = model.config().input_size;
    let mut opt = RmsProp::<T>::new(cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_epsilon);
    let mut report = TrainReport {
        task,
        config: cfg.clone(),
        precision: T::NAME.to_string(),
        train_size: data.train.len(),
        val_size: data.val.len(),
        available_batches: 0,
        steps_capped: false,
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        best_val_accuracy: -1.0,
        wall_clock_seconds: 0.0,
        checkpoint: None,
    };
    let mut best = model.clone();

    for epoch in 1..=cfg.epochs {
        let epoch_seed = seed::derive(cfg.seed, &[0x5eed, epoch as u64]);
        let batches = match cfg.balance {
            Balance::None => shuffled_epoch(train_y.len(), cfg.batch_size, epoch_seed),
            Balance::Undersample => undersample_epoch(&train_y, task.n_classes(), cfg.batch_size, epoch_seed)?,
        };
        if batches.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        report.available_batches = batches.len();
        report.steps_capped |= batches.len() > cfg.steps_per_epoch;
        let steps = batches.len().min(cfg.steps_per_epoch);

        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (step, batch) in batches.iter().take(steps).enumerate() {
            on_batch(epoch, &batch.iter().map(|&i| data.train.indices[i]).collect::<Vec<_>>());
            let labels: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let lg = match &cached {
                Some((emb, _)) => model.head_loss_and_grads(&rows(emb, batch), &labels, task)?,
                None => model.loss_and_grads(&data.train.batch(batch, target), &labels, task)?,
            };
            let loss = lg.loss.to_f64().unwrap();
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            opt.step(&mut model, &lg.grads)?;
            model.apply_bn_stats_with(&lg.bn_stats, bn_momentum(model.config().bn_momentum, report.step_losses.len()));
            report.step_losses.push(loss);
            loss_sum += loss;
            correct += predictions(&lg.logits).iter().zip(&labels).filter(|(p, t)| p == t).count();
            seen += labels.len();
        }

        let val_pred = match &cached {
            Some((_, emb)) => predictions(&model.head_logits(emb, task)?),
            None => predictions(&model.head_logits(&embed_all(&model, &data.val)?, task)?),
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / steps as f64,
            train_accuracy: correct as f64 / seen as f64,
            val_accuracy: accuracy(&val_pred, &val_y),
            steps,
        };
        progress(&record);
        if record.val_accuracy > report.best_val_accuracy {
            report.best_val_accuracy = record.val_accuracy;
            report.best_epoch = epoch;
            best = model.clone();
        }
        report.epochs.push(record);
    }
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { model, best, report })
}

/// Loads the checkpoint a fine-tune starts from.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>, TrainError> {
    if !path.is_file() {
        return Err(TrainError::MissingCheckpoint(path.display().to_string()));
    }
    Ok(crate::nn::load_model(path)?)
}

/// Running-statistics momentum for the `step`-th update (0-based): the
/// configured value, lowered early on as `(1 + step) / (10 + step)`.
pub fn bn_momentum(configured: f64, step: usize) -> f64 {
    configured.min((1.0 + step as f64) / (10.0 + step as f64))
}

/// The progress line written to standard error after each epoch.
pub fn progress_line(r: &EpochRecord) -> String {
    format!("epoch={} loss={:.6} train_acc={:.4} val_acc={:.4}", r.epoch, r.loss, r.train_accuracy, r.val_accuracy)
}
