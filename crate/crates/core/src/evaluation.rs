//! Confusion matrices, accuracy / precision / recall and markdown reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Manifest, SplitAssignment, SplitPart};
use crate::image::ImageError;
use crate::loader::{DatasetFilter, ImageSet};
use crate::nn::{Model, NetworkError, Scalar};
use crate::task::Task;
use crate::training::predictions;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{actual} actual labels but {predicted} predictions")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("label {label} outside the {n_classes} classes")]
    UnknownLabel { label: usize, n_classes: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("confusion matrix must be square with one row per class: {0}")]
    NotSquare(String),
    #[error("empty {0} split")]
    EmptySplit(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self, EvalError> {
        let n = classes.len();
        if n == 0 || counts.len() != n || counts.iter().any(|r| r.len() != n) {
            return Err(EvalError::NotSquare(format!("{n} classes, rows {:?}", counts.iter().map(Vec::len).collect::<Vec<_>>())));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// The same matrix with classes reordered: new class `i` is old `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            classes: order.iter().map(|&i| self.classes[i].clone()).collect(),
            counts: order.iter().map(|&i| order.iter().map(|&j| self.counts[i][j]).collect()).collect(),
        }
    }
}

pub fn confusion(actual: &[usize], predicted: &[usize], classes: &[&str]) -> Result<ConfusionMatrix, EvalError> {
    if actual.len() != predicted.len() {
        return Err(EvalError::LengthMismatch { actual: actual.len(), predicted: predicted.len() });
    }
    let n = classes.len();
    let mut counts = vec![vec![0u64; n]; n];
    for (&a, &p) in actual.iter().zip(predicted) {
        for label in [a, p] {
            if label >= n {
                return Err(EvalError::UnknownLabel { label, n_classes: n });
            }
        }
        counts[a][p] += 1;
    }
    ConfusionMatrix::new(classes.iter().map(|s| s.to_string()).collect(), counts)
}

pub fn accuracy(m: &ConfusionMatrix) -> Result<f64, EvalError> {
    match m.total() {
        0 => Err(EvalError::EmptyMatrix),
        total => Ok(m.trace() as f64 / total as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub precision: f64,
    pub recall: f64,
}

/// One-vs-rest rates of a class. An undefined rate (no predicted or no actual
/// members) is reported as 0 and flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRates {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub precision_undefined: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub recall_undefined: bool,
}

pub fn class_rates(m: &ConfusionMatrix, class: usize) -> ClassRates {
    let tp = m.counts[class][class] as f64;
    let (predicted, actual) = (m.col_sum(class), m.row_sum(class));
    ClassRates {
        class: m.classes[class].clone(),
        precision: if predicted == 0 { 0.0 } else { tp / predicted as f64 },
        recall: if actual == 0 { 0.0 } else { tp / actual as f64 },
        precision_undefined: predicted == 0,
        recall_undefined: actual == 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    /// Rates of one designated positive class.
    Positive(usize),
    /// Unweighted mean of the one-vs-rest rates over all classes.
    Macro,
}

pub fn precision_recall(m: &ConfusionMatrix, averaging: Averaging) -> Result<Rates, EvalError> {
    if m.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    Ok(match averaging {
        Averaging::Positive(c) => {
            if c >= m.n_classes() {
                return Err(EvalError::UnknownLabel { label: c, n_classes: m.n_classes() });
            }
            let r = class_rates(m, c);
            Rates { precision: r.precision, recall: r.recall }
        }
        Averaging::Macro => {
            let all: Vec<ClassRates> = (0..m.n_classes()).map(|c| class_rates(m, c)).collect();
            let n = all.len() as f64;
            Rates {
                precision: all.iter().map(|r| r.precision).sum::<f64>() / n,
                recall: all.iter().map(|r| r.recall).sum::<f64>() / n,
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub classes: Vec<String>,
    /// Rows actual, columns predicted.
    pub matrix: Vec<Vec<u64>>,
    pub samples: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassRates>,
    #[serde(rename = "macro")]
    pub macro_avg: Rates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<Rates>,
    pub split: String,
    pub checkpoint: String,
}

impl EvalReport {
    pub fn from_matrix(task: Task, m: &ConfusionMatrix, split: &str, checkpoint: &str) -> Result<Self, EvalError> {
        let positive_class = task.positive_class().filter(|&c| c < m.n_classes());
        Ok(Self {
            task,
            classes: m.classes.clone(),
            matrix: m.counts.clone(),
            samples: m.total(),
            accuracy: accuracy(m)?,
            per_class: (0..m.n_classes()).map(|c| class_rates(m, c)).collect(),
            macro_avg: precision_recall(m, Averaging::Macro)?,
            positive_class: positive_class.map(|c| m.classes[c].clone()),
            positive: positive_class.map(|c| precision_recall(m, Averaging::Positive(c))).transpose()?,
            split: split.to_string(),
            checkpoint: checkpoint.to_string(),
        })
    }

    pub fn matrix(&self) -> Result<ConfusionMatrix, EvalError> {
        ConfusionMatrix::new(self.classes.clone(), self.matrix.clone())
    }

    /// The caption rates: positive class when there is one, macro otherwise.
    pub fn headline(&self) -> (Rates, &'static str) {
        match self.positive {
            Some(r) => (r, "positive class"),
            None => (self.macro_avg, "macro"),
        }
    }
}

/// Which head scores `task`. Fakeness falls back to the alteration head with
/// the three altered classes merged when no fakeness head exists.
fn scoring_head<T: Scalar>(model: &Model<T>, task: Task) -> Result<(Task, fn(usize) -> usize), EvalError> {
    if model.has_head(task) {
        return Ok((task, |c| c));
    }
    if task == Task::Fakeness && model.has_head(Task::Alteration) {
        // alteration class 3 is Real, fakeness class 1 is Real
        return Ok((Task::Alteration, |c| usize::from(c == 3)));
    }
    Err(NetworkError::MissingHead(task).into())
}

const EVAL_BATCH: usize = 64;

/// Predicts every selected entry of `part` in manifest order and builds the
/// report.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    manifest: &Manifest,
    split: &SplitAssignment,
    part: SplitPart,
    task: Task,
    filter: DatasetFilter,
    checkpoint: &str,
) -> Result<EvalReport, EvalError> {
    let (head, map) = scoring_head(model, task)?;
    let indices: Vec<usize> =
        split.part(part).iter().copied().filter(|&i| filter.keep(&manifest.entries[i].label)).collect();
    if indices.is_empty() {
        return Err(EvalError::EmptySplit(part.to_string()));
    }
    let set = ImageSet::load(manifest, &indices)?;
    let target = model.config().input_size;
    let positions: Vec<usize> = (0..set.len()).collect();
    let mut predicted = Vec::with_capacity(set.len());
    for chunk in positions.chunks(EVAL_BATCH) {
        let logits = model.forward(&set.batch::<T>(chunk, target), head)?;
        predicted.extend(predictions(&logits).into_iter().map(map));
    }
    let m = confusion(&set.classes(task), &predicted, task.class_names())?;
    EvalReport::from_matrix(task, &m, &part.to_string(), checkpoint)
}

/// Full-dataset accuracies of the reference system, per task.
pub const REFERENCE_ACCURACY: [(Task, f64); 5] = [
    (Task::Fakeness, 98.21),
    (Task::Alteration, 98.46),
    (Task::Gender, 92.52),
    (Task::Hand, 97.53),
    (Task::Finger, 92.18),
];

pub const REFERENCE_LABEL: &str = "reference, full dataset — not expected at desk scale";

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn matrix_table(out: &mut String, r: &EvalReport) {
    let _ = writeln!(out, "| actual \\ predicted | {} |", r.classes.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(r.classes.len()));
    for (name, row) in r.classes.iter().zip(&r.matrix) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "| **{name}** | {} |", cells.join(" | "));
    }
}

/// Markdown rendering: one confusion table per report in fixed task order,
/// an accuracy summary and the reference comparison row.
pub fn render_report(reports: &[EvalReport]) -> String {
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.task);
    let mut out = String::from("# Evaluation\n");
    for r in &sorted {
        let (rates, kind) = r.headline();
        let _ = writeln!(out, "\n## {} ({} split, {} samples)\n", r.task, r.split, r.samples);
        let _ = writeln!(
            out,
            "**Accuracy**: {}, **Precision**: {}, **Recall**: {} ({kind}{})\n",
            pct(r.accuracy),
            pct(rates.precision),
            pct(rates.recall),
            r.positive_class.as_ref().map(|c| format!(": {c}")).unwrap_or_default(),
        );
        matrix_table(&mut out, r);
        let flagged: Vec<&str> = r
            .per_class
            .iter()
            .filter(|c| c.precision_undefined || c.recall_undefined)
            .map(|c| c.class.as_str())
            .collect();
        if !flagged.is_empty() {
            let _ = writeln!(out, "\nUndefined rates counted as 0 for: {}", flagged.join(", "));
        }
    }

    let _ = writeln!(out, "\n## Accuracy summary\n");
    let names: Vec<String> = REFERENCE_ACCURACY.iter().map(|(t, _)| t.to_string()).collect();
    let _ = writeln!(out, "| | {} |", names.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(names.len()));
    let ours: Vec<String> = REFERENCE_ACCURACY
        .iter()
        .map(|(t, _)| sorted.iter().find(|r| r.task == *t).map_or("n/a".to_string(), |r| pct(r.accuracy)))
        .collect();
    let _ = writeln!(out, "| this run | {} |", ours.join(" | "));
    let refs: Vec<String> = REFERENCE_ACCURACY.iter().map(|(_, a)| format!("{a:.2}%")).collect();
    let _ = writeln!(out, "| {REFERENCE_LABEL} | {} |", refs.join(" | "));
    let _ = writeln!(
        out,
        "\nPrecision and recall of multiclass tasks are unweighted macro averages. \
         Reference fakeness precision is quoted inconsistently (99.27% and 99.97%); \
         its confusion matrix gives 99.98%."
    );
    out
}
