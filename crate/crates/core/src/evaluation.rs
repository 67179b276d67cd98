//! Confusion matrices, per-class and aggregate metrics, the text
//! classification report, and the single-modality ablation.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{GestureSample, LabelTable, SplitIndices, SplitSpec};
use crate::error::{Error, Result};
use crate::network::{Architecture, FusionModel, Modality, TrainConfig, TrainHistory};
use crate::pipeline::{train_and_evaluate, PreparedSplit};
use crate::preprocess::MinMaxScaler;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> usize {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> usize {
        self.counts.iter().map(|row| row[c]).sum()
    }

    /// CSV with a label header row and a label column.
    pub fn write_csv<W: Write>(&self, mut w: W, labels: &LabelTable) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(&mut w);
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(labels.names().iter().cloned());
        out.write_record(&header)?;
        for (i, row) in self.counts.iter().enumerate() {
            let mut record = vec![labels.name(i).unwrap_or_default().to_string()];
            record.extend(row.iter().map(|c| c.to_string()));
            out.write_record(&record)?;
        }
        out.flush()
    }
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    let mut counts = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        for index in [t, p] {
            if index >= classes {
                return Err(Error::IndexOutOfRange { index, classes });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Precision, recall, F1 and support per class; empty denominators give 0.
pub fn class_metrics(cm: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..cm.classes())
        .map(|c| {
            let tp = cm.counts[c][c];
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            ClassMetrics {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: cm.row_sum(c),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub labels: LabelTable,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub total: usize,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    /// Number of precision or recall values that hit an empty denominator.
    pub zero_denominators: usize,
}

impl EvaluationReport {
    /// `(metric, value)` rows: accuracy and the weighted precision, recall and F1.
    pub fn write_metrics_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "metric,value")?;
        writeln!(w, "accuracy,{}", self.accuracy)?;
        writeln!(w, "precision,{}", self.weighted_avg.precision)?;
        writeln!(w, "recall,{}", self.weighted_avg.recall)?;
        writeln!(w, "f1,{}", self.weighted_avg.f1)
    }
}

/// Accuracy plus macro and support-weighted averages of the per-class metrics.
pub fn aggregate(cm: &ConfusionMatrix, labels: &LabelTable) -> Result<EvaluationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    if labels.len() != cm.classes() {
        return Err(Error::LabelTableMismatch(format!(
            "{} labels for a {}-class confusion matrix",
            labels.len(),
            cm.classes()
        )));
    }
    let per_class = class_metrics(cm);
    let k = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    let weighted =
        |f: fn(&ClassMetrics) -> f64| per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64;
    let zero_denominators = (0..cm.classes())
        .map(|c| usize::from(cm.col_sum(c) == 0) + usize::from(cm.row_sum(c) == 0))
        .sum();
    Ok(EvaluationReport {
        labels: labels.clone(),
        confusion: cm.clone(),
        accuracy: cm.trace() as f64 / total as f64,
        total,
        macro_avg: Averages {
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
        },
        weighted_avg: Averages {
            precision: weighted(|m| m.precision),
            recall: weighted(|m| m.recall),
            f1: weighted(|m| m.f1),
        },
        per_class,
        zero_denominators,
    })
}

/// Rounds half away from zero to two decimals.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Tab-separated report: one row per class in label order, then the
/// accuracy, macro and weighted rows. Values are rounded to two decimals.
pub fn format_report(report: &EvaluationReport) -> String {
    let mut out = String::from("Label\tPrecision\tRecall\tF1-Score\tSupport\n");
    for (i, m) in report.per_class.iter().enumerate() {
        let label = report.labels.name(i).unwrap_or_default();
        let _ = writeln!(
            out,
            "{label}\t{:.2}\t{:.2}\t{:.2}\t{}",
            round2(m.precision),
            round2(m.recall),
            round2(m.f1),
            m.support
        );
    }
    let _ = writeln!(out, "Accuracy\t\t\t{:.2}\t{}", round2(report.accuracy), report.total);
    for (name, avg) in [("Macro Avg", &report.macro_avg), ("Weighted Avg", &report.weighted_avg)] {
        let _ = writeln!(
            out,
            "{name}\t{:.2}\t{:.2}\t{:.2}\t{}",
            round2(avg.precision),
            round2(avg.recall),
            round2(avg.f1),
            report.total
        );
    }
    out
}

/// Evaluates a model on a prepared split's test set.
pub fn evaluate_model(model: &FusionModel, split: &PreparedSplit, labels: &LabelTable) -> Result<EvaluationReport> {
    let metrics = crate::network::evaluate_set(model, &split.test)?;
    let truth: Vec<usize> = split.test.iter().map(|s| s.class_index).collect();
    let cm = confusion_matrix(&truth, &metrics.predictions, labels.len())?;
    aggregate(&cm, labels)
}

pub struct AblationRun {
    pub modality: Modality,
    pub accuracy: f64,
    pub report: EvaluationReport,
    pub history: TrainHistory,
    pub model: FusionModel,
}

pub struct Ablation {
    pub split: SplitIndices,
    /// Fitted on the shared training split; every run used it.
    pub scaler: MinMaxScaler,
    pub runs: Vec<AblationRun>,
}

impl Ablation {
    pub fn accuracy(&self, modality: Modality) -> Option<f64> {
        self.runs.iter().find(|r| r.modality == modality).map(|r| r.accuracy)
    }

    /// `modality,accuracy` rows in leap_only, image_only, fusion order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "modality,accuracy")?;
        for r in &self.runs {
            writeln!(w, "{},{}", r.modality, r.accuracy)?;
        }
        Ok(())
    }
}

/// Trains one model per modality on the same split and reports test accuracy.
pub fn ablate(
    samples: &[GestureSample],
    labels: &LabelTable,
    split: &SplitSpec,
    base: &TrainConfig,
    arch: &Architecture,
) -> Result<Ablation> {
    let prepared = PreparedSplit::new(samples, labels, split)?;
    let mut runs = Vec::with_capacity(3);
    for modality in Modality::ALL {
        let cfg = TrainConfig {
            modality,
            ..base.clone()
        };
        let tag = |e: Error| Error::Modality {
            modality: modality.to_string(),
            source: Box::new(e),
        };
        let trained = train_and_evaluate(&prepared, labels, &cfg, arch).map_err(tag)?;
        runs.push(AblationRun {
            modality,
            accuracy: trained.report.accuracy,
            report: trained.report,
            history: trained.history,
            model: trained.model,
        });
    }
    Ok(Ablation {
        split: prepared.indices,
        scaler: prepared.scaler,
        runs,
    })
}
