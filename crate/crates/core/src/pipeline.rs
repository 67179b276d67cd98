//! Split, scale, train and evaluate in one place, shared by the command-line
//! driver and the ablation.

use crate::dataset::{stratified_split, GestureSample, LabelTable, SplitIndices, SplitSpec};
use crate::error::Result;
use crate::evaluation::{evaluate_model, EvaluationReport};
use crate::network::{
    fit, fit_scaler, prepare_samples, Architecture, FusionModel, PreparedSample, TrainConfig, TrainHistory,
};
use crate::preprocess::MinMaxScaler;

/// A stratified split with the scaler fitted on its training part only.
pub struct PreparedSplit {
    pub indices: SplitIndices,
    pub scaler: MinMaxScaler,
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

fn pick(samples: &[GestureSample], idx: &[usize]) -> Vec<GestureSample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

impl PreparedSplit {
    pub fn new(samples: &[GestureSample], labels: &LabelTable, spec: &SplitSpec) -> Result<Self> {
        let classes: Vec<usize> = samples.iter().map(|s| s.class_index).collect();
        let indices = stratified_split(&classes, labels.names(), spec)?;
        let train_raw = pick(samples, &indices.train);
        let scaler = fit_scaler(&train_raw)?;
        Ok(PreparedSplit {
            train: prepare_samples(&train_raw, &scaler)?,
            val: prepare_samples(&pick(samples, &indices.val), &scaler)?,
            test: prepare_samples(&pick(samples, &indices.test), &scaler)?,
            scaler,
            indices,
        })
    }

    /// Rebuilds the same split but scales with an existing scaler.
    pub fn with_scaler(
        samples: &[GestureSample],
        labels: &LabelTable,
        spec: &SplitSpec,
        scaler: MinMaxScaler,
    ) -> Result<Self> {
        let classes: Vec<usize> = samples.iter().map(|s| s.class_index).collect();
        let indices = stratified_split(&classes, labels.names(), spec)?;
        Ok(PreparedSplit {
            train: prepare_samples(&pick(samples, &indices.train), &scaler)?,
            val: prepare_samples(&pick(samples, &indices.val), &scaler)?,
            test: prepare_samples(&pick(samples, &indices.test), &scaler)?,
            scaler,
            indices,
        })
    }
}

pub struct TrainedRun {
    pub model: FusionModel,
    pub history: TrainHistory,
    pub report: EvaluationReport,
}

pub fn train_and_evaluate(
    split: &PreparedSplit,
    labels: &LabelTable,
    cfg: &TrainConfig,
    arch: &Architecture,
) -> Result<TrainedRun> {
    let mut model = cfg.build_model(arch.clone())?;
    let history = fit(&mut model, &split.train, &split.val, cfg)?;
    let report = evaluate_model(&model, split, labels)?;
    Ok(TrainedRun { model, history, report })
}
