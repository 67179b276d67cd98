//! Mini-batch training with RMSprop, per-epoch history and prediction.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, Batch, ForwardCache, FusionModel, Modality, Pass};
use super::ops::argmax;
use crate::dataset::GestureSample;
use crate::error::{Error, Result};
use crate::preprocess::{augment_image, impute_nan, AugmentParams, ImageTensor, MinMaxScaler};

const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub l2_lambda: f64,
    pub seed: u64,
    pub augment: AugmentParams,
    pub modality: Modality,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 75,
            learning_rate: 1e-3,
            rms_decay: 0.9,
            rms_epsilon: 1e-7,
            batch_size: 8,
            dropout_rate: 0.2,
            l2_lambda: 0.01,
            seed: 0,
            augment: AugmentParams::default(),
            modality: Modality::Fusion,
            freeze_backbone: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfig {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate", "must lie in [0, 1)");
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return bad("learning_rate", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.rms_decay) {
            return bad("rms_decay", "must lie in [0, 1)");
        }
        if self.rms_epsilon.is_nan() || self.rms_epsilon <= 0.0 {
            return bad("rms_epsilon", "must be positive");
        }
        if self.l2_lambda.is_nan() || self.l2_lambda < 0.0 {
            return bad("l2_lambda", "must be non-negative");
        }
        self.augment.validate()
    }

    /// Fresh model for this configuration, initialised from `seed`.
    pub fn build_model(&self, arch: Architecture) -> Result<FusionModel> {
        FusionModel::new(
            arch,
            self.modality,
            self.dropout_rate,
            self.l2_lambda,
            self.freeze_backbone,
            self.seed,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// `epoch,train_loss,train_acc,val_loss,val_acc`, one row per epoch.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,train_acc,val_loss,val_acc")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
            )?;
        }
        Ok(())
    }
}

/// A sample ready for the network: imputed, scaled frames and a `[0, 1]` image.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub frames: Array2<f64>,
    pub image: ImageTensor,
    pub class_index: usize,
}

/// Imputes NaN and applies the scaler to every frame row.
pub fn prepare_samples(samples: &[GestureSample], scaler: &MinMaxScaler) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let mut frames = impute_nan(&s.frames);
            scaler.apply_matrix(&mut frames)?;
            Ok(PreparedSample {
                frames,
                image: s.image.clone(),
                class_index: s.class_index,
            })
        })
        .collect()
}

/// Fits the scaler on the imputed frames of the given (training) samples.
pub fn fit_scaler(train: &[GestureSample]) -> Result<MinMaxScaler> {
    let imputed: Vec<Array2<f64>> = train.iter().map(|s| impute_nan(&s.frames)).collect();
    crate::preprocess::fit_minmax(imputed.iter().flat_map(|m| {
        m.rows()
            .into_iter()
            .map(|r| r.to_slice().expect("owned rows are contiguous"))
    }))
}

fn batch_of(model: &FusionModel, samples: &[&PreparedSample], images: Option<&[ImageTensor]>) -> Result<Batch> {
    let a = &model.arch;
    match images {
        Some(imgs) => Batch::stack(
            samples.iter().zip(imgs).map(|(s, i)| (&s.frames, i.values())),
            a.frames,
            a.features,
            a.image_side,
        ),
        None => Batch::stack(
            samples.iter().map(|s| (&s.frames, s.image.values())),
            a.frames,
            a.features,
            a.image_side,
        ),
    }
}

/// Single-sample forward pass.
pub fn forward(model: &FusionModel, sample: &PreparedSample, pass: Pass<'_>) -> Result<ForwardCache> {
    model.forward_batch(&batch_of(model, &[sample], None)?, pass)
}

/// Arg-max class of the inference-mode softmax; ties go to the lowest index.
pub fn predict(model: &FusionModel, sample: &PreparedSample) -> Result<usize> {
    let cache = forward(model, sample, Pass::Infer)?;
    Ok(argmax(cache.probs().row(0).as_slice().expect("row of owned array")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Inference-mode mean cross-entropy (plus the L2 term), accuracy and predictions.
pub fn evaluate_set(model: &FusionModel, samples: &[PreparedSample]) -> Result<SetMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut ce_total = 0.0;
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&PreparedSample> = chunk.iter().collect();
        let cache = model.forward_batch(&batch_of(model, &refs, None)?, Pass::Infer)?;
        let targets: Vec<usize> = chunk.iter().map(|s| s.class_index).collect();
        ce_total += cache.cross_entropy(&targets) * chunk.len() as f64;
        for row in cache.probs().rows() {
            predictions.push(argmax(row.as_slice().expect("row of owned array")));
        }
    }
    let correct = predictions
        .iter()
        .zip(samples)
        .filter(|(p, s)| **p == s.class_index)
        .count();
    Ok(SetMetrics {
        loss: ce_total / samples.len() as f64 + model.l2_penalty(),
        accuracy: correct as f64 / samples.len() as f64,
        predictions,
    })
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Trains for exactly `cfg.epochs` epochs and returns the per-epoch history.
///
/// Training images are augmented on the fly; the recorded metrics use the
/// un-augmented training and validation sets in inference mode.
pub fn fit(
    model: &mut FusionModel,
    train: &[PreparedSample],
    val: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    model.dropout_rate = cfg.dropout_rate;

    let mut shuffle_rng = stream(cfg.seed, 1);
    let mut dropout_rng = stream(cfg.seed, 2);
    let mut augment_rng = stream(cfg.augment.seed, 3);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&PreparedSample> = idx.iter().map(|&i| &train[i]).collect();
            let images: Vec<ImageTensor> = if model.modality.uses_image() {
                samples
                    .iter()
                    .map(|s| augment_image(&s.image, &cfg.augment.sample(&mut augment_rng)))
                    .collect()
            } else {
                samples.iter().map(|s| s.image.clone()).collect()
            };
            let batch = batch_of(model, &samples, Some(&images))?;
            let targets: Vec<usize> = samples.iter().map(|s| s.class_index).collect();
            let cache = model.forward_batch(&batch, Pass::Train(&mut dropout_rng))?;
            let loss = cache.cross_entropy(&targets) + model.l2_penalty();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let grads = model.backward(&cache, &targets)?;
            model.apply_gradients(&grads, cfg.learning_rate, cfg.rms_decay, cfg.rms_epsilon)?;
        }

        let t = evaluate_set(model, train)?;
        let v = evaluate_set(model, val)?;
        if !t.loss.is_finite() || !v.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
            });
        }
        history.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: t.loss,
            train_accuracy: t.accuracy,
            val_loss: v.loss,
            val_accuracy: v.accuracy,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_arch(classes: usize) -> Architecture {
        Architecture {
            frames: 3,
            features: 5,
            image_side: 8,
            classes,
            leap_units: vec![6, 4, 2],
            head_units: vec![6, 5],
            backbone_blocks: vec![vec![2], vec![2], vec![2]],
            backbone_features: 3,
        }
    }

    fn samples(arch: &Architecture, n: usize, seed: u64) -> Vec<PreparedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| PreparedSample {
                frames: Array2::from_shape_simple_fn((arch.frames, arch.features), || rng.random()),
                image: ImageTensor::new(ndarray::Array3::from_shape_simple_fn(
                    (arch.image_side, arch.image_side, 3),
                    || rng.random(),
                ))
                .unwrap(),
                class_index: i % arch.classes,
            })
            .collect()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_one_sample() {
        let arch = tiny_arch(2);
        let data = samples(&arch, 1, 0);
        let c = cfg(1);
        let mut m = c.build_model(arch).unwrap();
        let h = fit(&mut m, &data, &data, &c).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h.records[0].epoch, 1);
    }

    #[test]
    fn zero_epochs_rejected() {
        let arch = tiny_arch(2);
        let data = samples(&arch, 2, 0);
        let c = cfg(0);
        let mut m = cfg(1).build_model(arch).unwrap();
        assert!(matches!(
            fit(&mut m, &data, &data, &c),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let arch = tiny_arch(3);
        let data = samples(&arch, 6, 1);
        let c = TrainConfig {
            learning_rate: 0.0,
            ..cfg(3)
        };
        let mut m = c.build_model(arch).unwrap();
        let before: Vec<Vec<f64>> = m.parameters().iter().map(|p| p.to_vec()).collect();
        let h = fit(&mut m, &data, &data, &c).unwrap();
        let after: Vec<Vec<f64>> = m.parameters().iter().map(|p| p.to_vec()).collect();
        assert_eq!(before, after);
        let losses: Vec<u64> = h.records.iter().map(|r| r.train_loss.to_bits()).collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn history_is_seed_deterministic() {
        let arch = tiny_arch(3);
        let data = samples(&arch, 6, 2);
        let c = cfg(3);
        let run = || {
            let mut m = c.build_model(arch.clone()).unwrap();
            fit(&mut m, &data, &data, &c).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn history_csv_rows() {
        let h = TrainHistory {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 2.5,
                train_accuracy: 0.25,
                val_loss: 3.0,
                val_accuracy: 0.5,
            }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "epoch,train_loss,train_acc,val_loss,val_acc\n1,2.5,0.25,3,0.5\n"
        );
    }

    #[test]
    fn zero_model_predicts_class_zero() {
        let arch = tiny_arch(4);
        let m = FusionModel::zeroed(arch.clone(), Modality::Fusion, 0.0).unwrap();
        for s in samples(&arch, 3, 5) {
            assert_eq!(predict(&m, &s).unwrap(), 0);
        }
    }
}
