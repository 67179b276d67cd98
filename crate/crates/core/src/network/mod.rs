//! Fusion network: a time-distributed dense motion branch, a convolutional
//! image backbone, and a dense head over their concatenated features.

mod checkpoint;
mod layers;
mod model;
pub mod ops;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry, FORMAT_VERSION};
pub use layers::{Activation, Conv2d, DenseLayer};
pub use model::{
    Architecture, BackboneWeights, Batch, ForwardCache, FusionModel, Gradients, ImageBackbone, Modality, Pass,
    RmsPropState,
};
pub use ops::{argmax, cross_entropy, dropout_forward, rmsprop_step, softmax, DropoutMode};
pub use train::{
    evaluate_set, fit, fit_scaler, forward, predict, prepare_samples, EpochRecord, PreparedSample, SetMetrics,
    TrainConfig, TrainHistory,
};
