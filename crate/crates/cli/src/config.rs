//! The flat JSON run configuration and its command-line overrides.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use signfusion::dataset::{LoadOptions, SplitSpec, DEFAULT_REPRESENTATIVE_FRAME};
use signfusion::network::{Modality, TrainConfig};
use signfusion::preprocess::{AugmentParams, DEFAULT_IMAGE_SIDE};
use signfusion::Error;

pub const FORMATS: [&str; 3] = ["json", "csv", "text"];

fn default_formats() -> Vec<String> {
    FORMATS.iter().map(|s| s.to_string()).collect()
}

/// Every key of a run, one level deep. Unknown keys are rejected so that a
/// typo cannot silently fall back to a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_root: PathBuf,
    pub output_dir: PathBuf,
    /// Drives the split, weight initialisation, shuffling and dropout.
    pub seed: u64,
    /// Augmentation stream seed; falls back to `seed`.
    #[serde(default)]
    pub augment_seed: Option<u64>,
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,

    #[serde(default = "default_image_side")]
    pub image_side: usize,
    #[serde(default = "default_representative_frame")]
    pub representative_frame: usize,

    #[serde(default = "defaults::train_frac")]
    pub train_frac: f64,
    #[serde(default = "defaults::val_frac")]
    pub val_frac: f64,
    #[serde(default = "defaults::test_frac")]
    pub test_frac: f64,

    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::rms_decay")]
    pub rms_decay: f64,
    #[serde(default = "defaults::rms_epsilon")]
    pub rms_epsilon: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::dropout_rate")]
    pub dropout_rate: f64,
    #[serde(default = "defaults::l2_lambda")]
    pub l2_lambda: f64,
    #[serde(default = "defaults::modality")]
    pub modality: Modality,
    #[serde(default = "defaults::freeze_backbone")]
    pub freeze_backbone: bool,

    #[serde(default = "defaults::rotation_max_deg")]
    pub rotation_max_deg: f64,
    #[serde(default = "defaults::zoom_min")]
    pub zoom_min: f64,
    #[serde(default = "defaults::zoom_max")]
    pub zoom_max: f64,
    #[serde(default = "defaults::contrast_min")]
    pub contrast_min: f64,
    #[serde(default = "defaults::contrast_max")]
    pub contrast_max: f64,
}

fn default_image_side() -> usize {
    DEFAULT_IMAGE_SIDE
}

fn default_representative_frame() -> usize {
    DEFAULT_REPRESENTATIVE_FRAME
}

// Defaults are read off the library's own default structs so the two can
// never drift apart.
mod defaults {
    use super::*;

    fn split() -> SplitSpec {
        SplitSpec::default()
    }
    fn train() -> TrainConfig {
        TrainConfig::default()
    }
    fn augment() -> AugmentParams {
        AugmentParams::default()
    }

    pub fn train_frac() -> f64 {
        split().train_frac
    }
    pub fn val_frac() -> f64 {
        split().val_frac
    }
    pub fn test_frac() -> f64 {
        split().test_frac
    }
    pub fn epochs() -> usize {
        train().epochs
    }
    pub fn learning_rate() -> f64 {
        train().learning_rate
    }
    pub fn rms_decay() -> f64 {
        train().rms_decay
    }
    pub fn rms_epsilon() -> f64 {
        train().rms_epsilon
    }
    pub fn batch_size() -> usize {
        train().batch_size
    }
    pub fn dropout_rate() -> f64 {
        train().dropout_rate
    }
    pub fn l2_lambda() -> f64 {
        train().l2_lambda
    }
    pub fn modality() -> Modality {
        train().modality
    }
    pub fn freeze_backbone() -> bool {
        train().freeze_backbone
    }
    pub fn rotation_max_deg() -> f64 {
        augment().rotation_max_deg
    }
    pub fn zoom_min() -> f64 {
        augment().zoom_range.0
    }
    pub fn zoom_max() -> f64 {
        augment().zoom_range.1
    }
    pub fn contrast_min() -> f64 {
        augment().contrast_range.0
    }
    pub fn contrast_max() -> f64 {
        augment().contrast_range.1
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Parses a `key=value` override. The value is read as JSON when it parses
/// and as a bare string otherwise, so `epochs=3` and `modality=fusion` both work.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .with_context(|| format!("override `{raw}` is not of the form key=value"))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

impl RunConfig {
    /// Reads the config file, applies overrides in order, and validates.
    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let Value::Object(map) = doc else {
            anyhow::bail!("config {} must be a single JSON object", path.display());
        };
        Self::from_map(map, overrides)
    }

    pub fn from_map(mut map: Map<String, Value>, overrides: &[(String, Value)]) -> Result<Self> {
        for (key, value) in overrides {
            map.insert(key.clone(), value.clone());
        }
        for key in ["corpus_root", "output_dir", "seed"] {
            if !map.contains_key(key) {
                return Err(invalid(key, "required key is missing").into());
            }
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(Value::Object(map)).map_err(|e| {
            let key = e.path().to_string();
            invalid(&key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !self.corpus_root.is_dir() {
            return Err(invalid(
                "corpus_root",
                format!("{} is not an existing directory", self.corpus_root.display()),
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(invalid("output_dir", "must not be empty"));
        }
        let mut seen = BTreeSet::new();
        for f in &self.formats {
            if !FORMATS.contains(&f.as_str()) {
                return Err(invalid(
                    "formats",
                    format!("unknown format `{f}`, expected one of {FORMATS:?}"),
                ));
            }
            if !seen.insert(f) {
                return Err(invalid("formats", format!("`{f}` listed twice")));
            }
        }
        if self.image_side < 8 || !self.image_side.is_multiple_of(8) {
            return Err(invalid("image_side", "must be a positive multiple of 8"));
        }
        self.split_spec().validate()?;
        self.train_config().validate()
    }

    pub fn wants(&self, format: &str) -> bool {
        self.formats.iter().any(|f| f == format)
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            image_side: self.image_side,
            representative_frame: self.representative_frame,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_frac: self.train_frac,
            val_frac: self.val_frac,
            test_frac: self.test_frac,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            rms_decay: self.rms_decay,
            rms_epsilon: self.rms_epsilon,
            batch_size: self.batch_size,
            dropout_rate: self.dropout_rate,
            l2_lambda: self.l2_lambda,
            seed: self.seed,
            augment: AugmentParams {
                rotation_max_deg: self.rotation_max_deg,
                zoom_range: (self.zoom_min, self.zoom_max),
                contrast_range: (self.contrast_min, self.contrast_max),
                seed: self.augment_seed.unwrap_or(self.seed),
            },
            modality: self.modality,
            freeze_backbone: self.freeze_backbone,
        }
    }
}
