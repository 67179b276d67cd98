//! Corpus ingestion, label tables and sequence-length normalisation.
//!
//! On-disk layout:
//!
//! ```text
//! root/manifest.json
//! root/<sign>/rep_NN/frames.csv      header + 73 frame rows
//! root/<sign>/rep_NN/frame_FF.png    FF = 00..72, 8-bit RGB
//! ```

mod split;
mod synth;

pub use split::{stratified_split, SplitIndices, SplitSpec};
pub use synth::{factor_classes, generate_synthetic, SynthConfig, SynthMode};

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_frames_csv, FRAME_LEN};
use crate::preprocess::{preprocess_image, ImageTensor};

pub const FRAMES_PER_REPETITION: usize = 73;
pub const DEFAULT_REPRESENTATIVE_FRAME: usize = 36;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_FILE: &str = "frames.csv";

pub fn frame_image_name(frame: usize) -> String {
    format!("frame_{frame:02}.png")
}

pub fn repetition_dir_name(rep: usize) -> String {
    format!("rep_{rep:02}")
}

/// One labelled repetition: a motion matrix and one representative image.
#[derive(Clone, Debug)]
pub struct GestureSample {
    pub label: String,
    pub class_index: usize,
    pub frames: Array2<f64>,
    pub image: ImageTensor,
    pub repetition_id: usize,
}

impl GestureSample {
    /// Field-wise equality that treats NaN as equal to NaN.
    pub fn same_as(&self, other: &GestureSample) -> bool {
        self.label == other.label
            && self.class_index == other.class_index
            && self.repetition_id == other.repetition_id
            && self.image == other.image
            && self.frames.dim() == other.frames.dim()
            && self
                .frames
                .iter()
                .zip(other.frames.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Ordered sign names with a reverse lookup. Serialized as a plain list.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelTable {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelTable {
    fn from(names: Vec<String>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        LabelTable { names, index }
    }
}

impl From<LabelTable> for Vec<String> {
    fn from(t: LabelTable) -> Self {
        t.names
    }
}

impl LabelTable {
    /// Builds a table from arbitrary names: deduplicated and sorted.
    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        names.dedup();
        LabelTable::from(names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub signs: Vec<String>,
    pub repetitions: usize,
    pub frames_per_repetition: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub image_side: usize,
    pub representative_frame: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            image_side: crate::preprocess::DEFAULT_IMAGE_SIDE,
            representative_frame: DEFAULT_REPRESENTATIVE_FRAME,
        }
    }
}

/// Truncates to the first `target` rows or pads by repeating the last row.
pub fn normalize_length(frames: &Array2<f64>, target: usize) -> Result<Array2<f64>> {
    let (n, width) = frames.dim();
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(Array2::from_shape_fn((target, width), |(i, j)| {
        frames[[i.min(n - 1), j]]
    }))
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            let name = entry
                .file_name()
                .into_string()
                .map_err(|_| Error::layout(&path, "directory name is not UTF-8"))?;
            out.push((name, path));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn parse_repetition(name: &str) -> Option<usize> {
    name.strip_prefix("rep_")?.parse().ok()
}

pub fn read_manifest(root: &Path) -> Result<Option<Manifest>> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn load_repetition(
    dir: &Path,
    label: &str,
    class_index: usize,
    repetition_id: usize,
    opts: &LoadOptions,
) -> Result<GestureSample> {
    let csv_path = dir.join(FRAMES_FILE);
    let file = fs::File::open(&csv_path).map_err(|_| Error::csv(&csv_path, "file is missing"))?;
    let rows = read_frames_csv(std::io::BufReader::new(file), &csv_path)?;
    let mut raw = Array2::zeros((rows.len(), FRAME_LEN));
    for (mut dst, row) in raw.rows_mut().into_iter().zip(&rows) {
        dst.assign(&ndarray::ArrayView1::from(row.vector.values()));
    }
    let frames = normalize_length(&raw, FRAMES_PER_REPETITION).map_err(|_| Error::csv(&csv_path, "no frame rows"))?;

    let img_path = dir.join(frame_image_name(opts.representative_frame));
    if !img_path.is_file() {
        return Err(Error::MissingImage(img_path));
    }
    let img = image::open(&img_path)
        .map_err(|e| Error::Image {
            path: img_path.clone(),
            source: e,
        })?
        .to_rgb8();
    let image = preprocess_image(&img, opts.image_side)?;

    Ok(GestureSample {
        label: label.to_string(),
        class_index,
        frames,
        image,
        repetition_id,
    })
}

/// Loads every repetition under `root`, ordered by label then repetition.
///
/// Frames are returned raw: NaN values survive until imputation.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<(LabelTable, Vec<GestureSample>)> {
    if !root.is_dir() {
        return Err(Error::layout(root, "corpus root is not a directory"));
    }
    if opts.representative_frame >= FRAMES_PER_REPETITION {
        return Err(Error::InvalidConfig {
            key: "representative_frame".into(),
            reason: format!("must be below {FRAMES_PER_REPETITION}"),
        });
    }
    let sign_dirs = sorted_subdirs(root)?;
    let labels = LabelTable::from_names(sign_dirs.iter().map(|(n, _)| n.clone()));
    if let Some(manifest) = read_manifest(root)? {
        if LabelTable::from_names(manifest.signs.iter().cloned()) != labels {
            return Err(Error::layout(root, "manifest signs do not match the sign directories"));
        }
    }

    let mut samples = Vec::new();
    for (label, sign_dir) in &sign_dirs {
        let class_index = labels.index_of(label).expect("label from same listing");
        let mut reps = Vec::new();
        for (name, path) in sorted_subdirs(sign_dir)? {
            let rep = parse_repetition(&name).ok_or_else(|| Error::layout(&path, "expected a rep_NN directory"))?;
            reps.push((rep, path));
        }
        reps.sort_by_key(|(rep, _)| *rep);
        for (rep, path) in reps {
            samples.push(load_repetition(&path, label, class_index, rep, opts)?);
        }
    }
    Ok((labels, samples))
}
