//! NaN imputation, min-max scaling, image resizing and image augmentation.

use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IMAGE_SIDE: usize = 224;

/// Replaces every NaN with 0.
pub fn impute_nan(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|v| if v.is_nan() { 0.0 } else { v })
}

pub fn impute_nan_inplace(values: &mut [f64]) {
    for v in values.iter_mut().filter(|v| v.is_nan()) {
        *v = 0.0;
    }
}

/// Per-feature min-max scaler. Serialized as `{"min": [...], "max": [...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    #[serde(rename = "min")]
    pub feat_min: Vec<f64>,
    #[serde(rename = "max")]
    pub feat_max: Vec<f64>,
    #[serde(skip, default = "fitted_on_load")]
    pub fitted: bool,
}

fn fitted_on_load() -> bool {
    true
}

impl MinMaxScaler {
    pub fn unfitted(width: usize) -> Self {
        MinMaxScaler {
            feat_min: vec![0.0; width],
            feat_max: vec![0.0; width],
            fitted: false,
        }
    }

    pub fn width(&self) -> usize {
        self.feat_min.len()
    }

    /// Scales a single row. Values outside the fitted range are not clamped.
    pub fn apply(&self, row: &[f64]) -> Result<Vec<f64>> {
        let mut out = row.to_vec();
        self.apply_inplace(&mut out)?;
        Ok(out)
    }

    pub fn apply_inplace(&self, row: &mut [f64]) -> Result<()> {
        if !self.fitted {
            return Err(Error::NotFitted);
        }
        if row.len() != self.width() {
            return Err(Error::WrongLength {
                expected: self.width(),
                actual: row.len(),
            });
        }
        for ((v, &lo), &hi) in row.iter_mut().zip(&self.feat_min).zip(&self.feat_max) {
            let range = hi - lo;
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
        Ok(())
    }

    /// Scales every row of a frames-by-features matrix in place.
    pub fn apply_matrix(&self, m: &mut Array2<f64>) -> Result<()> {
        for mut row in m.rows_mut() {
            match row.as_slice_mut() {
                Some(slice) => self.apply_inplace(slice)?,
                None => {
                    let mut owned = row.to_vec();
                    self.apply_inplace(&mut owned)?;
                    row.iter_mut().zip(owned).for_each(|(d, s)| *d = s);
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scaler: MinMaxScaler = serde_json::from_str(&text)?;
        if scaler.feat_min.len() != scaler.feat_max.len() {
            return Err(Error::WrongLength {
                expected: scaler.feat_min.len(),
                actual: scaler.feat_max.len(),
            });
        }
        Ok(scaler)
    }
}

/// Column-wise extrema over every training row.
pub fn fit_minmax<'a, I>(rows: I) -> Result<MinMaxScaler>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut rows = rows.into_iter();
    let first = rows.next().ok_or(Error::EmptyInput)?;
    let mut feat_min = first.to_vec();
    let mut feat_max = first.to_vec();
    for row in rows {
        if row.len() != feat_min.len() {
            return Err(Error::WrongLength {
                expected: feat_min.len(),
                actual: row.len(),
            });
        }
        for (i, &v) in row.iter().enumerate() {
            feat_min[i] = feat_min[i].min(v);
            feat_max[i] = feat_max[i].max(v);
        }
    }
    Ok(MinMaxScaler {
        feat_min,
        feat_max,
        fitted: true,
    })
}

/// RGB image with values in `[0, 1]`, stored height x width x channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Array3<f64>);

impl ImageTensor {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (_, _, c) = values.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("image has {c} channels, expected 3")));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::ShapeMismatch("image values must lie in [0, 1]".into()));
        }
        Ok(ImageTensor(values))
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ImageTensor(Array3::from_elem((height, width, 3), value.clamp(0.0, 1.0)))
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }
}

/// Bilinear sample with half-pixel centres, replicating edge pixels.
fn bilinear_clamped(src: &Array3<f64>, y: f64, x: f64, c: usize) -> f64 {
    let (h, w, _) = src.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let dy = y - y0 as f64;
    let dx = x - x0 as f64;
    let top = src[[y0, x0, c]] * (1.0 - dx) + src[[y0, x1, c]] * dx;
    let bottom = src[[y1, x0, c]] * (1.0 - dx) + src[[y1, x1, c]] * dx;
    top * (1.0 - dy) + bottom * dy
}

/// Bilinear resize of a raw float image to `side x side`.
pub fn resize_bilinear(src: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, c) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array3::from_shape_fn((out_h, out_w, c), |(i, j, k)| {
        let y = (i as f64 + 0.5) * sy - 0.5;
        let x = (j as f64 + 0.5) * sx - 0.5;
        bilinear_clamped(src, y, x, k)
    })
}

/// Resizes a byte image to `side x side` and divides by 255.
pub fn preprocess_image(raw: &RgbImage, side: usize) -> Result<ImageTensor> {
    let (w, h) = (raw.width() as usize, raw.height() as usize);
    if w == 0 || h == 0 || side == 0 {
        return Err(Error::EmptyImage { height: h, width: w });
    }
    let bytes = Array3::from_shape_fn((h, w, 3), |(y, x, c)| raw.get_pixel(x as u32, y as u32)[c] as f64);
    let resized = if h == side && w == side {
        bytes
    } else {
        resize_bilinear(&bytes, side, side)
    };
    Ok(ImageTensor(resized.mapv(|v| (v / 255.0).clamp(0.0, 1.0))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_max_deg: f64,
    pub zoom_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_max_deg: 15.0,
            zoom_range: (0.9, 1.1),
            contrast_range: (0.8, 1.2),
            seed: 0,
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        let contains_one = |(lo, hi): (f64, f64)| lo <= 1.0 && 1.0 <= hi && lo > 0.0;
        if self.rotation_max_deg.is_nan() || self.rotation_max_deg < 0.0 {
            return Err(Error::InvalidConfig {
                key: "rotation_max_deg".into(),
                reason: "must be non-negative".into(),
            });
        }
        if !contains_one(self.zoom_range) {
            return Err(Error::InvalidConfig {
                key: "zoom_range".into(),
                reason: "must be positive and contain 1.0".into(),
            });
        }
        if !contains_one(self.contrast_range) {
            return Err(Error::InvalidConfig {
                key: "contrast_range".into(),
                reason: "must be positive and contain 1.0".into(),
            });
        }
        Ok(())
    }

    /// Draws rotation, zoom and contrast, in that order, from three uniforms.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentDraw {
        let u: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        self.from_uniforms(u)
    }

    pub fn from_uniforms(&self, u: [f64; 3]) -> AugmentDraw {
        let lerp = |(lo, hi): (f64, f64), t: f64| lo + (hi - lo) * t;
        AugmentDraw {
            rotation_deg: lerp((-self.rotation_max_deg, self.rotation_max_deg), u[0]),
            zoom: lerp(self.zoom_range, u[1]),
            contrast: lerp(self.contrast_range, u[2]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub rotation_deg: f64,
    pub zoom: f64,
    pub contrast: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        rotation_deg: 0.0,
        zoom: 1.0,
        contrast: 1.0,
    };
}

/// Bilinear sample that treats everything outside the image as 0.
fn bilinear_zero_fill(src: &Array3<f64>, y: f64, x: f64, c: usize) -> f64 {
    let (h, w, _) = src.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            src[[yy as usize, xx as usize, c]]
        }
    };
    let top = at(y0, x0) * (1.0 - dx) + at(y0, x0 + 1.0) * dx;
    let bottom = at(y0 + 1.0, x0) * (1.0 - dx) + at(y0 + 1.0, x0 + 1.0) * dx;
    top * (1.0 - dy) + bottom * dy
}

/// Rotation about the centre, then centre zoom, then contrast around 0.5.
pub fn augment_image(img: &ImageTensor, draw: &AugmentDraw) -> ImageTensor {
    let src = &img.0;
    let (h, w, c) = src.dim();
    let mut out = if draw.rotation_deg == 0.0 && draw.zoom == 1.0 {
        src.clone()
    } else {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let (sin, cos) = draw.rotation_deg.to_radians().sin_cos();
        Array3::from_shape_fn((h, w, c), |(i, j, k)| {
            // output -> pre-zoom -> pre-rotation source coordinates
            let qy = (i as f64 - cy) / draw.zoom;
            let qx = (j as f64 - cx) / draw.zoom;
            let sy = cy + cos * qy - sin * qx;
            let sx = cx + sin * qy + cos * qx;
            bilinear_zero_fill(src, sy, sx, k)
        })
    };
    if draw.contrast != 1.0 {
        out.mapv_inplace(|v| (0.5 + draw.contrast * (v - 0.5)).clamp(0.0, 1.0));
    }
    ImageTensor(out)
}
