//! Deterministic synthetic corpora.
//!
//! In [`SynthMode::Joint`] both modalities carry the full class. In
//! [`SynthMode::SplitSignal`] a class `k = a * B + b` puts `a` only in the
//! motion frames and `b` only in the images, so a single modality can at
//! best tell apart `A` (motion) or `B` (image) groups.

use std::fs;
use std::path::Path;

use chrono::DateTime;
use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    frame_image_name, repetition_dir_name, GestureSample, LabelTable, Manifest, FRAMES_FILE, FRAMES_PER_REPETITION,
    MANIFEST_FILE,
};
use crate::error::{Error, Result};
use crate::features::{derive_hand_features, flatten_frame, write_frames_csv, FrameRow, HandFrame, Vec3, FRAME_LEN};
use crate::preprocess::preprocess_image;

/// Milliseconds between consecutive frames.
const FRAME_INTERVAL_MS: i64 = 200;
/// 2025-01-01T00:00:00Z
const BASE_EPOCH_MS: i64 = 1_735_689_600_000;
const PALM_AMPLITUDE_MM: f64 = 40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    Joint,
    SplitSignal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub repetitions: usize,
    pub mode: SynthMode,
    pub seed: u64,
    pub image_side: usize,
    /// Standard deviation of positional noise in millimetres.
    pub leap_noise: f64,
    /// Standard deviation of pixel noise in byte units.
    pub image_noise: f64,
    /// Whether to write all 73 frame images or only the representative one.
    pub all_frame_images: bool,
    pub representative_frame: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 18,
            repetitions: 10,
            mode: SynthMode::Joint,
            seed: 7,
            image_side: 32,
            leap_noise: 5.0,
            image_noise: 20.0,
            all_frame_images: true,
            representative_frame: super::DEFAULT_REPRESENTATIVE_FRAME,
        }
    }
}

/// Splits `k` into `(a, b)` with `a * b = k`, `a >= b >= 2` and `b` as large
/// as possible. `a` is carried by the motion frames, `b` by the images.
pub fn factor_classes(k: usize) -> Result<(usize, usize)> {
    let b = (2..=k)
        .take_while(|b| b * b <= k)
        .filter(|b| k.is_multiple_of(*b))
        .last()
        .ok_or(Error::BadFactorization(k))?;
    Ok((k / b, b))
}

pub fn sign_name(class: usize) -> String {
    format!("sign_{class:02}")
}

struct Codes {
    motion: usize,
    motion_count: usize,
    visual: usize,
    visual_count: usize,
}

fn codes(cfg: &SynthConfig, class: usize) -> Result<Codes> {
    Ok(match cfg.mode {
        SynthMode::Joint => Codes {
            motion: class,
            motion_count: cfg.classes,
            visual: class,
            visual_count: cfg.classes,
        },
        SynthMode::SplitSignal => {
            let (a, b) = factor_classes(cfg.classes)?;
            Codes {
                motion: class / b,
                motion_count: a,
                visual: class % b,
                visual_count: b,
            }
        }
    })
}

fn gaussian(sd: f64) -> Normal<f64> {
    Normal::new(0.0, sd.max(0.0)).expect("finite non-negative sd")
}

fn jitter<R: Rng>(rng: &mut R, noise: &Normal<f64>) -> Vec3 {
    Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng))
}

fn hand_at<R: Rng>(palm: Vec3, velocity: Vec3, side: f64, rng: &mut R, noise: &Normal<f64>) -> HandFrame {
    let mut hand = HandFrame {
        present: true,
        ..HandFrame::default()
    };
    let palm = palm.add(&jitter(rng, noise));
    hand.arm.start = palm.add(&Vec3::new(side * 20.0, -80.0, 220.0)).add(&jitter(rng, noise));
    hand.arm.end = palm.add(&Vec3::new(0.0, 0.0, 40.0)).add(&jitter(rng, noise));
    hand.palm.position = palm;
    hand.palm.velocity = velocity.add(&jitter(rng, noise));
    let n = Vec3::new(0.0, -1.0, 0.0).add(&jitter(rng, noise).scale(0.01));
    hand.palm.normal = n.scale(1.0 / crate::features::magnitude(&n).max(1e-9));
    hand.palm.pitch = 0.1 + noise.sample(rng) * 0.002;
    hand.palm.roll = -0.05 * side + noise.sample(rng) * 0.002;
    hand.palm.yaw = 0.02 + noise.sample(rng) * 0.002;
    for (f, finger) in hand.fingers.iter_mut().enumerate() {
        let spread = side * (-40.0 + 20.0 * f as f64);
        for (b, bone) in finger.iter_mut().enumerate() {
            let reach = |k: usize| Vec3::new(spread, 0.0, -(k as f64) * 25.0);
            bone.start = palm.add(&reach(b)).add(&jitter(rng, noise));
            bone.end = palm.add(&reach(b + 1)).add(&jitter(rng, noise));
            bone.width = 18.0 - f as f64 - 0.5 * b as f64 + noise.sample(rng) * 0.05;
        }
    }
    derive_hand_features(&hand)
}

/// Motion frames of one repetition. Frame 0 has no velocity reading (NaN).
fn motion_frames(cfg: &SynthConfig, code: usize, count: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let noise = gaussian(cfg.leap_noise);
    let freq = 1.0 + (code % 3) as f64;
    let phases = count.div_ceil(3).max(1);
    let phase = std::f64::consts::TAU * (code / 3) as f64 / phases as f64;
    let phase_jitter = 0.03 * noise.sample(rng);
    let amp = PALM_AMPLITUDE_MM * (1.0 + 0.01 * noise.sample(rng));
    let duration = (FRAMES_PER_REPETITION as f64) * FRAME_INTERVAL_MS as f64 / 1000.0;
    let omega = std::f64::consts::TAU * freq / duration;

    let mut frames = Array2::zeros((FRAMES_PER_REPETITION, FRAME_LEN));
    for t in 0..FRAMES_PER_REPETITION {
        let secs = t as f64 * FRAME_INTERVAL_MS as f64 / 1000.0;
        let theta = omega * secs + phase + phase_jitter;
        let right_palm = Vec3::new(80.0 + amp * theta.sin(), 200.0 + amp * theta.cos(), 10.0);
        let right_vel = Vec3::new(amp * omega * theta.cos(), -amp * omega * theta.sin(), 0.0);
        let right = hand_at(right_palm, right_vel, 1.0, rng, &noise);
        let left = hand_at(Vec3::new(-120.0, 180.0, 20.0), Vec3::ZERO, -1.0, rng, &noise);
        let mut v = flatten_frame(&left, &right).into_inner();
        if t == 0 {
            v[10..13].fill(f64::NAN);
        }
        frames.row_mut(t).assign(&ndarray::Array1::from(v));
    }
    frames
}

struct Rect {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

fn code_rect(code: usize, count: usize, side: usize) -> Rect {
    let cols = (count as f64).sqrt().ceil() as usize;
    let rows = count.div_ceil(cols);
    let cell_h = side as f64 / rows as f64;
    let cell_w = side as f64 / cols as f64;
    let (r, c) = (code / cols, code % cols);
    let height = ((cell_h * 0.7).round() as usize).max(1);
    let width = ((cell_w * 0.7).round() as usize).max(1);
    Rect {
        top: (r as f64 * cell_h + (cell_h - height as f64) / 2.0).round() as usize,
        left: (c as f64 * cell_w + (cell_w - width as f64) / 2.0).round() as usize,
        height,
        width,
    }
}

fn frame_image(cfg: &SynthConfig, rect: &Rect, shift: (i64, i64), rng: &mut ChaCha8Rng) -> RgbImage {
    let noise = gaussian(cfg.image_noise);
    let side = cfg.image_side as i64;
    let mut img = RgbImage::new(cfg.image_side as u32, cfg.image_side as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (yy, xx) = (y as i64 - shift.0, x as i64 - shift.1);
        let inside = yy >= rect.top as i64
            && yy < (rect.top + rect.height) as i64
            && xx >= rect.left as i64
            && xx < (rect.left + rect.width) as i64
            && yy < side
            && xx < side;
        let base = if inside { 230.0 } else { 60.0 };
        let mut rgb = [0u8; 3];
        for ch in rgb.iter_mut() {
            *ch = (base + noise.sample(rng)).round().clamp(0.0, 255.0) as u8;
        }
        *px = Rgb(rgb);
    }
    img
}

fn timestamp(rep_slot: usize, frame: usize) -> String {
    let ms = BASE_EPOCH_MS + rep_slot as i64 * 60_000 + frame as i64 * FRAME_INTERVAL_MS;
    let t = DateTime::from_timestamp_millis(ms).expect("in range");
    t.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes a corpus under `root` and returns the samples a loader with the
/// same image side and representative frame will reproduce.
pub fn generate_synthetic(root: &Path, cfg: &SynthConfig) -> Result<(LabelTable, Vec<GestureSample>)> {
    if cfg.classes < 2 {
        return Err(Error::InvalidConfig {
            key: "classes".into(),
            reason: "at least 2 classes are required".into(),
        });
    }
    if cfg.repetitions < 3 {
        return Err(Error::InvalidConfig {
            key: "repetitions".into(),
            reason: "at least 3 repetitions are required".into(),
        });
    }
    if cfg.image_side == 0 || cfg.representative_frame >= FRAMES_PER_REPETITION {
        return Err(Error::InvalidConfig {
            key: "image_side".into(),
            reason: "image side must be positive and the representative frame below 73".into(),
        });
    }
    if cfg.mode == SynthMode::SplitSignal {
        factor_classes(cfg.classes)?;
    }

    let names: Vec<String> = (0..cfg.classes).map(sign_name).collect();
    let labels = LabelTable::from(names.clone());
    fs::create_dir_all(root).map_err(write_err(root))?;
    let manifest = Manifest {
        signs: names.clone(),
        repetitions: cfg.repetitions,
        frames_per_repetition: FRAMES_PER_REPETITION,
    };
    let manifest_path = root.join(MANIFEST_FILE);
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?).map_err(write_err(&manifest_path))?;

    let mut samples = Vec::with_capacity(cfg.classes * cfg.repetitions);
    for (class, name) in names.iter().enumerate() {
        let codes = codes(cfg, class)?;
        let rect = code_rect(codes.visual, codes.visual_count, cfg.image_side);
        for rep in 0..cfg.repetitions {
            let slot = class * cfg.repetitions + rep;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(slot as u64);

            let dir = root.join(name).join(repetition_dir_name(rep));
            fs::create_dir_all(&dir).map_err(write_err(&dir))?;

            let frames = motion_frames(cfg, codes.motion, codes.motion_count, &mut rng);
            let rows: Vec<FrameRow> = frames
                .rows()
                .into_iter()
                .enumerate()
                .map(|(t, r)| FrameRow {
                    index: t as u32,
                    vector: crate::features::FrameVector::new(r.to_vec()).expect("frame width"),
                    timestamp: timestamp(slot, t),
                })
                .collect();
            let csv_path = dir.join(FRAMES_FILE);
            let file = fs::File::create(&csv_path).map_err(write_err(&csv_path))?;
            write_frames_csv(std::io::BufWriter::new(file), &rows).map_err(|e| Error::csv(&csv_path, e))?;

            let shift = if cfg.image_noise > 0.0 {
                (rng.random_range(-1..=1), rng.random_range(-1..=1))
            } else {
                (0, 0)
            };
            let mut representative = None;
            for t in 0..FRAMES_PER_REPETITION {
                let keep = t == cfg.representative_frame;
                if !cfg.all_frame_images && !keep {
                    continue;
                }
                let img = frame_image(cfg, &rect, shift, &mut rng);
                let path = dir.join(frame_image_name(t));
                img.save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|e| Error::Image {
                        path: path.clone(),
                        source: e,
                    })?;
                if keep {
                    representative = Some(img);
                }
            }
            let image = preprocess_image(&representative.expect("representative frame"), cfg.image_side)?;
            samples.push(GestureSample {
                label: name.clone(),
                class_index: class,
                frames,
                image,
                repetition_id: rep,
            });
        }
    }
    Ok((labels, samples))
}
