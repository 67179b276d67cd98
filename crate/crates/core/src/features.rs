//! Hand-skeleton records, derived geometric features and the flat frame layout.
//!
//! A two-hand frame flattens to [`FRAME_LEN`] values: a 180-value block per
//! hand (left first), then the left and right presence flags.
//!
//! Hand block:
//!
//! | offset | count | content                                                   |
//! |--------|-------|-----------------------------------------------------------|
//! | 0      | 7     | arm start xyz, arm end xyz, arm angle                     |
//! | 7      | 13    | palm position xyz, velocity xyz, normal xyz, pitch, roll, yaw, palm/normal angle |
//! | 20     | 160   | thumb..pinky x metacarpal..distal: start xyz, end xyz, width, angle |

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FINGERS: usize = 5;
pub const BONES_PER_FINGER: usize = 4;
pub const ARM_LEN: usize = 7;
pub const PALM_LEN: usize = 13;
pub const BONE_LEN: usize = 8;
pub const HAND_LEN: usize = ARM_LEN + PALM_LEN + FINGERS * BONES_PER_FINGER * BONE_LEN;
pub const FRAME_LEN: usize = 2 * HAND_LEN + 2;
pub const LEFT_PRESENT: usize = 2 * HAND_LEN;
pub const RIGHT_PRESENT: usize = 2 * HAND_LEN + 1;

pub const FINGER_NAMES: [&str; FINGERS] = ["thumb", "index", "middle", "ring", "pinky"];
pub const BONE_NAMES: [&str; BONES_PER_FINGER] = ["metacarpal", "proximal", "intermediate", "distal"];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(&self, other: &Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn scale(&self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn add(&self, other: &Vec3) -> Vec3 {
        Vec3::new(self.x + other.x, self.y + other.y, self.z + other.z)
    }

    fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    fn from_slice(s: &[f64]) -> Vec3 {
        Vec3::new(s[0], s[1], s[2])
    }
}

/// Euclidean length.
pub fn magnitude(v: &Vec3) -> f64 {
    (v.x * v.x + v.y * v.y + v.z * v.z).sqrt()
}

/// Angle in radians between two vectors taken from the sensor origin.
///
/// Returns 0 when either vector has zero length. The cosine ratio is clamped
/// to `[-1, 1]` so nearly parallel inputs never leave the `acos` domain.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    let na = magnitude(a);
    let nb = magnitude(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoneRecord {
    pub start: Vec3,
    pub end: Vec3,
    pub width: f64,
    pub angle: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PalmRecord {
    pub position: Vec3,
    pub velocity: Vec3,
    pub normal: Vec3,
    pub pitch: f64,
    pub roll: f64,
    pub yaw: f64,
    pub palm_normal_angle: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ArmRecord {
    pub start: Vec3,
    pub end: Vec3,
    pub angle: f64,
}

/// One hand at one time step. An absent hand is all zeros.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HandFrame {
    pub arm: ArmRecord,
    pub palm: PalmRecord,
    pub fingers: [[BoneRecord; BONES_PER_FINGER]; FINGERS],
    pub present: bool,
}

impl HandFrame {
    pub fn absent() -> Self {
        HandFrame::default()
    }

    pub fn bones(&self) -> impl Iterator<Item = &BoneRecord> {
        self.fingers.iter().flatten()
    }
}

/// Recomputes every derived angle of a hand; all measured fields are copied.
pub fn derive_hand_features(raw: &HandFrame) -> HandFrame {
    let mut hand = *raw;
    hand.arm.angle = angle_between(&hand.arm.start, &hand.arm.end);
    hand.palm.palm_normal_angle = angle_between(&hand.palm.position, &hand.palm.normal);
    for bone in hand.fingers.iter_mut().flatten() {
        bone.angle = angle_between(&bone.start, &bone.end);
    }
    hand
}

/// The canonical flat encoding of a two-hand frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameVector(Vec<f64>);

impl FrameVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != FRAME_LEN {
            return Err(Error::WrongLength {
                expected: FRAME_LEN,
                actual: values.len(),
            });
        }
        Ok(FrameVector(values))
    }

    pub fn zeros() -> Self {
        FrameVector(vec![0.0; FRAME_LEN])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FrameVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn write_hand(hand: &HandFrame, out: &mut Vec<f64>) {
    out.extend(hand.arm.start.to_array());
    out.extend(hand.arm.end.to_array());
    out.push(hand.arm.angle);

    let palm = &hand.palm;
    out.extend(palm.position.to_array());
    out.extend(palm.velocity.to_array());
    out.extend(palm.normal.to_array());
    out.extend([palm.pitch, palm.roll, palm.yaw, palm.palm_normal_angle]);

    for bone in hand.bones() {
        out.extend(bone.start.to_array());
        out.extend(bone.end.to_array());
        out.extend([bone.width, bone.angle]);
    }
}

fn read_hand(block: &[f64], present: bool) -> HandFrame {
    let mut hand = HandFrame {
        present,
        ..HandFrame::default()
    };
    hand.arm = ArmRecord {
        start: Vec3::from_slice(&block[0..3]),
        end: Vec3::from_slice(&block[3..6]),
        angle: block[6],
    };
    let p = &block[ARM_LEN..ARM_LEN + PALM_LEN];
    hand.palm = PalmRecord {
        position: Vec3::from_slice(&p[0..3]),
        velocity: Vec3::from_slice(&p[3..6]),
        normal: Vec3::from_slice(&p[6..9]),
        pitch: p[9],
        roll: p[10],
        yaw: p[11],
        palm_normal_angle: p[12],
    };
    let bones = block[ARM_LEN + PALM_LEN..].chunks_exact(BONE_LEN);
    for (bone, b) in hand.fingers.iter_mut().flatten().zip(bones) {
        *bone = BoneRecord {
            start: Vec3::from_slice(&b[0..3]),
            end: Vec3::from_slice(&b[3..6]),
            width: b[6],
            angle: b[7],
        };
    }
    hand
}

fn flag(present: bool) -> f64 {
    if present {
        1.0
    } else {
        0.0
    }
}

pub fn flatten_frame(left: &HandFrame, right: &HandFrame) -> FrameVector {
    let mut values = Vec::with_capacity(FRAME_LEN);
    write_hand(left, &mut values);
    write_hand(right, &mut values);
    values.push(flag(left.present));
    values.push(flag(right.present));
    debug_assert_eq!(values.len(), FRAME_LEN);
    FrameVector(values)
}

/// Inverse of [`flatten_frame`]. Presence flags are read as `value != 0`.
pub fn unflatten_frame(values: &[f64]) -> Result<(HandFrame, HandFrame)> {
    if values.len() != FRAME_LEN {
        return Err(Error::WrongLength {
            expected: FRAME_LEN,
            actual: values.len(),
        });
    }
    let left = read_hand(&values[..HAND_LEN], values[LEFT_PRESENT] != 0.0);
    let right = read_hand(&values[HAND_LEN..2 * HAND_LEN], values[RIGHT_PRESENT] != 0.0);
    Ok((left, right))
}

fn hand_column_names(side: &str, out: &mut Vec<String>) {
    let xyz = |prefix: String, out: &mut Vec<String>| {
        for axis in ["x", "y", "z"] {
            out.push(format!("{prefix}_{axis}"));
        }
    };
    xyz(format!("{side}_arm_start"), out);
    xyz(format!("{side}_arm_end"), out);
    out.push(format!("{side}_arm_angle"));
    xyz(format!("{side}_palm_position"), out);
    xyz(format!("{side}_palm_velocity"), out);
    xyz(format!("{side}_palm_normal"), out);
    for name in ["pitch", "roll", "yaw", "normal_angle"] {
        out.push(format!("{side}_palm_{name}"));
    }
    for finger in FINGER_NAMES {
        for bone in BONE_NAMES {
            let prefix = format!("{side}_{finger}_{bone}");
            xyz(format!("{prefix}_start"), out);
            xyz(format!("{prefix}_end"), out);
            out.push(format!("{prefix}_width"));
            out.push(format!("{prefix}_angle"));
        }
    }
}

/// Names of the 362 feature columns in canonical order.
pub fn feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(FRAME_LEN);
    hand_column_names("left", &mut names);
    hand_column_names("right", &mut names);
    names.push("left_present".into());
    names.push("right_present".into());
    names
}

/// One row of a frame CSV file.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRow {
    pub index: u32,
    pub vector: FrameVector,
    pub timestamp: String,
}

pub fn csv_header() -> Vec<String> {
    let mut header = vec!["frame".to_string()];
    header.extend(feature_names());
    header.push("timestamp".into());
    header
}

/// Writes a header plus one row per frame. Values use the shortest
/// representation that parses back to the same bits; NaN is written as `NaN`.
pub fn write_frames_csv<W: Write>(writer: W, rows: &[FrameRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(csv_header())?;
    let mut record = Vec::with_capacity(FRAME_LEN + 2);
    for row in rows {
        record.clear();
        record.push(row.index.to_string());
        record.extend(row.vector.values().iter().map(|v| v.to_string()));
        record.push(row.timestamp.clone());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a frame CSV. `origin` is only used for error messages.
pub fn read_frames_csv<R: Read>(reader: R, origin: &Path) -> Result<Vec<FrameRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(|e| Error::csv(origin, e))?;
    if header.len() != FRAME_LEN + 2 {
        return Err(Error::csv(
            origin,
            format!("header has {} columns, expected {}", header.len(), FRAME_LEN + 2),
        ));
    }
    let mut rows = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(|e| Error::csv(origin, e))?;
        if record.len() != FRAME_LEN + 2 {
            return Err(Error::csv(
                origin,
                format!("row {} has {} columns", line + 1, record.len()),
            ));
        }
        let index = record[0]
            .trim()
            .parse::<u32>()
            .map_err(|e| Error::csv(origin, format!("row {}: frame index: {e}", line + 1)))?;
        let values = (1..=FRAME_LEN)
            .map(|i| {
                record[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::csv(origin, format!("row {}, column {}: {e}", line + 1, i)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(FrameRow {
            index,
            vector: FrameVector(values),
            timestamp: record[FRAME_LEN + 1].to_string(),
        });
    }
    Ok(rows)
}
