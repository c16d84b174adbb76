//! The six hand-pose rules and the 19-entry per-frame pose vector.
//!
//! Every paired rule reduces the frame to a scalar measurement (bending
//! angle or distance) and applies a three-way decision: values at or below
//! the low threshold take the positive state, values at or above the high
//! threshold the negative state, and anything strictly between is unsure.
//! Degenerate geometry (coincident joints) always yields unsure.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_deg, point_polyline_distance, DistanceMode, Vec3, DEGENERATE_EPS};
use crate::landmarks::{
    Finger, Handedness, HandLandmarkFrame, INDEX_MCP, MIDDLE_MCP, PINKY_MCP, THUMB_MCP,
    THUMB_TIP, WRIST,
};

/// Three-way verdict of a paired rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThreeWay {
    Positive,
    Unsure,
    Negative,
}

impl ThreeWay {
    pub const fn value(self) -> i8 {
        match self {
            ThreeWay::Positive => 1,
            ThreeWay::Unsure => 0,
            ThreeWay::Negative => -1,
        }
    }

    /// `≤ low` is positive, `≥ high` negative, otherwise unsure.
    pub fn decide(measure: Option<f64>, pair: ThresholdPair) -> ThreeWay {
        match measure {
            Some(v) if v <= pair.low => ThreeWay::Positive,
            Some(v) if v >= pair.high => ThreeWay::Negative,
            _ => ThreeWay::Unsure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThumbDirection {
    Up,
    Down,
    Unsure,
}

impl ThumbDirection {
    pub const fn value(self) -> i8 {
        match self {
            ThumbDirection::Up => 1,
            ThumbDirection::Down => -1,
            ThumbDirection::Unsure => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PalmOrientation {
    Left,
    Right,
    Down,
    Up,
    Inward,
    Outward,
    Unknown,
}

impl PalmOrientation {
    /// One-hot row order of the pose vector.
    pub const ONE_HOT_ORDER: [PalmOrientation; 6] = [
        PalmOrientation::Left,
        PalmOrientation::Right,
        PalmOrientation::Down,
        PalmOrientation::Up,
        PalmOrientation::Inward,
        PalmOrientation::Outward,
    ];

    /// Reference directions, in the order they are compared. Only the first
    /// strictly smaller angle replaces the running minimum.
    const REFERENCES: [(PalmOrientation, Vec3); 6] = [
        (PalmOrientation::Right, Vec3::new(1.0, 0.0, 0.0)),
        (PalmOrientation::Left, Vec3::new(-1.0, 0.0, 0.0)),
        (PalmOrientation::Down, Vec3::new(0.0, 1.0, 0.0)),
        (PalmOrientation::Up, Vec3::new(0.0, -1.0, 0.0)),
        (PalmOrientation::Outward, Vec3::new(0.0, 0.0, -1.0)),
        (PalmOrientation::Inward, Vec3::new(0.0, 0.0, 1.0)),
    ];

    pub fn one_hot_index(self) -> Option<usize> {
        Self::ONE_HOT_ORDER.iter().position(|p| *p == self)
    }
}

/// Adjacent non-thumb finger pairs used by the proximity rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FingerPair {
    IndexMiddle,
    MiddleRing,
    RingPinky,
}

impl FingerPair {
    pub const ALL: [FingerPair; 3] = [
        FingerPair::IndexMiddle,
        FingerPair::MiddleRing,
        FingerPair::RingPinky,
    ];

    pub const fn fingers(self) -> (Finger, Finger) {
        match self {
            FingerPair::IndexMiddle => (Finger::Index, Finger::Middle),
            FingerPair::MiddleRing => (Finger::Middle, Finger::Ring),
            FingerPair::RingPinky => (Finger::Ring, Finger::Pinky),
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            FingerPair::IndexMiddle => "index_middle",
            FingerPair::MiddleRing => "middle_ring",
            FingerPair::RingPinky => "ring_pinky",
        }
    }
}

/// A `(low, high)` decision band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPair {
    pub low: f64,
    pub high: f64,
}

impl ThresholdPair {
    pub const fn new(low: f64, high: f64) -> Self {
        Self { low, high }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ThresholdError {
    #[error("threshold `{0}` must be positive and finite")]
    NotPositive(&'static str),
    #[error("threshold pair `{0}` must satisfy low < high")]
    Unordered(&'static str),
}

/// All tunable parameters of the rules. Angles are in degrees, distances
/// in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlatThresholds", into = "FlatThresholds")]
pub struct RuleThresholds {
    pub flexion_thumb: ThresholdPair,
    pub flexion_finger: ThresholdPair,
    pub proximity: ThresholdPair,
    pub contact: ThresholdPair,
    pub thumb_dir_angle: f64,
    pub palm_angle: f64,
    pub distance_mode: DistanceMode,
}

impl Default for RuleThresholds {
    fn default() -> Self {
        Self {
            flexion_thumb: ThresholdPair::new(16.0, 38.0),
            flexion_finger: ThresholdPair::new(57.0, 74.0),
            proximity: ThresholdPair::new(0.024, 0.029),
            contact: ThresholdPair::new(0.046, 0.055),
            thumb_dir_angle: 40.0,
            palm_angle: 41.0,
            distance_mode: DistanceMode::Xy,
        }
    }
}

impl RuleThresholds {
    pub fn validate(&self) -> Result<(), ThresholdError> {
        let pairs = [
            ("flexion_thumb", self.flexion_thumb),
            ("flexion_finger", self.flexion_finger),
            ("proximity", self.proximity),
            ("contact", self.contact),
        ];
        for (name, p) in pairs {
            if !(p.low.is_finite() && p.low > 0.0 && p.high.is_finite()) {
                return Err(ThresholdError::NotPositive(name));
            }
            if p.low >= p.high {
                return Err(ThresholdError::Unordered(name));
            }
        }
        for (name, v) in [
            ("thumb_dir_angle", self.thumb_dir_angle),
            ("palm_angle", self.palm_angle),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ThresholdError::NotPositive(name));
            }
        }
        Ok(())
    }

    pub fn flexion_pair(&self, finger: Finger) -> ThresholdPair {
        if finger == Finger::Thumb {
            self.flexion_thumb
        } else {
            self.flexion_finger
        }
    }
}

/// On-disk form: one flat JSON object.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatThresholds {
    flexion_thumb_straight: f64,
    flexion_thumb_bent: f64,
    flexion_finger_straight: f64,
    flexion_finger_bent: f64,
    proximity_together: f64,
    proximity_separated: f64,
    contact: f64,
    not_contact: f64,
    thumb_dir_angle: f64,
    palm_angle: f64,
    #[serde(default)]
    distance_mode: DistanceMode,
}

impl TryFrom<FlatThresholds> for RuleThresholds {
    type Error = ThresholdError;

    fn try_from(f: FlatThresholds) -> Result<Self, Self::Error> {
        let th = RuleThresholds {
            flexion_thumb: ThresholdPair::new(f.flexion_thumb_straight, f.flexion_thumb_bent),
            flexion_finger: ThresholdPair::new(f.flexion_finger_straight, f.flexion_finger_bent),
            proximity: ThresholdPair::new(f.proximity_together, f.proximity_separated),
            contact: ThresholdPair::new(f.contact, f.not_contact),
            thumb_dir_angle: f.thumb_dir_angle,
            palm_angle: f.palm_angle,
            distance_mode: f.distance_mode,
        };
        th.validate()?;
        Ok(th)
    }
}

impl From<RuleThresholds> for FlatThresholds {
    fn from(t: RuleThresholds) -> Self {
        FlatThresholds {
            flexion_thumb_straight: t.flexion_thumb.low,
            flexion_thumb_bent: t.flexion_thumb.high,
            flexion_finger_straight: t.flexion_finger.low,
            flexion_finger_bent: t.flexion_finger.high,
            proximity_together: t.proximity.low,
            proximity_separated: t.proximity.high,
            contact: t.contact.low,
            not_contact: t.contact.high,
            thumb_dir_angle: t.thumb_dir_angle,
            palm_angle: t.palm_angle,
            distance_mode: t.distance_mode,
        }
    }
}

fn point(frame: &HandLandmarkFrame, index: usize) -> Vec3 {
    frame.landmark(index).into()
}

fn warn_degenerate(rule: &str, frame: &HandLandmarkFrame) {
    log::warn!(
        "degenerate geometry in {rule} at t={:.3}; reporting unsure",
        frame.timestamp
    );
}

/// Total bending angle of a finger in degrees, `None` on zero-length bones.
///
/// Thumb: the IP joint angle. Other fingers: PIP plus DIP joint angles.
pub fn flexion_curl(frame: &HandLandmarkFrame, finger: Finger) -> Option<f64> {
    let [a, b, c, d] = finger.chain().map(|i| point(frame, i));
    if finger == Finger::Thumb {
        angle_deg(c - b, d - c)
    } else {
        Some(angle_deg(b - a, c - b)? + angle_deg(c - b, d - c)?)
    }
}

pub fn flexion(frame: &HandLandmarkFrame, finger: Finger, th: &RuleThresholds) -> ThreeWay {
    let curl = flexion_curl(frame, finger);
    if curl.is_none() {
        warn_degenerate("flexion", frame);
    }
    ThreeWay::decide(curl, th.flexion_pair(finger))
}

/// Mean over the PIP, DIP and TIP levels of the smaller of the two
/// joint-to-other-finger polyline distances.
pub fn proximity_distance(frame: &HandLandmarkFrame, pair: FingerPair, mode: DistanceMode) -> f64 {
    let (f1, f2) = pair.fingers();
    let upper = |f: Finger| -> [Vec3; 3] {
        let c = f.chain();
        [c[1], c[2], c[3]].map(|i| mode.project(point(frame, i)))
    };
    let (p1, p2) = (upper(f1), upper(f2));
    let total: f64 = (0..3)
        .map(|level| {
            point_polyline_distance(p1[level], &p2).min(point_polyline_distance(p2[level], &p1))
        })
        .sum();
    total / 3.0
}

pub fn proximity(frame: &HandLandmarkFrame, pair: FingerPair, th: &RuleThresholds) -> ThreeWay {
    let d = proximity_distance(frame, pair, th.distance_mode);
    ThreeWay::decide(d.is_finite().then_some(d), th.proximity)
}

/// Distance between the thumb tip and another fingertip.
pub fn contact_distance(frame: &HandLandmarkFrame, finger: Finger, mode: DistanceMode) -> f64 {
    mode.distance(point(frame, THUMB_TIP), point(frame, finger.tip()))
}

pub fn contact(frame: &HandLandmarkFrame, finger: Finger, th: &RuleThresholds) -> ThreeWay {
    debug_assert_ne!(finger, Finger::Thumb, "contact is measured against the thumb");
    let d = contact_distance(frame, finger, th.distance_mode);
    ThreeWay::decide(d.is_finite().then_some(d), th.contact)
}

/// Closest vertical reference for the thumb's MCP→TIP vector and its angle.
/// Down is compared first; a later reference must be strictly closer.
pub fn thumb_direction_measure(frame: &HandLandmarkFrame) -> Option<(ThumbDirection, f64)> {
    let v = point(frame, THUMB_TIP) - point(frame, THUMB_MCP);
    let refs = [
        (ThumbDirection::Down, Vec3::new(0.0, 1.0, 0.0)),
        (ThumbDirection::Up, Vec3::new(0.0, -1.0, 0.0)),
    ];
    let mut best: Option<(ThumbDirection, f64)> = None;
    for (dir, r) in refs {
        let a = angle_deg(v, r)?;
        if best.is_none_or(|(_, m)| a < m) {
            best = Some((dir, a));
        }
    }
    best
}

pub fn thumb_pointing(
    frame: &HandLandmarkFrame,
    thumb_flexion: ThreeWay,
    th: &RuleThresholds,
) -> ThumbDirection {
    if thumb_flexion != ThreeWay::Positive {
        return ThumbDirection::Unsure;
    }
    match thumb_direction_measure(frame) {
        Some((dir, angle)) if angle <= th.thumb_dir_angle => dir,
        Some(_) => ThumbDirection::Unsure,
        None => {
            warn_degenerate("thumb direction", frame);
            ThumbDirection::Unsure
        }
    }
}

/// Palm normal: `(middleMCP − wrist) × (indexMCP − pinkyMCP)` for a right
/// hand, the reversed product for a left hand.
pub fn palm_normal(frame: &HandLandmarkFrame) -> Vec3 {
    let across = point(frame, INDEX_MCP) - point(frame, PINKY_MCP);
    let along = point(frame, MIDDLE_MCP) - point(frame, WRIST);
    match frame.handedness {
        Handedness::Right => along.cross(across),
        Handedness::Left => across.cross(along),
    }
}

/// Closest of the six references to the palm normal, with its angle.
/// `None` when the normal is degenerate.
pub fn palm_orientation_measure(frame: &HandLandmarkFrame) -> Option<(PalmOrientation, f64)> {
    let n = palm_normal(frame);
    if n.norm() < DEGENERATE_EPS {
        return None;
    }
    let mut best: Option<(PalmOrientation, f64)> = None;
    for (orientation, r) in PalmOrientation::REFERENCES {
        let a = angle_deg(n, r)?;
        if best.is_none_or(|(_, m)| a < m) {
            best = Some((orientation, a));
        }
    }
    best
}

pub fn palm_orientation(frame: &HandLandmarkFrame, th: &RuleThresholds) -> PalmOrientation {
    let Some((orientation, angle)) = palm_orientation_measure(frame) else {
        warn_degenerate("palm orientation", frame);
        return PalmOrientation::Unknown;
    };
    if angle > th.palm_angle {
        return PalmOrientation::Unknown;
    }
    // Without depth the normal always lies on the z axis.
    if !frame.has_depth
        && matches!(orientation, PalmOrientation::Inward | PalmOrientation::Outward)
    {
        return PalmOrientation::Unknown;
    }
    orientation
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandCenter {
    pub x: f64,
    pub y: f64,
    /// Present only for frames with depth.
    pub z: Option<f64>,
    pub hand_width: f64,
}

/// Component-wise mean of all 21 landmarks. The width is the
/// indexMCP–pinkyMCP distance of this frame.
pub fn hand_center(frame: &HandLandmarkFrame) -> HandCenter {
    let n = frame.landmarks.len() as f64;
    let (sx, sy, sz) = frame
        .landmarks
        .iter()
        .fold((0.0, 0.0, 0.0), |(x, y, z), l| (x + l.x, y + l.y, z + l.z));
    HandCenter {
        x: sx / n,
        y: sy / n,
        z: frame.has_depth.then_some(sz / n),
        hand_width: hand_width(frame, DistanceMode::Xy),
    }
}

pub fn hand_width(frame: &HandLandmarkFrame, mode: DistanceMode) -> f64 {
    mode.distance(point(frame, INDEX_MCP), point(frame, PINKY_MCP))
}

/// Row labels of the 19-entry pose vector, in row order.
pub const POSE_ROW_LABELS: [&str; 19] = [
    "flexion_thumb",
    "flexion_index",
    "flexion_middle",
    "flexion_ring",
    "flexion_pinky",
    "proximity_index_middle",
    "proximity_middle_ring",
    "proximity_ring_pinky",
    "contact_thumb_index",
    "contact_thumb_middle",
    "contact_thumb_ring",
    "contact_thumb_pinky",
    "thumb_direction",
    "palm_left",
    "palm_right",
    "palm_down",
    "palm_up",
    "palm_inward",
    "palm_outward",
];

/// Rows 1–13 hold three-way values; rows 14–19 one-hot palm orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FramePoseVector(pub [i8; 19]);

impl FramePoseVector {
    pub fn is_valid(&self) -> bool {
        let (tri, palm) = self.0.split_at(13);
        tri.iter().all(|v| (-1..=1).contains(v))
            && palm.iter().all(|v| *v == 0 || *v == 1)
            && palm.iter().filter(|v| **v == 1).count() <= 1
    }

    pub fn palm(&self) -> PalmOrientation {
        self.0[13..]
            .iter()
            .position(|v| *v == 1)
            .map_or(PalmOrientation::Unknown, |i| PalmOrientation::ONE_HOT_ORDER[i])
    }
}

pub fn encode_pose_vector(frame: &HandLandmarkFrame, th: &RuleThresholds) -> FramePoseVector {
    let mut rows = [0i8; 19];
    let mut thumb = ThreeWay::Unsure;
    for (i, finger) in Finger::ALL.into_iter().enumerate() {
        let verdict = flexion(frame, finger, th);
        if finger == Finger::Thumb {
            thumb = verdict;
        }
        rows[i] = verdict.value();
    }
    for (i, pair) in FingerPair::ALL.into_iter().enumerate() {
        rows[5 + i] = proximity(frame, pair, th).value();
    }
    for (i, finger) in Finger::ALL[1..].iter().enumerate() {
        rows[8 + i] = contact(frame, *finger, th).value();
    }
    rows[12] = thumb_pointing(frame, thumb, th).value();
    if let Some(i) = palm_orientation(frame, th).one_hot_index() {
        rows[13 + i] = 1;
    }
    FramePoseVector(rows)
}
