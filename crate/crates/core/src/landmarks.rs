//! Hand-landmark streams in the 21-point MediaPipe layout.
//!
//! Coordinates are normalized image coordinates: `x` grows to the right,
//! `y` grows downward and `z` is relative depth, more negative meaning
//! closer to the camera. Streams without depth carry `[x, y]` pairs on the
//! wire; `z` is then stored as `0.0` and [`HandLandmarkFrame::has_depth`]
//! is false.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of landmarks per hand.
pub const LANDMARK_COUNT: usize = 21;

pub const WRIST: usize = 0;
pub const THUMB_CMC: usize = 1;
pub const THUMB_MCP: usize = 2;
pub const THUMB_IP: usize = 3;
pub const THUMB_TIP: usize = 4;
pub const INDEX_MCP: usize = 5;
pub const INDEX_PIP: usize = 6;
pub const INDEX_DIP: usize = 7;
pub const INDEX_TIP: usize = 8;
pub const MIDDLE_MCP: usize = 9;
pub const MIDDLE_PIP: usize = 10;
pub const MIDDLE_DIP: usize = 11;
pub const MIDDLE_TIP: usize = 12;
pub const RING_MCP: usize = 13;
pub const RING_PIP: usize = 14;
pub const RING_DIP: usize = 15;
pub const RING_TIP: usize = 16;
pub const PINKY_MCP: usize = 17;
pub const PINKY_PIP: usize = 18;
pub const PINKY_DIP: usize = 19;
pub const PINKY_TIP: usize = 20;

/// Canonical landmark names, in index order.
pub const LANDMARK_NAMES: [&str; LANDMARK_COUNT] = [
    "WRIST",
    "THUMB_CMC",
    "THUMB_MCP",
    "THUMB_IP",
    "THUMB_TIP",
    "INDEX_FINGER_MCP",
    "INDEX_FINGER_PIP",
    "INDEX_FINGER_DIP",
    "INDEX_FINGER_TIP",
    "MIDDLE_FINGER_MCP",
    "MIDDLE_FINGER_PIP",
    "MIDDLE_FINGER_DIP",
    "MIDDLE_FINGER_TIP",
    "RING_FINGER_MCP",
    "RING_FINGER_PIP",
    "RING_FINGER_DIP",
    "RING_FINGER_TIP",
    "PINKY_MCP",
    "PINKY_PIP",
    "PINKY_DIP",
    "PINKY_TIP",
];

/// Coordinates outside this range are treated as corrupt.
pub const COORDINATE_RANGE: (f64, f64) = (-0.5, 1.5);

#[derive(Debug, Error, PartialEq)]
pub enum LandmarkError {
    #[error("malformed landmark stream: {0}")]
    MalformedInput(String),
    #[error("frame {frame}: expected 21 landmarks, found {count}")]
    BadLandmarkCount { frame: usize, count: usize },
    #[error("frame {frame}: timestamp {timestamp} does not follow the previous frame")]
    NonMonotonicTimestamps { frame: usize, timestamp: f64 },
    #[error("frame {frame}: negative timestamp {timestamp}")]
    NegativeTimestamp { frame: usize, timestamp: f64 },
    #[error("frame {frame}, landmark {landmark}: coordinate out of range or not finite")]
    CorruptCoordinate { frame: usize, landmark: usize },
    #[error("unknown landmark name `{0}`")]
    UnknownLandmarkName(String),
}

/// Looks up the index of a canonical landmark name.
///
/// Accepts the MediaPipe names (`INDEX_FINGER_TIP`) and the short form
/// without `_FINGER` (`INDEX_TIP`), case-insensitively.
pub fn landmark_index(name: &str) -> Result<usize, LandmarkError> {
    let upper = name.trim().to_ascii_uppercase();
    LANDMARK_NAMES
        .iter()
        .position(|n| *n == upper || n.replace("_FINGER", "") == upper)
        .ok_or_else(|| LandmarkError::UnknownLandmarkName(name.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Landmark {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    fn is_valid(&self) -> bool {
        let (lo, hi) = COORDINATE_RANGE;
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && (lo..=hi).contains(&self.x)
            && (lo..=hi).contains(&self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Handedness {
    Right,
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceView {
    FirstPerson,
    ThirdPerson,
}

/// The five digits, thumb first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Finger {
    Thumb,
    Index,
    Middle,
    Ring,
    Pinky,
}

impl Finger {
    pub const ALL: [Finger; 5] = [
        Finger::Thumb,
        Finger::Index,
        Finger::Middle,
        Finger::Ring,
        Finger::Pinky,
    ];

    /// Joints from base to tip: `[MCP, PIP, DIP, TIP]`, or
    /// `[CMC, MCP, IP, TIP]` for the thumb.
    pub const fn chain(self) -> [usize; 4] {
        match self {
            Finger::Thumb => [THUMB_CMC, THUMB_MCP, THUMB_IP, THUMB_TIP],
            Finger::Index => [INDEX_MCP, INDEX_PIP, INDEX_DIP, INDEX_TIP],
            Finger::Middle => [MIDDLE_MCP, MIDDLE_PIP, MIDDLE_DIP, MIDDLE_TIP],
            Finger::Ring => [RING_MCP, RING_PIP, RING_DIP, RING_TIP],
            Finger::Pinky => [PINKY_MCP, PINKY_PIP, PINKY_DIP, PINKY_TIP],
        }
    }

    pub const fn tip(self) -> usize {
        self.chain()[3]
    }

    pub const fn name(self) -> &'static str {
        match self {
            Finger::Thumb => "thumb",
            Finger::Index => "index",
            Finger::Middle => "middle",
            Finger::Ring => "ring",
            Finger::Pinky => "pinky",
        }
    }
}

impl fmt::Display for Finger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Finger {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Finger::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown finger `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandLandmarkFrame {
    pub timestamp: f64,
    pub handedness: Handedness,
    pub landmarks: [Landmark; LANDMARK_COUNT],
    /// False when the producer supplied image-plane coordinates only.
    pub has_depth: bool,
}

impl HandLandmarkFrame {
    pub fn new(timestamp: f64, handedness: Handedness, landmarks: [Landmark; LANDMARK_COUNT]) -> Self {
        Self {
            timestamp,
            handedness,
            landmarks,
            has_depth: true,
        }
    }

    pub fn landmark(&self, index: usize) -> Landmark {
        self.landmarks[index]
    }

    /// Validates and builds a frame from raw coordinate rows (`[x, y]` or
    /// `[x, y, z]`). `frame` is only used for error reporting.
    pub fn from_rows(
        frame: usize,
        timestamp: f64,
        handedness: Handedness,
        rows: &[Vec<f64>],
    ) -> Result<Self, LandmarkError> {
        if rows.len() != LANDMARK_COUNT {
            return Err(LandmarkError::BadLandmarkCount {
                frame,
                count: rows.len(),
            });
        }
        if !timestamp.is_finite() {
            return Err(LandmarkError::MalformedInput(format!(
                "frame {frame}: timestamp is not finite"
            )));
        }
        if timestamp < 0.0 {
            return Err(LandmarkError::NegativeTimestamp { frame, timestamp });
        }
        let width = rows[0].len();
        if !(width == 2 || width == 3) {
            return Err(LandmarkError::MalformedInput(format!(
                "frame {frame}: landmarks must have 2 or 3 coordinates, found {width}"
            )));
        }
        let mut landmarks = [Landmark::default(); LANDMARK_COUNT];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(LandmarkError::MalformedInput(format!(
                    "frame {frame}: mixed 2D and 3D landmarks"
                )));
            }
            let lm = Landmark::new(row[0], row[1], if width == 3 { row[2] } else { 0.0 });
            if !lm.is_valid() {
                return Err(LandmarkError::CorruptCoordinate { frame, landmark: i });
            }
            landmarks[i] = lm;
        }
        Ok(Self {
            timestamp,
            handedness,
            landmarks,
            has_depth: width == 3,
        })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.landmarks
            .iter()
            .map(|l| {
                if self.has_depth {
                    vec![l.x, l.y, l.z]
                } else {
                    vec![l.x, l.y]
                }
            })
            .collect()
    }

    /// Applies `f` to every landmark, keeping timestamp and handedness.
    pub fn map_landmarks(&self, f: impl Fn(Landmark) -> Landmark) -> Self {
        let mut out = self.clone();
        for lm in out.landmarks.iter_mut() {
            *lm = f(*lm);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkStream {
    pub source_view: SourceView,
    pub handedness: Handedness,
    pub frames: Vec<HandLandmarkFrame>,
}

#[derive(Serialize, Deserialize)]
struct WireStream {
    source_view: SourceView,
    handedness: Handedness,
    frames: Vec<WireFrame>,
}

#[derive(Serialize, Deserialize)]
struct WireFrame {
    t: f64,
    lm: Vec<Vec<f64>>,
}

impl LandmarkStream {
    pub fn new(
        source_view: SourceView,
        handedness: Handedness,
        frames: Vec<HandLandmarkFrame>,
    ) -> Result<Self, LandmarkError> {
        let stream = Self {
            source_view,
            handedness,
            frames,
        };
        stream.validate()?;
        Ok(stream)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_depth(&self) -> bool {
        self.frames.first().is_none_or(|f| f.has_depth)
    }

    fn validate(&self) -> Result<(), LandmarkError> {
        let mut depth = None;
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.timestamp < 0.0 {
                return Err(LandmarkError::NegativeTimestamp {
                    frame: i,
                    timestamp: frame.timestamp,
                });
            }
            if i > 0 && frame.timestamp <= self.frames[i - 1].timestamp {
                return Err(LandmarkError::NonMonotonicTimestamps {
                    frame: i,
                    timestamp: frame.timestamp,
                });
            }
            if *depth.get_or_insert(frame.has_depth) != frame.has_depth {
                return Err(LandmarkError::MalformedInput(
                    "stream mixes 2D and 3D frames".into(),
                ));
            }
        }
        Ok(())
    }

    /// Serializes to the JSON stream format accepted by [`parse_landmark_stream`].
    pub fn to_json(&self) -> String {
        let wire = WireStream {
            source_view: self.source_view,
            handedness: self.handedness,
            frames: self
                .frames
                .iter()
                .map(|f| WireFrame {
                    t: f.timestamp,
                    lm: f.to_rows(),
                })
                .collect(),
        };
        serde_json::to_string(&wire).expect("stream serialization cannot fail")
    }
}

/// Parses and validates a landmark stream document.
///
/// ```text
/// {"source_view":"third_person","handedness":"right",
///  "frames":[{"t":0.000,"lm":[[x,y,z], ... 21 entries]}, ...]}
/// ```
pub fn parse_landmark_stream(raw: &[u8]) -> Result<LandmarkStream, LandmarkError> {
    let wire: WireStream =
        serde_json::from_slice(raw).map_err(|e| LandmarkError::MalformedInput(e.to_string()))?;
    let frames = wire
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| HandLandmarkFrame::from_rows(i, f.t, wire.handedness, &f.lm))
        .collect::<Result<Vec<_>, _>>()?;
    LandmarkStream::new(wire.source_view, wire.handedness, frames)
}
