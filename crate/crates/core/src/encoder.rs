//! Gesture segmentation, 0.2 s sampling and the two-channel gesture state
//! matrix.
//!
//! Channel 1 stacks the per-frame pose vectors (19 rows). Channel 2 holds the
//! hand center per sample with the vertical axis flipped so that larger means
//! higher (`1 - y`), plus a depth row when the stream has depth.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmarks::{Handedness, HandLandmarkFrame, LandmarkStream};
use crate::rules::{encode_pose_vector, hand_center, hand_width, FramePoseVector, RuleThresholds, POSE_ROW_LABELS};

/// Seconds between matrix columns.
pub const SAMPLE_INTERVAL: f64 = 0.2;

/// Slack for floating-point timestamps (well below millisecond precision).
const TIME_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EncodeError {
    #[error("left-hand streams are not supported; only right-hand gestures are encoded")]
    LeftHandUnsupported,
    #[error("landmark stream has no frames")]
    EmptyStream,
    #[error("invalid segmentation config: {0}")]
    BadConfig(String),
    #[error("malformed matrix text: {0}")]
    MalformedMatrix(String),
}

/// Chest-level trigger parameters. `chest_line` is a normalized image `y`
/// (y grows downward), so a hand is raised when its center `y ≤ chest_line`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub chest_line: f64,
    /// Consecutive raised frames needed to open a window.
    pub trigger_frames: usize,
    /// Seconds the hand must stay lowered to close a window.
    pub end_hold: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            chest_line: 0.55,
            trigger_frames: 2,
            end_hold: 0.6,
        }
    }
}

impl SegmentationConfig {
    fn validate(&self) -> Result<(), EncodeError> {
        if self.trigger_frames == 0 {
            return Err(EncodeError::BadConfig("trigger_frames must be ≥ 1".into()));
        }
        if !(self.end_hold.is_finite() && self.end_hold >= 0.0) || !self.chest_line.is_finite() {
            return Err(EncodeError::BadConfig("end_hold and chest_line must be finite, end_hold ≥ 0".into()));
        }
        Ok(())
    }

    pub fn is_raised(&self, frame: &HandLandmarkFrame) -> bool {
        hand_center(frame).y <= self.chest_line
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GestureWindow<'a> {
    pub start_time: f64,
    pub end_time: f64,
    pub frames: &'a [HandLandmarkFrame],
}

impl GestureWindow<'_> {
    pub fn duration(&self) -> f64 {
        self.end_time - self.start_time
    }
}

/// Finds gesture windows: a window opens at the first frame of a run of
/// `trigger_frames` raised frames and closes at the last raised frame once the
/// hand has stayed lowered for `end_hold` seconds (or the stream ends).
/// Zero-length windows are dropped.
pub fn detect_gesture_windows<'a>(
    stream: &'a LandmarkStream,
    cfg: &SegmentationConfig,
) -> Result<Vec<GestureWindow<'a>>, EncodeError> {
    cfg.validate()?;
    if stream.handedness == Handedness::Left
        || stream.frames.iter().any(|f| f.handedness == Handedness::Left)
    {
        return Err(EncodeError::LeftHandUnsupported);
    }
    if stream.is_empty() {
        return Err(EncodeError::EmptyStream);
    }

    enum State {
        Idle { run_start: Option<usize> },
        Active { start: usize, last_raised: usize, lowered_since: Option<f64> },
    }

    let frames = &stream.frames;
    let mut ranges = Vec::new();
    let mut state = State::Idle { run_start: None };
    for (k, frame) in frames.iter().enumerate() {
        let raised = cfg.is_raised(frame);
        state = match state {
            State::Idle { run_start } => match (raised, run_start) {
                (false, _) => State::Idle { run_start: None },
                (true, run) => {
                    let start = run.unwrap_or(k);
                    if k + 1 - start >= cfg.trigger_frames {
                        State::Active { start, last_raised: k, lowered_since: None }
                    } else {
                        State::Idle { run_start: Some(start) }
                    }
                }
            },
            State::Active { start, last_raised, lowered_since } => {
                if raised {
                    State::Active { start, last_raised: k, lowered_since: None }
                } else {
                    let since = lowered_since.unwrap_or(frame.timestamp);
                    if frame.timestamp - since + TIME_EPS >= cfg.end_hold {
                        ranges.push((start, last_raised));
                        State::Idle { run_start: None }
                    } else {
                        State::Active { start, last_raised, lowered_since: Some(since) }
                    }
                }
            }
        };
    }
    if let State::Active { start, last_raised, .. } = state {
        ranges.push((start, last_raised));
    }

    Ok(ranges
        .into_iter()
        .filter(|(s, e)| frames[*e].timestamp > frames[*s].timestamp)
        .map(|(s, e)| GestureWindow {
            start_time: frames[s].timestamp,
            end_time: frames[e].timestamp,
            frames: &frames[s..=e],
        })
        .collect())
}

/// Number of columns for a window of the given duration.
pub fn sample_count(duration: f64) -> usize {
    ((duration.max(0.0) + TIME_EPS) / SAMPLE_INTERVAL).floor() as usize + 1
}

/// Picks the frame nearest to each `start + 0.2·k`; ties (within a
/// microsecond) go to the earlier frame.
pub fn sample_window(window: &GestureWindow<'_>) -> Vec<HandLandmarkFrame> {
    let frames = window.frames;
    if frames.is_empty() {
        return Vec::new();
    }
    (0..sample_count(window.duration()))
        .map(|k| {
            let target = window.start_time + SAMPLE_INTERVAL * k as f64;
            let after = frames.partition_point(|f| f.timestamp < target);
            let pick = match (after.checked_sub(1), frames.get(after)) {
                (None, _) => after,
                (Some(before), None) => before,
                (Some(before), Some(next)) => {
                    if next.timestamp - target + TIME_EPS < target - frames[before].timestamp {
                        after
                    } else {
                        before
                    }
                }
            };
            frames[pick].clone()
        })
        .collect()
}

/// Two-channel gesture state matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureStateMatrix {
    pub sample_interval: f64,
    pub hand_width: f64,
    /// 19 rows × T columns of pose states.
    pub channel1: Vec<Vec<i8>>,
    /// 2 or 3 rows × T columns: horizontal, vertical (up is larger), depth.
    pub channel2: Vec<Vec<f64>>,
}

const MOVEMENT_ROW_LABELS: [&str; 3] = ["horizontal", "vertical", "depth"];

impl GestureStateMatrix {
    pub fn columns(&self) -> usize {
        self.channel1.first().map_or(0, Vec::len)
    }

    pub fn pose_column(&self, j: usize) -> FramePoseVector {
        let mut v = [0i8; 19];
        for (r, row) in self.channel1.iter().enumerate() {
            v[r] = row[j];
        }
        FramePoseVector(v)
    }

    pub fn validate(&self) -> Result<(), String> {
        let t = self.columns();
        if t == 0 {
            return Err("matrix has no columns".into());
        }
        if self.channel1.len() != 19 {
            return Err(format!("channel 1 has {} rows, expected 19", self.channel1.len()));
        }
        if !(2..=3).contains(&self.channel2.len()) {
            return Err(format!("channel 2 has {} rows, expected 2 or 3", self.channel2.len()));
        }
        if self.channel1.iter().any(|r| r.len() != t)
            || self.channel2.iter().any(|r| r.len() != t)
        {
            return Err("channels disagree on column count".into());
        }
        if let Some(j) = (0..t).find(|j| !self.pose_column(*j).is_valid()) {
            return Err(format!("channel 1 column {j} is not a valid pose vector"));
        }
        let in_range = |v: &f64| v.is_finite() && (-0.5..=1.5).contains(v);
        if !self.channel2[..2].iter().flatten().all(in_range) {
            return Err("channel 2 position out of range".into());
        }
        if !(self.hand_width.is_finite() && self.hand_width > 0.0) {
            return Err("hand width must be positive".into());
        }
        Ok(())
    }
}

/// Builds the matrix from sampled frames. Hand width is the mean
/// indexMCP–pinkyMCP distance over the samples.
pub fn build_state_matrix(samples: &[HandLandmarkFrame], th: &RuleThresholds) -> GestureStateMatrix {
    assert!(!samples.is_empty(), "build_state_matrix needs at least one sample");
    let depth = samples.iter().all(|f| f.has_depth);
    let mut channel1: Vec<Vec<i8>> = (0..19).map(|_| Vec::with_capacity(samples.len())).collect();
    let mut channel2 = vec![Vec::with_capacity(samples.len()); if depth { 3 } else { 2 }];
    let mut width = 0.0;
    for frame in samples {
        let pose = encode_pose_vector(frame, th);
        for (row, v) in channel1.iter_mut().zip(pose.0) {
            row.push(v);
        }
        let c = hand_center(frame);
        channel2[0].push(c.x);
        channel2[1].push(1.0 - c.y);
        if depth {
            channel2[2].push(c.z.unwrap_or(0.0));
        }
        width += hand_width(frame, th.distance_mode);
    }
    GestureStateMatrix {
        sample_interval: SAMPLE_INTERVAL,
        hand_width: width / samples.len() as f64,
        channel1,
        channel2,
    }
}

/// Detects, samples and encodes every gesture window of a stream.
pub fn encode_stream(
    stream: &LandmarkStream,
    cfg: &SegmentationConfig,
    th: &RuleThresholds,
) -> Result<Vec<GestureStateMatrix>, EncodeError> {
    Ok(detect_gesture_windows(stream, cfg)?
        .iter()
        .map(|w| build_state_matrix(&sample_window(w), th))
        .collect())
}

/// Pose rows only, as embedded in the pose-description prompt.
pub fn render_pose_rows(m: &GestureStateMatrix) -> String {
    let mut out = String::new();
    for (i, (label, row)) in POSE_ROW_LABELS.iter().zip(&m.channel1).enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>2}")).collect();
        let _ = writeln!(out, "row {:>2} {:<24}: {}", i + 1, label, cells.join(" "));
    }
    out
}

/// Movement rows restricted to the inclusive column span.
pub fn render_movement_rows(m: &GestureStateMatrix, span: (usize, usize)) -> String {
    let mut out = String::new();
    for (i, row) in m.channel2.iter().enumerate() {
        let cells: Vec<String> = row[span.0..=span.1].iter().map(|v| format!("{v:.3}")).collect();
        let _ = writeln!(out, "row {:>2} {:<10}: {}", i + 1, MOVEMENT_ROW_LABELS[i], cells.join(" "));
    }
    out
}

/// Deterministic text rendering: header, labeled integer pose rows and
/// 3-decimal movement rows. [`parse_matrix_text`] reads it back.
pub fn serialize_matrix(m: &GestureStateMatrix) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# gesture state matrix");
    let _ = writeln!(out, "T: {}", m.columns());
    let _ = writeln!(out, "sample_interval: {:.1}", m.sample_interval);
    let _ = writeln!(out, "hand_width: {:.3}", m.hand_width);
    let _ = writeln!(out, "channel 1 (pose)");
    out.push_str(&render_pose_rows(m));
    let _ = writeln!(out, "channel 2 (movement)");
    out.push_str(&render_movement_rows(m, (0, m.columns().saturating_sub(1))));
    out
}

pub fn parse_matrix_text(text: &str) -> Result<GestureStateMatrix, EncodeError> {
    let bad = |msg: &str| EncodeError::MalformedMatrix(msg.to_string());
    let mut lines = text.lines();
    if lines.next() != Some("# gesture state matrix") {
        return Err(bad("missing header"));
    }
    let mut header = |key: &str| -> Result<String, EncodeError> {
        lines
            .next()
            .and_then(|l| l.strip_prefix(key))
            .map(|v| v.trim().to_string())
            .ok_or_else(|| bad(key))
    };
    let t: usize = header("T:")?.parse().map_err(|_| bad("T"))?;
    let sample_interval: f64 = header("sample_interval:")?.parse().map_err(|_| bad("sample_interval"))?;
    let hand_width: f64 = header("hand_width:")?.parse().map_err(|_| bad("hand_width"))?;
    let mut channel1 = Vec::new();
    let mut channel2 = Vec::new();
    let mut section = 0;
    for line in lines {
        match line {
            "channel 1 (pose)" => section = 1,
            "channel 2 (movement)" => section = 2,
            _ => {
                let (_, cells) = line.split_once(':').ok_or_else(|| bad("row without ':'"))?;
                let cells = cells.split_whitespace();
                match section {
                    1 => channel1.push(
                        cells.map(|c| c.parse::<i8>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad("pose cell"))?,
                    ),
                    2 => channel2.push(
                        cells.map(|c| c.parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|_| bad("movement cell"))?,
                    ),
                    _ => return Err(bad("row outside a channel")),
                }
            }
        }
    }
    let m = GestureStateMatrix { sample_interval, hand_width, channel1, channel2 };
    if m.columns() != t {
        return Err(bad("T does not match column count"));
    }
    m.validate().map_err(EncodeError::MalformedMatrix)?;
    Ok(m)
}
