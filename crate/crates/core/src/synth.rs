//! Synthetic right-hand landmark generators for fixtures, fuzzing and
//! benchmarks.
//!
//! Hands are built in a local frame (palm facing the camera, fingers
//! pointing up in the image), posed with per-joint bend angles, then rotated,
//! scaled and placed.

use rand::Rng;

use crate::geometry::Vec3;
use crate::landmarks::{
    Finger, Handedness, HandLandmarkFrame, Landmark, LandmarkStream, SourceView, LANDMARK_COUNT,
    WRIST,
};

/// Joint bend angles in degrees for one hand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandPose {
    /// Per finger `[MCP, PIP, DIP]` bends; for the thumb `[CMC, MCP, IP]`.
    pub bends: [[f64; 3]; 5],
    /// Sideways splay of each finger from vertical, degrees.
    pub splay: [f64; 5],
}

impl Default for HandPose {
    fn default() -> Self {
        Self {
            bends: [[0.0; 3]; 5],
            splay: [-45.0, -12.0, -4.0, 4.0, 12.0],
        }
    }
}

/// Base points and bone lengths of the template hand (width ≈ 0.075).
const BASES: [(f64, f64); 5] = [(-0.03, 0.08), (-0.0375, 0.0), (-0.0125, -0.005), (0.0125, 0.0), (0.0375, 0.01)];
const BONES: [[f64; 3]; 5] = [
    [0.04, 0.035, 0.03],
    [0.045, 0.028, 0.024],
    [0.05, 0.032, 0.026],
    [0.047, 0.03, 0.025],
    [0.036, 0.022, 0.021],
];
const WRIST_POS: (f64, f64) = (0.0, 0.1);

/// Landmarks of a posed hand in the local frame, before placement.
pub fn pose_landmarks(pose: &HandPose) -> [Vec3; LANDMARK_COUNT] {
    let mut pts = [Vec3::default(); LANDMARK_COUNT];
    pts[WRIST] = Vec3::new(WRIST_POS.0, WRIST_POS.1, 0.0);
    for (fi, finger) in Finger::ALL.into_iter().enumerate() {
        let chain = finger.chain();
        let splay = pose.splay[fi].to_radians();
        // in-plane direction (up is -y) and the curl direction (toward camera)
        let up = Vec3::new(splay.sin(), -splay.cos(), 0.0);
        let toward = Vec3::new(0.0, 0.0, -1.0);
        let mut p = Vec3::new(BASES[fi].0, BASES[fi].1, 0.0);
        pts[chain[0]] = p;
        let mut bend = 0.0f64;
        for bone in 0..3 {
            bend += pose.bends[fi][bone].to_radians();
            let dir = up * bend.cos() + toward * bend.sin();
            p = p + dir * BONES[fi][bone];
            pts[chain[bone + 1]] = p;
        }
    }
    pts
}

fn rotate(v: Vec3, yaw: f64, pitch: f64, roll: f64) -> Vec3 {
    // roll about z, then pitch about x, then yaw about y
    let (sr, cr) = roll.sin_cos();
    let v = Vec3::new(v.x * cr - v.y * sr, v.x * sr + v.y * cr, v.z);
    let (sp, cp) = pitch.sin_cos();
    let v = Vec3::new(v.x, v.y * cp - v.z * sp, v.y * sp + v.z * cp);
    let (sy, cy) = yaw.sin_cos();
    Vec3::new(v.x * cy + v.z * sy, v.y, -v.x * sy + v.z * cy)
}

/// Placement of a local-frame hand in the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub center: (f64, f64),
    pub scale: f64,
    /// Rotation angles in degrees (yaw about y, pitch about x, roll about z).
    pub rotation: (f64, f64, f64),
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            center: (0.5, 0.5),
            scale: 1.0,
            rotation: (0.0, 0.0, 0.0),
        }
    }
}

/// Builds a right-hand frame whose landmark centroid lands on `placement.center`.
pub fn place(t: f64, local: &[Vec3; LANDMARK_COUNT], placement: &Placement) -> HandLandmarkFrame {
    let (yaw, pitch, roll) = placement.rotation;
    let moved: Vec<Vec3> = local
        .iter()
        .map(|p| rotate(*p, yaw.to_radians(), pitch.to_radians(), roll.to_radians()) * placement.scale)
        .collect();
    let n = moved.len() as f64;
    let mean = moved.iter().fold(Vec3::default(), |a, p| a + *p) * (1.0 / n);
    let shift = Vec3::new(placement.center.0, placement.center.1, 0.0) - Vec3::new(mean.x, mean.y, 0.0);
    let mut landmarks = [Landmark::default(); LANDMARK_COUNT];
    for (lm, p) in landmarks.iter_mut().zip(moved) {
        let q = p + shift;
        *lm = Landmark::new(q.x, q.y, q.z);
    }
    HandLandmarkFrame::new(t, Handedness::Right, landmarks)
}

/// Flat open right hand, palm toward the camera, centered at `(cx, cy)`.
pub fn open_hand_at(t: f64, cx: f64, cy: f64) -> HandLandmarkFrame {
    let placement = Placement {
        center: (cx, cy),
        ..Placement::default()
    };
    place(t, &pose_landmarks(&HandPose::default()), &placement)
}

/// Random but anatomically shaped hand: bends span straight to fully curled,
/// orientation covers all palm directions.
pub fn random_pose<R: Rng + ?Sized>(rng: &mut R) -> HandPose {
    let mut pose = HandPose::default();
    for fi in 0..5 {
        for j in 0..3 {
            pose.bends[fi][j] = rng.random_range(-5.0..95.0);
        }
        pose.splay[fi] += rng.random_range(-8.0..8.0);
    }
    pose
}

pub fn random_placement<R: Rng + ?Sized>(rng: &mut R) -> Placement {
    Placement {
        center: (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)),
        scale: rng.random_range(0.5..1.6),
        rotation: (
            rng.random_range(-180.0..180.0),
            rng.random_range(-180.0..180.0),
            rng.random_range(-180.0..180.0),
        ),
    }
}

pub fn random_hand<R: Rng + ?Sized>(rng: &mut R, t: f64) -> HandLandmarkFrame {
    let pose = random_pose(rng);
    place(t, &pose_landmarks(&pose), &random_placement(rng))
}

/// Unstructured frame: every landmark independently uniform in the image.
pub fn random_frame<R: Rng + ?Sized>(rng: &mut R, t: f64) -> HandLandmarkFrame {
    let mut landmarks = [Landmark::default(); LANDMARK_COUNT];
    for lm in landmarks.iter_mut() {
        *lm = Landmark::new(
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(-0.1..0.1),
        );
    }
    HandLandmarkFrame::new(t, Handedness::Right, landmarks)
}

/// A stream at `fps` in which the hand is raised above `chest_line` during
/// the given `(start, end)` intervals and held low otherwise.
pub fn raise_stream(fps: f64, duration: f64, raises: &[(f64, f64)], low_y: f64, high_y: f64) -> LandmarkStream {
    let n = (duration * fps).floor() as usize;
    let frames = (0..=n)
        .map(|i| {
            let t = (i as f64 / fps * 1000.0).round() / 1000.0;
            let up = raises.iter().any(|(a, b)| (*a..=*b).contains(&t));
            open_hand_at(t, 0.5, if up { high_y } else { low_y })
        })
        .collect();
    LandmarkStream::new(SourceView::ThirdPerson, Handedness::Right, frames)
        .expect("synthetic timestamps are increasing")
}

/// A random stream with a wandering hand; the hand height follows a random
/// walk that crosses typical chest lines.
pub fn random_stream<R: Rng + ?Sized>(rng: &mut R) -> LandmarkStream {
    let fps = [15.0, 24.0, 30.0, 60.0][rng.random_range(0..4)];
    let duration = rng.random_range(0.5..8.0);
    let n = (duration * fps) as usize + 1;
    let pose = random_pose(rng);
    let mut placement = random_placement(rng);
    placement.scale = rng.random_range(0.6..1.2);
    let mut y: f64 = rng.random_range(0.3..0.8);
    let mut x: f64 = rng.random_range(0.3..0.7);
    let frames = (0..n)
        .map(|i| {
            y = (y + rng.random_range(-0.04..0.04)).clamp(0.3, 0.8);
            x = (x + rng.random_range(-0.02..0.02)).clamp(0.3, 0.7);
            let mut p = pose;
            for b in p.bends.iter_mut().flatten() {
                *b = (*b + rng.random_range(-3.0..3.0)).clamp(-5.0, 100.0);
            }
            let here = Placement {
                center: (x, y),
                ..placement
            };
            let t = (i as f64 / fps * 1000.0).round() / 1000.0;
            place(t, &pose_landmarks(&p), &here)
        })
        .collect();
    LandmarkStream::new(SourceView::ThirdPerson, Handedness::Right, frames)
        .expect("synthetic timestamps are increasing")
}
