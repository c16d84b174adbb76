//! Seeded inputs shared by the benchmarks.

use gesture_core::rules::encode_pose_vector;
use gesture_core::synth::random_hand;
use gesture_core::tuner::{GroundTruthLabel, LabeledSample, RuleId, RuleState};
use gesture_core::{Finger, HandLandmarkFrame, RuleThresholds};
use rand::rngs::StdRng;
use rand::SeedableRng;

pub fn hands(n: usize, seed: u64) -> Vec<HandLandmarkFrame> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n).map(|i| random_hand(&mut rng, i as f64 / 30.0)).collect()
}

/// Index-flexion samples labeled by the default rule, so every grid cell has
/// something to disagree with.
pub fn flexion_samples(n: usize, seed: u64) -> Vec<LabeledSample> {
    let th = RuleThresholds::default();
    hands(n, seed)
        .into_iter()
        .map(|frame| {
            let state = match encode_pose_vector(&frame, &th).0[1] {
                1 => RuleState::Bent,
                _ => RuleState::Straight,
            };
            LabeledSample { rule: RuleId::Flexion(Finger::Index), frame, label: GroundTruthLabel::single(state) }
        })
        .collect()
}
