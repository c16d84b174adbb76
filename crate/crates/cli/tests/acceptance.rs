//! Acceptance run: one PASS/FAIL line per criterion. Criterion 7 is
//! informational and never fails the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use gesture_core::encoder::{build_state_matrix, detect_gesture_windows, encode_stream, sample_window, SegmentationConfig};
use gesture_core::eval::random_guess_baseline;
use gesture_core::geometry::DistanceMode;
use gesture_core::landmarks::{Finger, Handedness, HandLandmarkFrame, Landmark, LANDMARK_COUNT};
use gesture_core::rules::{encode_pose_vector, FingerPair, RuleThresholds, ThresholdPair};
use gesture_core::synth;
use gesture_core::tuner::{
    evaluate_thresholds, grid_search, load_labeled_dataset, partition_by_group, split_ambiguous, AxisRange, GridSpec,
    GroundTruthLabel, GroupParams, LabeledSample, LossWeights, MeasuredSet, ParamGroup, RuleId,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;

/// Brute-force rule oracle over plain arrays, written against the rule
/// definitions rather than the library code.
mod oracle {
    pub type P = [f64; 3];

    const EPS: f64 = 1e-9;
    pub const CHAINS: [[usize; 4]; 5] = [[1, 2, 3, 4], [5, 6, 7, 8], [9, 10, 11, 12], [13, 14, 15, 16], [17, 18, 19, 20]];

    pub struct Hand {
        pub pts: [P; 21],
        pub left: bool,
        pub depth: bool,
    }

    pub fn sub(a: P, b: P) -> P {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }
    fn dot(a: P, b: P) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }
    fn cross(a: P, b: P) -> P {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    }
    fn norm(a: P) -> f64 {
        dot(a, a).sqrt()
    }

    pub fn angle(u: P, v: P) -> Option<f64> {
        if norm(u) < EPS || norm(v) < EPS {
            return None;
        }
        Some(norm(cross(u, v)).atan2(dot(u, v)).to_degrees())
    }

    pub fn decide(m: Option<f64>, low: f64, high: f64) -> i8 {
        match m {
            Some(v) if v <= low => 1,
            Some(v) if v >= high => -1,
            _ => 0,
        }
    }

    pub fn curl(h: &Hand, finger: usize) -> Option<f64> {
        let [a, b, c, d] = CHAINS[finger].map(|i| h.pts[i]);
        if finger == 0 {
            angle(sub(c, b), sub(d, c))
        } else {
            Some(angle(sub(b, a), sub(c, b))? + angle(sub(c, b), sub(d, c))?)
        }
    }

    fn flat(p: P, xy: bool) -> P {
        if xy { [p[0], p[1], 0.0] } else { p }
    }

    /// Nearest point of a segment among its endpoints and the interior foot.
    fn segment_distance(p: P, a: P, b: P) -> f64 {
        let ab = sub(b, a);
        let mut best = norm(sub(p, a)).min(norm(sub(p, b)));
        let len2 = dot(ab, ab);
        if len2 > 0.0 {
            let t = dot(sub(p, a), ab) / len2;
            if t > 0.0 && t < 1.0 {
                let foot = [a[0] + ab[0] * t, a[1] + ab[1] * t, a[2] + ab[2] * t];
                best = best.min(norm(sub(p, foot)));
            }
        }
        best
    }

    fn polyline_distance(p: P, line: &[P; 3]) -> f64 {
        segment_distance(p, line[0], line[1]).min(segment_distance(p, line[1], line[2]))
    }

    /// `pair` 0..3 is index–middle, middle–ring, ring–pinky.
    pub fn proximity(h: &Hand, pair: usize, xy: bool) -> f64 {
        let upper = |f: usize| [1, 2, 3].map(|k| flat(h.pts[CHAINS[f][k]], xy));
        let (a, b) = (upper(pair + 1), upper(pair + 2));
        (0..3).map(|l| polyline_distance(a[l], &b).min(polyline_distance(b[l], &a))).sum::<f64>() / 3.0
    }

    pub fn contact(h: &Hand, finger: usize, xy: bool) -> f64 {
        norm(flat(sub(h.pts[4], h.pts[CHAINS[finger][3]]), xy))
    }

    /// +1 up, -1 down, 0 otherwise.
    pub fn thumb(h: &Hand, thumb_verdict: i8, max_angle: f64) -> i8 {
        if thumb_verdict != 1 {
            return 0;
        }
        let v = sub(h.pts[4], h.pts[2]);
        let (Some(down), Some(up)) = (angle(v, [0.0, 1.0, 0.0]), angle(v, [0.0, -1.0, 0.0])) else {
            return 0;
        };
        let (dir, a) = if up < down { (1, up) } else { (-1, down) };
        if a <= max_angle { dir } else { 0 }
    }

    /// One-hot slot (left, right, down, up, inward, outward) or `None`.
    pub fn palm(h: &Hand, max_angle: f64) -> Option<usize> {
        let along = sub(h.pts[9], h.pts[0]);
        let across = sub(h.pts[5], h.pts[17]);
        let n = if h.left { cross(across, along) } else { cross(along, across) };
        if norm(n) < EPS {
            return None;
        }
        // comparison order: right, left, down, up, outward, inward
        let refs: [(usize, P); 6] = [
            (1, [1.0, 0.0, 0.0]),
            (0, [-1.0, 0.0, 0.0]),
            (2, [0.0, 1.0, 0.0]),
            (3, [0.0, -1.0, 0.0]),
            (5, [0.0, 0.0, -1.0]),
            (4, [0.0, 0.0, 1.0]),
        ];
        let mut best: Option<(usize, f64)> = None;
        for (slot, r) in refs {
            let a = angle(n, r)?;
            if best.is_none_or(|(_, m)| a < m) {
                best = Some((slot, a));
            }
        }
        let (slot, a) = best?;
        if a > max_angle || (!h.depth && slot >= 4) {
            return None;
        }
        Some(slot)
    }

    pub struct Th {
        pub thumb: (f64, f64),
        pub finger: (f64, f64),
        pub proximity: (f64, f64),
        pub contact: (f64, f64),
        pub thumb_angle: f64,
        pub palm_angle: f64,
        pub xy: bool,
    }

    pub fn pose_vector(h: &Hand, th: &Th) -> [i8; 19] {
        let mut v = [0i8; 19];
        for (f, slot) in v[..5].iter_mut().enumerate() {
            let (lo, hi) = if f == 0 { th.thumb } else { th.finger };
            *slot = decide(curl(h, f), lo, hi);
        }
        for p in 0..3 {
            v[5 + p] = decide(Some(proximity(h, p, th.xy)), th.proximity.0, th.proximity.1);
        }
        for f in 1..5 {
            v[7 + f] = decide(Some(contact(h, f, th.xy)), th.contact.0, th.contact.1);
        }
        v[12] = thumb(h, v[0], th.thumb_angle);
        if let Some(slot) = palm(h, th.palm_angle) {
            v[13 + slot] = 1;
        }
        v
    }
}

fn to_hand(f: &HandLandmarkFrame) -> oracle::Hand {
    oracle::Hand {
        pts: std::array::from_fn(|i| [f.landmarks[i].x, f.landmarks[i].y, f.landmarks[i].z]),
        left: f.handedness == Handedness::Left,
        depth: f.has_depth,
    }
}

fn to_oracle_th(th: &RuleThresholds) -> oracle::Th {
    oracle::Th {
        thumb: (th.flexion_thumb.low, th.flexion_thumb.high),
        finger: (th.flexion_finger.low, th.flexion_finger.high),
        proximity: (th.proximity.low, th.proximity.high),
        contact: (th.contact.low, th.contact.high),
        thumb_angle: th.thumb_dir_angle,
        palm_angle: th.palm_angle,
        xy: th.distance_mode == DistanceMode::Xy,
    }
}

fn random_thresholds(rng: &mut StdRng) -> RuleThresholds {
    let mut pair = |lo: std::ops::Range<f64>, width: std::ops::Range<f64>| {
        let low = rng.random_range(lo);
        ThresholdPair::new(low, low + rng.random_range(width))
    };
    let flexion_thumb = pair(5.0..40.0, 1.0..30.0);
    let flexion_finger = pair(30.0..90.0, 1.0..40.0);
    let proximity = pair(0.005..0.04, 0.001..0.02);
    let contact = pair(0.01..0.08, 0.001..0.03);
    RuleThresholds {
        flexion_thumb,
        flexion_finger,
        proximity,
        contact,
        thumb_dir_angle: rng.random_range(10.0..70.0),
        palm_angle: rng.random_range(10.0..60.0),
        distance_mode: if rng.random_bool(0.5) { DistanceMode::Xy } else { DistanceMode::Xyz },
    }
}

/// Mostly anatomical hands, some unstructured frames, either handedness,
/// with and without depth.
fn fuzz_hand(rng: &mut StdRng) -> HandLandmarkFrame {
    let mut f = if rng.random_bool(0.1) { synth::random_frame(rng, 0.0) } else { synth::random_hand(rng, 0.0) };
    if rng.random_bool(0.3) {
        f.handedness = Handedness::Left;
    }
    if rng.random_bool(0.3) {
        f = f.map_landmarks(|l| Landmark::new(l.x, l.y, 0.0));
        f.has_depth = false;
    }
    f
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

const RULE_NAMES: [&str; 14] = [
    "flexion:thumb",
    "flexion:index",
    "flexion:middle",
    "flexion:ring",
    "flexion:pinky",
    "proximity:index_middle",
    "proximity:middle_ring",
    "proximity:ring_pinky",
    "contact:index",
    "contact:middle",
    "contact:ring",
    "contact:pinky",
    "thumb_direction",
    "palm_orientation",
];

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    let mut mismatches = [0usize; 14];
    // verdict coverage per rule: -1, 0, +1
    let mut seen = [[false; 3]; 14];
    for _ in 0..1000 {
        let frame = fuzz_hand(&mut rng);
        let th = random_thresholds(&mut rng);
        let got = encode_pose_vector(&frame, &th).0;
        let want = oracle::pose_vector(&to_hand(&frame), &to_oracle_th(&th));
        for r in 0..13 {
            if got[r] != want[r] {
                mismatches[r] += 1;
            }
            seen[r][(want[r] + 1) as usize] = true;
        }
        if got[13..] != want[13..] {
            mismatches[13] += 1;
        }
        seen[13][want[13..].contains(&1) as usize] = true;
    }
    let elapsed = start.elapsed().as_secs_f64();
    let total: usize = mismatches.iter().sum();
    let uncovered: Vec<&str> = (0..13).filter(|r| !seen[*r].iter().all(|s| *s)).map(|r| RULE_NAMES[r]).collect();
    let bad: Vec<String> =
        (0..14).filter(|r| mismatches[*r] > 0).map(|r| format!("{}={}", RULE_NAMES[r], mismatches[r])).collect();
    outcome(
        total == 0 && elapsed < 5.0 && uncovered.is_empty(),
        format!(
            "14 rules x 1000 hands, {total} mismatches{}{}, {elapsed:.2}s",
            if bad.is_empty() { String::new() } else { format!(" ({})", bad.join(", ")) },
            if uncovered.is_empty() { String::new() } else { format!(", verdicts not covered: {}", uncovered.join(", ")) },
        ),
    )
}

/// Oracle measure of the rule on the default (image-plane) thresholds.
fn oracle_measure(rule: RuleId, frame: &HandLandmarkFrame) -> Option<f64> {
    let h = to_hand(frame);
    let finger = |f: Finger| Finger::ALL.iter().position(|x| *x == f).unwrap();
    match rule {
        RuleId::Flexion(f) => oracle::curl(&h, finger(f)),
        RuleId::Proximity(p) => Some(oracle::proximity(&h, FingerPair::ALL.iter().position(|x| *x == p).unwrap(), true)),
        RuleId::Contact(f) => Some(oracle::contact(&h, finger(f), true)),
        _ => None,
    }
}

fn random_rule(group: ParamGroup, rng: &mut StdRng) -> RuleId {
    match group {
        ParamGroup::FlexionThumb => RuleId::Flexion(Finger::Thumb),
        ParamGroup::FlexionFinger => RuleId::Flexion(Finger::ALL[rng.random_range(1..5)]),
        ParamGroup::Proximity => RuleId::Proximity(FingerPair::ALL[rng.random_range(0..3)]),
        ParamGroup::Contact => RuleId::Contact(Finger::ALL[rng.random_range(1..5)]),
        _ => unreachable!("paired groups only"),
    }
}

fn pair_grid(grid: &GridSpec, group: ParamGroup) -> AxisRange {
    match group {
        ParamGroup::FlexionThumb => grid.flexion_thumb.low,
        ParamGroup::FlexionFinger => grid.flexion_finger.low,
        ParamGroup::Proximity => grid.proximity.low,
        ParamGroup::Contact => grid.contact.low,
        _ => unreachable!("paired groups only"),
    }
}

fn measured_pool(group: ParamGroup, n: usize, rng: &mut StdRng) -> Vec<(RuleId, HandLandmarkFrame, f64)> {
    (0..n)
        .filter_map(|_| {
            let rule = random_rule(group, rng);
            let frame = synth::random_hand(rng, 0.0);
            oracle_measure(rule, &frame).map(|m| (rule, frame, m))
        })
        .collect()
}

fn label(rule: RuleId, positive: bool) -> GroundTruthLabel {
    GroundTruthLabel::single(rule.states()[usize::from(!positive)])
}

const PAIRED: [ParamGroup; 4] = [ParamGroup::FlexionThumb, ParamGroup::FlexionFinger, ParamGroup::Proximity, ParamGroup::Contact];

/// Plants a boundary at the pool median and keeps the 250 samples on each
/// side closest to it, outside a one-step margin.
fn planted_recovery(group: ParamGroup, rng: &mut StdRng) -> Result<String, String> {
    let grid = GridSpec::default();
    let step = pair_grid(&grid, group).step;
    let mut pool = measured_pool(group, 20_000, rng);
    pool.sort_by(|a, b| a.2.total_cmp(&b.2));
    let median = pool[pool.len() / 2].2;
    let planted = (median / step).round() * step;
    let mut below: Vec<_> = pool.iter().filter(|s| s.2 <= planted - step).collect();
    let mut above: Vec<_> = pool.iter().filter(|s| s.2 >= planted + step).collect();
    below.sort_by(|a, b| b.2.total_cmp(&a.2));
    above.sort_by(|a, b| a.2.total_cmp(&b.2));
    if below.len() < 250 || above.len() < 250 {
        return Err(format!("{}: pool too thin around {planted}", group.name()));
    }
    let samples: Vec<LabeledSample> = below[..250]
        .iter()
        .map(|s| (s, true))
        .chain(above[..250].iter().map(|s| (s, false)))
        .map(|((rule, frame, _), positive)| LabeledSample { rule: *rule, frame: frame.clone(), label: label(*rule, positive) })
        .collect();
    let best = grid_search(&samples, group, &grid, &LossWeights::default(), &RuleThresholds::default())
        .map_err(|e| e.to_string())?;
    let GroupParams::Pair(p) = best.params else {
        return Err("paired group returned an angle".into());
    };
    let tol = step * 1e-6;
    if best.loss != 0.0 || best.counts.error != 0 || best.counts.unsure != 0 {
        return Err(format!("{}: best loss {} at ({}, {})", group.name(), best.loss, p.low, p.high));
    }
    if !(p.low - step - tol <= planted && planted <= p.high + step + tol) {
        return Err(format!("{}: cell ({}, {}) misses planted {planted}", group.name(), p.low, p.high));
    }
    Ok(format!("{} {planted:.3}->({:.3},{:.3})", group.name(), p.low, p.high))
}

/// Nested band pairs over a random grid: the wider band never has more errors.
fn widening_property(rng: &mut StdRng) -> Result<(), String> {
    let group = PAIRED[rng.random_range(0..4)];
    let pool = measured_pool(group, 300, rng);
    let mut sorted: Vec<f64> = pool.iter().map(|s| s.2).collect();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let samples: Vec<LabeledSample> = pool
        .iter()
        .map(|(rule, frame, m)| {
            let cut = lo + (hi - lo) * 0.4;
            let positive = (*m <= cut) ^ rng.random_bool(0.2);
            LabeledSample { rule: *rule, frame: frame.clone(), label: label(*rule, positive) }
        })
        .collect();
    let set = MeasuredSet::new(&samples, group, &RuleThresholds::default()).map_err(|e| e.to_string())?;
    let min = rng.random_range(lo..(lo + hi) / 2.0);
    let max = rng.random_range((lo + hi) / 2.0..hi);
    let step = (max - min) / rng.random_range(5.0..60.0);
    let values = AxisRange::new(min, max, step).values();
    let n = values.len();
    for _ in 0..50 {
        let mut idx = [0; 4].map(|_| rng.random_range(0..n));
        idx.sort_unstable();
        if idx[1] == idx[2] {
            continue;
        }
        let band = |i: usize, j: usize| GroupParams::Pair(ThresholdPair::new(values[i], values[j]));
        let (inner, outer) = (set.evaluate(band(idx[1], idx[2])), set.evaluate(band(idx[0], idx[3])));
        if outer.error > inner.error {
            return Err(format!("{}: widening {:?} added errors", group.name(), idx));
        }
    }
    Ok(())
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(2);
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    for group in PAIRED {
        match planted_recovery(group, &mut rng) {
            Ok(s) => notes.push(s),
            Err(e) => failures.push(e),
        }
    }
    let grid_failures: Vec<String> = (0..100).filter_map(|_| widening_property(&mut rng).err()).collect();
    let elapsed = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && grid_failures.is_empty() && elapsed < 30.0;
    failures.extend(grid_failures);
    outcome(
        pass,
        format!(
            "planted {}; widening held on {} of 100 grids; {elapsed:.2}s{}",
            notes.join(", "),
            100 - failures.iter().filter(|f| f.contains("widening")).count(),
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn vector_ok(v: &[i8]) -> bool {
    v.len() == 19
        && v[..13].iter().all(|x| matches!(x, -1..=1))
        && v[13..].iter().all(|x| matches!(x, 0 | 1))
        && v[13..].iter().filter(|x| **x == 1).count() <= 1
}

fn expected_columns(duration: f64) -> usize {
    let mut k = 0;
    while 0.2 * (k + 1) as f64 <= duration + 1e-6 {
        k += 1;
    }
    k + 1
}

fn degenerate(frame: HandLandmarkFrame, rng: &mut StdRng) -> HandLandmarkFrame {
    let mut f = frame;
    match rng.random_range(0..3) {
        0 => {
            let p = f.landmarks[0];
            f.landmarks = [p; LANDMARK_COUNT];
        }
        1 => {
            for i in 1..LANDMARK_COUNT {
                if rng.random_bool(0.3) {
                    f.landmarks[i] = f.landmarks[i - 1];
                }
            }
        }
        _ => f = f.map_landmarks(|l| Landmark::new(l.x, l.y, 0.0)),
    }
    f
}

fn criterion_3() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let mut violations = Vec::new();
    for i in 0..10_000 {
        let mut frame = fuzz_hand(&mut rng);
        if rng.random_bool(0.05) {
            frame = degenerate(frame, &mut rng);
        }
        let th = if rng.random_bool(0.5) { RuleThresholds::default() } else { random_thresholds(&mut rng) };
        if !vector_ok(&encode_pose_vector(&frame, &th).0) {
            violations.push(format!("frame {i}"));
        }
    }
    let (mut windows_seen, mut columns_seen) = (0, 0);
    let seg = SegmentationConfig::default();
    for s in 0..200 {
        let stream = synth::random_stream(&mut rng);
        let th = RuleThresholds::default();
        let windows = match detect_gesture_windows(&stream, &seg) {
            Ok(w) => w,
            Err(e) => {
                violations.push(format!("stream {s}: {e}"));
                continue;
            }
        };
        let encoded = encode_stream(&stream, &seg, &th).expect("detection already succeeded");
        if encoded.len() != windows.len() {
            violations.push(format!("stream {s}: window count"));
        }
        for (w, m) in windows.iter().zip(&encoded) {
            windows_seen += 1;
            let t = expected_columns(w.end_time - w.start_time);
            columns_seen += t;
            let ok = m.columns() == t
                && *m == build_state_matrix(&sample_window(w), &th)
                && m.channel1.len() == 19
                && m.channel1.iter().all(|r| r.len() == t)
                && m.channel2.iter().all(|r| r.len() == t)
                && (0..t).all(|j| vector_ok(&(0..19).map(|r| m.channel1[r][j]).collect::<Vec<_>>()));
            if !ok {
                violations.push(format!("stream {s}: window {:.3}-{:.3}", w.start_time, w.end_time));
            }
        }
    }
    outcome(
        violations.is_empty() && windows_seen > 0,
        format!(
            "10000 frames, 200 streams ({windows_seen} windows, {columns_seen} columns), {} violations{}",
            violations.len(),
            violations.first().map(|v| format!(", first: {v}")).unwrap_or_default()
        ),
    )
}

fn criterion_4() -> Outcome {
    let pct = |x: f64| format!("{:.2}", 100.0 * x);
    let uniform = random_guess_baseline(&[18]).expect("non-empty");
    let closed = [pct(uniform.top1.mean), pct(uniform.top3.mean), pct(uniform.top5.mean)];
    let closed_ok = closed == ["5.56", "16.67", "27.78"];
    let mix: Vec<usize> = [66; 5].into_iter().chain([17; 3]).collect();
    let video = random_guess_baseline(&mix).expect("non-empty");
    let video_ok = (100.0 * video.top1.mean - 3.15).abs() <= 0.01;
    // Monte-Carlo: pick a task, guess uniformly, hit if the guess is the target.
    let mut rng = StdRng::seed_from_u64(4);
    let draws = 1_000_000;
    let hits = (0..draws)
        .filter(|_| {
            let n = mix[rng.random_range(0..mix.len())];
            rng.random_range(0..n) == 0
        })
        .count();
    let simulated = 100.0 * hits as f64 / draws as f64;
    let mc_ok = (simulated - 100.0 * video.top1.mean).abs() <= 0.5;
    outcome(
        closed_ok && video_ok && mc_ok,
        format!(
            "N=18 -> {}/{}/{}%, video mix Top-1 {:.4}% (Monte-Carlo {simulated:.2}%)",
            closed[0],
            closed[1],
            closed[2],
            100.0 * video.top1.mean
        ),
    )
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

struct Run {
    code: i32,
    stderr: String,
}

fn gesture(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_gesture"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("gesture binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const SMOKE_TASKS: [(&str, &str); 2] = [("home_intercom", "home_light"), ("video_next", "video_next")];

/// encode, ground and eval of the smoke dataset into `dir`.
fn smoke_pipeline(dir: &Path, jobs: &str) -> Result<(), String> {
    let smoke = fixtures().join("smoke");
    for (task, stream) in SMOKE_TASKS {
        let enc = dir.join("encode").join(task);
        let r = gesture(&["encode", s(&smoke.join(format!("streams/{stream}.json"))), "-o", s(&enc), "--jobs", jobs]);
        if r.code != 0 {
            return Err(format!("encode {task}: exit {} {}", r.code, r.stderr));
        }
        let backend = format!("scripted:{}", s(&smoke.join(format!("scripts/{task}.json"))));
        let r = gesture(&[
            "ground",
            s(&enc.join("window_0.json")),
            "--library",
            s(&smoke.join(format!("libraries/{task}.json"))),
            "--backend",
            &backend,
            "-o",
            s(&dir.join("ground").join(task)),
            "--jobs",
            jobs,
        ]);
        if r.code != 0 {
            return Err(format!("ground {task}: exit {} {}", r.code, r.stderr));
        }
    }
    let r = gesture(&["eval", s(&smoke.join("manifest.json")), "--repetitions", "3", "-o", s(&dir.join("eval")), "--jobs", jobs]);
    if r.code != 0 {
        return Err(format!("eval: exit {} {}", r.code, r.stderr));
    }
    Ok(())
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_5(first_run: &Path) -> Outcome {
    let start = Instant::now();
    let mut snapshots = Vec::new();
    let temps: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    // thread count must not change a byte
    let dirs = std::iter::once(first_run).chain(temps.iter().map(|t| t.path()));
    for (dir, jobs) in dirs.zip(["0", "1", "3"]) {
        if let Err(e) = smoke_pipeline(dir, jobs) {
            return outcome(false, e);
        }
        snapshots.push(snapshot(dir));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let transcripts = snapshots[0].keys().filter(|k| k.extension().is_some_and(|e| e == "jsonl")).count();
    let identical = snapshots.windows(2).all(|w| w[0] == w[1]);
    let differing: Vec<String> = snapshots[0]
        .iter()
        .filter(|(k, v)| snapshots[1..].iter().any(|s| s.get(*k) != Some(*v)))
        .map(|(k, _)| k.display().to_string())
        .collect();
    outcome(
        identical && transcripts > 0 && elapsed < 60.0,
        format!(
            "3 runs, {} files ({transcripts} transcripts) {}, {elapsed:.2}s",
            snapshots[0].len(),
            if identical { "byte-identical".to_string() } else { format!("differ: {}", differing.join(", ")) }
        ),
    )
}

fn read_json(path: &Path) -> Option<Value> {
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

fn criterion_6() -> Outcome {
    let adv = fixtures().join("adversarial");
    let tmp = tempfile::tempdir().unwrap();
    let enc = tmp.path().join("encode");
    let home = fixtures().join("smoke");
    if gesture(&["encode", s(&home.join("streams/home_light.json")), "-o", s(&enc)]).code != 0 {
        return outcome(false, "encode failed");
    }
    let cases = read_json(&adv.join("cases.json")).expect("cases.json");
    let cases = cases.as_array().expect("case list");
    let mut failures = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let file = case["fixtures"].as_str().unwrap();
        let out = tmp.path().join(format!("case{i}"));
        let backend = format!("scripted:{}", s(&adv.join(file)));
        let max_rounds = case.get("max_rounds").map(|v| v.to_string()).unwrap_or_else(|| "10".into());
        let r = gesture(&[
            "ground",
            s(&enc.join("window_0.json")),
            "--library",
            s(&home.join("libraries/home_intercom.json")),
            "--backend",
            &backend,
            "--max-rounds",
            &max_rounds,
            "-o",
            s(&out),
        ]);
        let expected = case["exit"].as_i64().unwrap() as i32;
        let conclusion = read_json(&out.join("conclusion.json"));
        let outcome_json = conclusion.as_ref().map(|c| c.get("outcome").unwrap_or(c).clone());
        let mut ok = r.code == expected;
        if let Some(ids) = case.get("conclusion") {
            ok &= outcome_json.as_ref().and_then(|o| o.get("conclusion")) == Some(ids);
            let c = conclusion.as_ref();
            let rounds = c.and_then(|c| c["rounds"].as_u64());
            let questions = c.and_then(|c| c["questions"].as_u64());
            ok &= rounds.is_some() && rounds == questions.map(|q| q + 1);
        }
        if let Some(reason) = case.get("negative") {
            ok &= outcome_json.as_ref().and_then(|o| o.get("negative")) == Some(reason);
        }
        if !ok {
            failures.push(format!("{file}: exit {} (want {expected})", r.code));
        }
    }
    outcome(
        failures.is_empty() && cases.len() == 20,
        format!(
            "{} of {} fixtures resolved with the documented exit code{}",
            cases.len() - failures.len(),
            cases.len(),
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn criterion_7() -> String {
    let Ok(path) = std::env::var("GESTURE_LABELED_DATASET") else {
        return "NOTE headline accuracies need live completions and participant data; \
                set GESTURE_LABELED_DATASET to score the default thresholds on labeled landmarks"
            .into();
    };
    let samples = match load_labeled_dataset(Path::new(&path)) {
        Ok(s) => s,
        Err(e) => return format!("NOTE could not load {path}: {e}"),
    };
    let (samples, _) = split_ambiguous(samples);
    match evaluate_thresholds(&partition_by_group(samples), &RuleThresholds::default(), &LossWeights::default()) {
        Ok(rules) if !rules.is_empty() => {
            let error = rules.iter().map(|r| r.error).sum::<f64>() / rules.len() as f64;
            format!(
                "NOTE default thresholds: mean rule error {:.2}% ({} 5%)",
                100.0 * error,
                if error <= 0.05 { "within" } else { "above" }
            )
        }
        Ok(_) => "NOTE dataset has no usable samples".into(),
        Err(e) => format!("NOTE evaluation failed: {e}"),
    }
}

fn question_count(script: &Path) -> usize {
    let fixtures = read_json(script).expect("script");
    fixtures
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|f| serde_json::from_str::<Value>(f["response"].as_str()?).ok())
        .filter(|v| v.get("question").is_some())
        .count()
}

fn transcript_sums(path: &Path) -> Result<(u64, u64), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let (mut input, mut output) = (0, 0);
    for line in text.lines() {
        let turn: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let out = turn["output_tokens"].as_u64().unwrap_or(0);
        let chars = turn["raw"].as_str().unwrap_or("").chars().count() as u64;
        if out != chars.div_ceil(4) {
            return Err(format!("{}: turn {} output tokens {out} for {chars} chars", path.display(), turn["index"]));
        }
        input += turn["input_tokens"].as_u64().unwrap_or(0);
        output += out;
    }
    Ok((input, output))
}

fn criterion_8(run: &Path) -> Outcome {
    let smoke = fixtures().join("smoke");
    let questions: BTreeMap<&str, usize> =
        SMOKE_TASKS.iter().map(|(t, _)| (*t, question_count(&smoke.join(format!("scripts/{t}.json"))))).collect();
    let mut problems = Vec::new();
    let mut checked = 0;
    for (task, q) in &questions {
        let c = read_json(&run.join("ground").join(task).join("conclusion.json")).unwrap_or_default();
        match transcript_sums(&run.join("ground").join(task).join("transcript.jsonl")) {
            Ok((i, o)) if c["rounds"] == *q + 1 && c["input_tokens"] == i && c["output_tokens"] == o => checked += 1,
            Ok(_) => problems.push(format!("ground {task}")),
            Err(e) => problems.push(e),
        }
    }
    let report = read_json(&run.join("eval/report.json")).unwrap_or_default();
    let sessions = report["sessions"].as_array().cloned().unwrap_or_default();
    for rec in &sessions {
        let (task, setting, rep) = (rec["task"].as_str().unwrap_or(""), rec["setting"].as_str().unwrap_or(""), &rec["repetition"]);
        let q = questions.get(task).copied().unwrap_or(usize::MAX);
        let path = run.join("eval/transcripts").join(setting).join(format!("{task}_r{rep}.jsonl"));
        match transcript_sums(&path) {
            Ok((i, o))
                if rec["rounds"] == q + 1
                    && rec["questions"] == q
                    && rec["input_tokens"] == i
                    && rec["output_tokens"] == o =>
            {
                checked += 1
            }
            Ok(_) => problems.push(format!("{setting}/{task}_r{rep}")),
            Err(e) => problems.push(e),
        }
    }
    for setting in report["settings"].as_array().cloned().unwrap_or_default() {
        let name = setting["setting"].as_str().unwrap_or("");
        let mine: Vec<&Value> = sessions.iter().filter(|r| r["setting"] == name).collect();
        let mean = |key: &str| mine.iter().map(|r| r[key].as_f64().unwrap_or(f64::NAN)).sum::<f64>() / mine.len() as f64;
        let cost = &setting["cost"];
        let close = |key: &str, v: f64| (cost[key].as_f64().unwrap_or(f64::NAN) - v).abs() < 1e-9;
        if !(close("mean_rounds", mean("rounds")) && close("mean_input_tokens", mean("input_tokens")) && close("mean_output_tokens", mean("output_tokens"))) {
            problems.push(format!("{name} cost summary"));
        }
    }
    outcome(
        problems.is_empty() && checked == sessions.len() + questions.len() && !sessions.is_empty(),
        format!(
            "{checked} sessions: rounds = questions + 1, token totals match turn sums{}",
            if problems.is_empty() { String::new() } else { format!("; mismatched: {}", problems.join(", ")) }
        ),
    )
}

fn main() -> ExitCode {
    let run = tempfile::tempdir().unwrap();
    let gating: Vec<(usize, Box<dyn Fn() -> Outcome>)> = vec![
        (1, Box::new(criterion_1)),
        (2, Box::new(criterion_2)),
        (3, Box::new(criterion_3)),
        (4, Box::new(criterion_4)),
        (5, Box::new(|| criterion_5(run.path()))),
        (6, Box::new(criterion_6)),
    ];
    let mut failed = 0;
    for (n, check) in &gating {
        let o = check();
        failed += usize::from(!o.pass);
        println!("criterion {n}: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("criterion 7: {} (non-gating)", criterion_7());
    let o = criterion_8(run.path());
    failed += usize::from(!o.pass);
    println!("criterion 8: {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
