//! Threshold tuning with three-way correctness and an asymmetric loss.
//!
//! Each labeled sample is scored as correct, error or unsure. Unsure costs
//! less than an error but more than a correct answer, so the optimum keeps a
//! narrow unsure band instead of either committing everywhere or abstaining
//! everywhere. Thresholds are chosen by exhaustive grid search.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmarks::{parse_landmark_stream, Finger, Handedness, HandLandmarkFrame};
use crate::rules::{
    contact_distance, flexion, flexion_curl, palm_orientation_measure, proximity_distance,
    thumb_direction_measure, FingerPair, PalmOrientation, RuleThresholds, ThreeWay,
    ThresholdPair, ThumbDirection,
};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("grid has no cells for {0}")]
    EmptyGrid(ParamGroup),
    #[error("sample {index} has an ambiguous label; filter ambiguous samples before tuning")]
    AmbiguousLabelPresent { index: usize },
    #[error("state `{state}` is not a state of rule {rule}")]
    StateSpaceMismatch { rule: RuleId, state: RuleState },
    #[error("rule {rule} is not tuned by parameter group {group}")]
    RuleNotInGroup { rule: RuleId, group: ParamGroup },
    #[error("invalid rule id `{0}`")]
    UnknownRule(String),
    #[error("dataset line {line}: {message}")]
    BadDataset { line: usize, message: String },
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// One rule applied to one finger, pair or the palm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleId {
    Flexion(Finger),
    Proximity(FingerPair),
    /// Thumb tip against this fingertip.
    Contact(Finger),
    ThumbDirection,
    PalmOrientation,
}

impl RuleId {
    pub fn group(self) -> ParamGroup {
        match self {
            RuleId::Flexion(Finger::Thumb) => ParamGroup::FlexionThumb,
            RuleId::Flexion(_) => ParamGroup::FlexionFinger,
            RuleId::Proximity(_) => ParamGroup::Proximity,
            RuleId::Contact(_) => ParamGroup::Contact,
            RuleId::ThumbDirection => ParamGroup::ThumbDirection,
            RuleId::PalmOrientation => ParamGroup::PalmOrientation,
        }
    }

    /// Committed states of this rule (unsure excluded).
    pub fn states(self) -> &'static [RuleState] {
        use RuleState::*;
        match self {
            RuleId::Flexion(_) => &[Straight, Bent],
            RuleId::Proximity(_) => &[Together, Apart],
            RuleId::Contact(_) => &[Contact, NoContact],
            RuleId::ThumbDirection => &[Up, Down],
            RuleId::PalmOrientation => &[Left, Right, Down, Up, Inward, Outward],
        }
    }

    fn admits(self, state: RuleState) -> bool {
        state == RuleState::Unsure || self.states().contains(&state)
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleId::Flexion(finger) => write!(f, "flexion:{finger}"),
            RuleId::Proximity(pair) => write!(f, "proximity:{}", pair.name()),
            RuleId::Contact(finger) => write!(f, "contact:{finger}"),
            RuleId::ThumbDirection => f.write_str("thumb_direction"),
            RuleId::PalmOrientation => f.write_str("palm_orientation"),
        }
    }
}

impl FromStr for RuleId {
    type Err = TuneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || TuneError::UnknownRule(s.to_string());
        match s.split_once(':') {
            None => match s {
                "thumb_direction" => Ok(RuleId::ThumbDirection),
                "palm_orientation" => Ok(RuleId::PalmOrientation),
                _ => Err(unknown()),
            },
            Some(("flexion", finger)) => Ok(RuleId::Flexion(finger.parse().map_err(|_| unknown())?)),
            Some(("contact", finger)) => match finger.parse().map_err(|_| unknown())? {
                Finger::Thumb => Err(unknown()),
                f => Ok(RuleId::Contact(f)),
            },
            Some(("proximity", pair)) => FingerPair::ALL
                .into_iter()
                .find(|p| p.name() == pair)
                .map(RuleId::Proximity)
                .ok_or_else(unknown),
            _ => Err(unknown()),
        }
    }
}

/// Groups of rules that share one set of thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    FlexionThumb,
    FlexionFinger,
    Proximity,
    Contact,
    ThumbDirection,
    PalmOrientation,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::FlexionThumb,
        ParamGroup::FlexionFinger,
        ParamGroup::Proximity,
        ParamGroup::Contact,
        ParamGroup::ThumbDirection,
        ParamGroup::PalmOrientation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::FlexionThumb => "flexion_thumb",
            ParamGroup::FlexionFinger => "flexion_finger",
            ParamGroup::Proximity => "proximity",
            ParamGroup::Contact => "contact",
            ParamGroup::ThumbDirection => "thumb_direction",
            ParamGroup::PalmOrientation => "palm_orientation",
        }
    }

    pub fn is_paired(self) -> bool {
        !matches!(self, ParamGroup::ThumbDirection | ParamGroup::PalmOrientation)
    }

    /// Current parameters of this group in `th`.
    pub fn params_of(self, th: &RuleThresholds) -> GroupParams {
        match self {
            ParamGroup::FlexionThumb => GroupParams::Pair(th.flexion_thumb),
            ParamGroup::FlexionFinger => GroupParams::Pair(th.flexion_finger),
            ParamGroup::Proximity => GroupParams::Pair(th.proximity),
            ParamGroup::Contact => GroupParams::Pair(th.contact),
            ParamGroup::ThumbDirection => GroupParams::Angle(th.thumb_dir_angle),
            ParamGroup::PalmOrientation => GroupParams::Angle(th.palm_angle),
        }
    }

    /// Writes `params` into the matching fields of `th`.
    pub fn apply(self, params: GroupParams, th: &mut RuleThresholds) {
        match (self, params) {
            (ParamGroup::FlexionThumb, GroupParams::Pair(p)) => th.flexion_thumb = p,
            (ParamGroup::FlexionFinger, GroupParams::Pair(p)) => th.flexion_finger = p,
            (ParamGroup::Proximity, GroupParams::Pair(p)) => th.proximity = p,
            (ParamGroup::Contact, GroupParams::Pair(p)) => th.contact = p,
            (ParamGroup::ThumbDirection, GroupParams::Angle(a)) => th.thumb_dir_angle = a,
            (ParamGroup::PalmOrientation, GroupParams::Angle(a)) => th.palm_angle = a,
            (group, params) => panic!("{params:?} do not fit group {group}"),
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rule output or label state, shared across rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleState {
    Straight,
    Bent,
    Together,
    Apart,
    Contact,
    NoContact,
    Up,
    Down,
    Left,
    Right,
    Inward,
    Outward,
    Unsure,
}

impl fmt::Display for RuleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

/// Set of acceptable states for one rule on one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    acceptable_states: Vec<RuleState>,
}

impl GroundTruthLabel {
    pub fn new(states: impl IntoIterator<Item = RuleState>) -> Option<Self> {
        let mut acceptable_states: Vec<RuleState> = states.into_iter().collect();
        acceptable_states.sort();
        acceptable_states.dedup();
        (!acceptable_states.is_empty()).then_some(Self { acceptable_states })
    }

    pub fn single(state: RuleState) -> Self {
        Self {
            acceptable_states: vec![state],
        }
    }

    pub fn states(&self) -> &[RuleState] {
        &self.acceptable_states
    }

    pub fn is_ambiguous(&self) -> bool {
        self.acceptable_states.len() >= 2
    }

    pub fn accepts(&self, state: RuleState) -> bool {
        self.acceptable_states.contains(&state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Assessment {
    Correct,
    Error,
    Unsure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub correct: f64,
    pub unsure: f64,
    pub error: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            correct: 0.0,
            unsure: 0.2,
            error: 1.0,
        }
    }
}

impl LossWeights {
    /// Requires `0 ≤ correct < unsure < error`.
    pub fn is_ordered(&self) -> bool {
        0.0 <= self.correct && self.correct < self.unsure && self.unsure < self.error
    }

    pub fn loss(&self, a: Assessment) -> f64 {
        match a {
            Assessment::Correct => self.correct,
            Assessment::Unsure => self.unsure,
            Assessment::Error => self.error,
        }
    }
}

pub fn assess(rule: RuleId, prediction: RuleState, label: &GroundTruthLabel) -> Result<Assessment, TuneError> {
    for state in std::iter::once(prediction).chain(label.states().iter().copied()) {
        if !rule.admits(state) {
            return Err(TuneError::StateSpaceMismatch { rule, state });
        }
    }
    Ok(if prediction == RuleState::Unsure {
        Assessment::Unsure
    } else if label.accepts(prediction) {
        Assessment::Correct
    } else {
        Assessment::Error
    })
}

pub fn average_loss(assessments: &[Assessment], w: &LossWeights) -> Result<f64, TuneError> {
    if assessments.is_empty() {
        return Err(TuneError::EmptyDataset);
    }
    Ok(assessments.iter().map(|a| w.loss(*a)).sum::<f64>() / assessments.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub rule: RuleId,
    pub frame: HandLandmarkFrame,
    pub label: GroundTruthLabel,
}

/// Parameters of one group: a `(low, high)` band or a single angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroupParams {
    Pair(ThresholdPair),
    Angle(f64),
}

impl GroupParams {
    pub fn values(&self) -> Vec<f64> {
        match self {
            GroupParams::Pair(p) => vec![p.low, p.high],
            GroupParams::Angle(a) => vec![*a],
        }
    }

    fn lex_key(&self) -> (f64, f64) {
        match self {
            GroupParams::Pair(p) => (p.low, p.high),
            GroupParams::Angle(a) => (*a, 0.0),
        }
    }
}

/// Threshold-independent part of a rule evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Measure {
    Scalar(Option<f64>),
    Direction(Option<(RuleState, f64)>),
}

fn measure(rule: RuleId, frame: &HandLandmarkFrame, base: &RuleThresholds) -> Measure {
    let finite = |v: f64| v.is_finite().then_some(v);
    match rule {
        RuleId::Flexion(f) => Measure::Scalar(flexion_curl(frame, f)),
        RuleId::Proximity(p) => Measure::Scalar(finite(proximity_distance(frame, p, base.distance_mode))),
        RuleId::Contact(f) => Measure::Scalar(finite(contact_distance(frame, f, base.distance_mode))),
        RuleId::ThumbDirection => {
            if flexion(frame, Finger::Thumb, base) != ThreeWay::Positive {
                return Measure::Direction(None);
            }
            Measure::Direction(thumb_direction_measure(frame).map(|(d, a)| {
                let state = match d {
                    ThumbDirection::Up => RuleState::Up,
                    ThumbDirection::Down => RuleState::Down,
                    ThumbDirection::Unsure => RuleState::Unsure,
                };
                (state, a)
            }))
        }
        RuleId::PalmOrientation => Measure::Direction(palm_orientation_measure(frame).and_then(|(o, a)| {
            let state = match o {
                PalmOrientation::Left => RuleState::Left,
                PalmOrientation::Right => RuleState::Right,
                PalmOrientation::Down => RuleState::Down,
                PalmOrientation::Up => RuleState::Up,
                PalmOrientation::Inward | PalmOrientation::Outward if !frame.has_depth => return None,
                PalmOrientation::Inward => RuleState::Inward,
                PalmOrientation::Outward => RuleState::Outward,
                PalmOrientation::Unknown => return None,
            };
            Some((state, a))
        })),
    }
}

fn classify(rule: RuleId, m: Measure, params: GroupParams) -> RuleState {
    match (m, params) {
        (Measure::Scalar(v), GroupParams::Pair(pair)) => {
            let [pos, neg] = [rule.states()[0], rule.states()[1]];
            match ThreeWay::decide(v, pair) {
                ThreeWay::Positive => pos,
                ThreeWay::Negative => neg,
                ThreeWay::Unsure => RuleState::Unsure,
            }
        }
        (Measure::Direction(Some((state, angle))), GroupParams::Angle(th)) if angle <= th => state,
        _ => RuleState::Unsure,
    }
}

/// Rule output for one sample under the given thresholds.
pub fn predict(rule: RuleId, frame: &HandLandmarkFrame, th: &RuleThresholds) -> RuleState {
    classify(rule, measure(rule, frame, th), rule.group().params_of(th))
}

/// Correct / error / unsure tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub correct: usize,
    pub error: usize,
    pub unsure: usize,
}

impl OutcomeCounts {
    pub fn total(&self) -> usize {
        self.correct + self.error + self.unsure
    }

    fn add(&mut self, a: Assessment) {
        match a {
            Assessment::Correct => self.correct += 1,
            Assessment::Error => self.error += 1,
            Assessment::Unsure => self.unsure += 1,
        }
    }

    pub fn loss(&self, w: &LossWeights) -> f64 {
        let n = self.total().max(1) as f64;
        (self.correct as f64 * w.correct + self.unsure as f64 * w.unsure + self.error as f64 * w.error) / n
    }

    pub fn rate(&self, a: Assessment) -> f64 {
        let n = self.total().max(1) as f64;
        match a {
            Assessment::Correct => self.correct as f64 / n,
            Assessment::Error => self.error as f64 / n,
            Assessment::Unsure => self.unsure as f64 / n,
        }
    }
}

/// Inclusive `min..=max` range sampled every `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRange {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl AxisRange {
    pub const fn new(min: f64, max: f64, step: f64) -> Self {
        Self { min, max, step }
    }

    pub fn values(&self) -> Vec<f64> {
        if !(self.step > 0.0 && self.min.is_finite() && self.max.is_finite()) || self.max < self.min {
            return Vec::new();
        }
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        (0..n)
            .map(|i| ((self.min + i as f64 * self.step) * 1e9).round() / 1e9)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGrid {
    pub low: AxisRange,
    pub high: AxisRange,
}

impl PairGrid {
    pub const fn square(range: AxisRange) -> Self {
        Self { low: range, high: range }
    }
}

/// Search ranges per parameter group. Paired cells only include `low < high`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub flexion_thumb: PairGrid,
    pub flexion_finger: PairGrid,
    pub proximity: PairGrid,
    pub contact: PairGrid,
    pub thumb_dir_angle: AxisRange,
    pub palm_angle: AxisRange,
}

impl Default for GridSpec {
    fn default() -> Self {
        let degrees = PairGrid::square(AxisRange::new(1.0, 180.0, 1.0));
        let distance = PairGrid::square(AxisRange::new(0.001, 0.2, 0.001));
        let angle = AxisRange::new(1.0, 90.0, 1.0);
        Self {
            flexion_thumb: degrees,
            flexion_finger: degrees,
            proximity: distance,
            contact: distance,
            thumb_dir_angle: angle,
            palm_angle: angle,
        }
    }
}

impl GridSpec {
    pub fn cells(&self, group: ParamGroup) -> Vec<GroupParams> {
        let pair = |g: &PairGrid| {
            let highs = g.high.values();
            g.low
                .values()
                .into_iter()
                .flat_map(|l| {
                    highs
                        .iter()
                        .filter(move |h| **h > l)
                        .map(move |h| GroupParams::Pair(ThresholdPair::new(l, *h)))
                })
                .collect()
        };
        let single = |r: &AxisRange| r.values().into_iter().map(GroupParams::Angle).collect();
        match group {
            ParamGroup::FlexionThumb => pair(&self.flexion_thumb),
            ParamGroup::FlexionFinger => pair(&self.flexion_finger),
            ParamGroup::Proximity => pair(&self.proximity),
            ParamGroup::Contact => pair(&self.contact),
            ParamGroup::ThumbDirection => single(&self.thumb_dir_angle),
            ParamGroup::PalmOrientation => single(&self.palm_angle),
        }
    }
}

/// Best cell of a grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupOptimum {
    pub group: ParamGroup,
    pub params: GroupParams,
    pub loss: f64,
    pub counts: OutcomeCounts,
}

/// Precomputed measurements for repeated evaluation under many cells.
pub struct MeasuredSet {
    group: ParamGroup,
    items: Vec<(RuleId, Measure, GroundTruthLabel)>,
}

impl MeasuredSet {
    /// Validates the samples for `group` and measures them once.
    pub fn new(samples: &[LabeledSample], group: ParamGroup, base: &RuleThresholds) -> Result<Self, TuneError> {
        if samples.is_empty() {
            return Err(TuneError::EmptyDataset);
        }
        let mut items = Vec::with_capacity(samples.len());
        for (index, s) in samples.iter().enumerate() {
            if s.rule.group() != group {
                return Err(TuneError::RuleNotInGroup { rule: s.rule, group });
            }
            if s.label.is_ambiguous() {
                return Err(TuneError::AmbiguousLabelPresent { index });
            }
            if let Some(state) = s.label.states().iter().find(|st| !s.rule.admits(**st)) {
                return Err(TuneError::StateSpaceMismatch { rule: s.rule, state: *state });
            }
            items.push((s.rule, measure(s.rule, &s.frame, base), s.label.clone()));
        }
        Ok(Self { group, items })
    }

    pub fn evaluate(&self, params: GroupParams) -> OutcomeCounts {
        let mut counts = OutcomeCounts::default();
        for (rule, m, label) in &self.items {
            let prediction = classify(*rule, *m, params);
            counts.add(assess(*rule, prediction, label).expect("state spaces checked at construction"));
        }
        counts
    }

    pub fn predictions(&self, params: GroupParams) -> Vec<RuleState> {
        self.items.iter().map(|(r, m, _)| classify(*r, *m, params)).collect()
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }
}

fn better(a: &GroupOptimum, b: &GroupOptimum) -> bool {
    match a.loss.total_cmp(&b.loss) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            let (ka, kb) = (a.params.lex_key(), b.params.lex_key());
            ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).is_lt()
        }
    }
}

/// Exhaustive search over the grid cells of one group. Ties in loss go to
/// the lexicographically smallest `(low, high)`; the result does not depend
/// on evaluation order.
pub fn grid_search(
    samples: &[LabeledSample],
    group: ParamGroup,
    grid: &GridSpec,
    weights: &LossWeights,
    base: &RuleThresholds,
) -> Result<GroupOptimum, TuneError> {
    let set = MeasuredSet::new(samples, group, base)?;
    let cells = grid.cells(group);
    if cells.is_empty() {
        return Err(TuneError::EmptyGrid(group));
    }
    cells
        .into_par_iter()
        .map(|params| {
            let counts = set.evaluate(params);
            GroupOptimum {
                group,
                params,
                loss: counts.loss(weights),
                counts,
            }
        })
        .reduce_with(|a, b| if better(&b, &a) { b } else { a })
        .ok_or(TuneError::EmptyGrid(group))
}

/// Splits off samples with more than one acceptable state.
pub fn split_ambiguous(samples: Vec<LabeledSample>) -> (Vec<LabeledSample>, usize) {
    let before = samples.len();
    let usable: Vec<_> = samples.into_iter().filter(|s| !s.label.is_ambiguous()).collect();
    let dropped = before - usable.len();
    (usable, dropped)
}

pub fn partition_by_group(samples: Vec<LabeledSample>) -> BTreeMap<ParamGroup, Vec<LabeledSample>> {
    let mut out: BTreeMap<ParamGroup, Vec<LabeledSample>> = BTreeMap::new();
    for s in samples {
        out.entry(s.rule.group()).or_default().push(s);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation; zeros for an empty slice.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleReport {
    pub rule: ParamGroup,
    pub parameters: Vec<f64>,
    pub loss: f64,
    pub error: f64,
    pub unsure: f64,
    pub correct: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallReport {
    pub error: MeanStd,
    pub unsure: MeanStd,
    pub correct: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub thresholds: RuleThresholds,
    pub rules: Vec<RuleReport>,
    pub overall: OverallReport,
    pub ambiguous_filtered: usize,
}

fn rule_report(optimum: &GroupOptimum) -> RuleReport {
    RuleReport {
        rule: optimum.group,
        parameters: optimum.params.values(),
        loss: optimum.loss,
        error: optimum.counts.rate(Assessment::Error),
        unsure: optimum.counts.rate(Assessment::Unsure),
        correct: optimum.counts.rate(Assessment::Correct),
        samples: optimum.counts.total(),
    }
}

fn overall(rules: &[RuleReport]) -> OverallReport {
    let col = |f: fn(&RuleReport) -> f64| MeanStd::of(&rules.iter().map(f).collect::<Vec<_>>());
    OverallReport {
        error: col(|r| r.error),
        unsure: col(|r| r.unsure),
        correct: col(|r| r.correct),
    }
}

/// Tunes every group that has samples, starting from `base`. Groups are tuned
/// in a fixed order so thumb direction sees the tuned thumb flexion band.
pub fn tune(
    datasets: &BTreeMap<ParamGroup, Vec<LabeledSample>>,
    grid: &GridSpec,
    weights: &LossWeights,
    base: &RuleThresholds,
    ambiguous_filtered: usize,
) -> Result<TuningReport, TuneError> {
    if datasets.values().all(Vec::is_empty) {
        return Err(TuneError::EmptyDataset);
    }
    let mut thresholds = *base;
    let mut rules = Vec::new();
    for group in ParamGroup::ALL {
        let Some(samples) = datasets.get(&group).filter(|s| !s.is_empty()) else {
            continue;
        };
        let optimum = grid_search(samples, group, grid, weights, &thresholds)?;
        group.apply(optimum.params, &mut thresholds);
        rules.push(rule_report(&optimum));
    }
    Ok(TuningReport {
        thresholds,
        overall: overall(&rules),
        rules,
        ambiguous_filtered,
    })
}

/// Scores fixed thresholds per group, in the same report layout.
pub fn evaluate_thresholds(
    datasets: &BTreeMap<ParamGroup, Vec<LabeledSample>>,
    th: &RuleThresholds,
    weights: &LossWeights,
) -> Result<Vec<RuleReport>, TuneError> {
    let mut out = Vec::new();
    for (group, samples) in datasets {
        if samples.is_empty() {
            continue;
        }
        let set = MeasuredSet::new(samples, *group, th)?;
        let params = group.params_of(th);
        let counts = set.evaluate(params);
        out.push(rule_report(&GroupOptimum {
            group: *group,
            params,
            loss: counts.loss(weights),
            counts,
        }));
    }
    Ok(out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    rule: String,
    acceptable_states: Vec<RuleState>,
    #[serde(default)]
    frame: Option<InlineFrame>,
    #[serde(default)]
    stream: Option<String>,
    #[serde(default)]
    frame_index: Option<usize>,
}

#[derive(Deserialize)]
struct InlineFrame {
    #[serde(default = "default_handedness")]
    handedness: Handedness,
    #[serde(default)]
    t: f64,
    lm: Vec<Vec<f64>>,
}

fn default_handedness() -> Handedness {
    Handedness::Right
}

/// Parses a labeled dataset in JSON-lines form. Each line holds `rule`,
/// `acceptable_states` and either an inline `frame` (`{"lm": [...]}`) or a
/// `stream` path plus `frame_index`; stream paths resolve against `base_dir`.
pub fn parse_labeled_dataset(text: &str, base_dir: &Path) -> Result<Vec<LabeledSample>, TuneError> {
    let mut streams: HashMap<PathBuf, Vec<HandLandmarkFrame>> = HashMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |message: String| TuneError::BadDataset { line, message };
        let entry: DatasetLine = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
        let rule: RuleId = entry.rule.parse().map_err(|e: TuneError| bad(e.to_string()))?;
        let label = GroundTruthLabel::new(entry.acceptable_states).ok_or_else(|| bad("acceptable_states is empty".into()))?;
        let frame = match (entry.frame, entry.stream) {
            (Some(f), None) => HandLandmarkFrame::from_rows(0, f.t, f.handedness, &f.lm).map_err(|e| bad(e.to_string()))?,
            (None, Some(path)) => {
                let path = base_dir.join(path);
                if !streams.contains_key(&path) {
                    let bytes = std::fs::read(&path).map_err(|source| TuneError::Io { path: path.clone(), source })?;
                    let stream = parse_landmark_stream(&bytes).map_err(|e| bad(e.to_string()))?;
                    streams.insert(path.clone(), stream.frames);
                }
                let index = entry.frame_index.unwrap_or(0);
                streams[&path]
                    .get(index)
                    .cloned()
                    .ok_or_else(|| bad(format!("frame_index {index} out of range")))?
            }
            _ => return Err(bad("exactly one of `frame` or `stream` is required".into())),
        };
        if let Some(state) = label.states().iter().find(|s| !rule.admits(**s)) {
            return Err(bad(format!("state `{state}` is not a state of rule {rule}")));
        }
        out.push(LabeledSample { rule, frame, label });
    }
    Ok(out)
}

pub fn load_labeled_dataset(path: &Path) -> Result<Vec<LabeledSample>, TuneError> {
    let text = std::fs::read_to_string(path).map_err(|source| TuneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_labeled_dataset(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Serializes one sample as a dataset line with an inline frame.
pub fn dataset_line(sample: &LabeledSample) -> String {
    serde_json::json!({
        "rule": sample.rule.to_string(),
        "acceptable_states": sample.label.states(),
        "frame": {
            "handedness": sample.frame.handedness,
            "t": sample.frame.timestamp,
            "lm": sample.frame.to_rows(),
        },
    })
    .to_string()
}
