//! Evaluation over a task manifest: context settings, repetitions, Top-k
//! metrics and the uniform random-guess baseline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use crate::agents::ContextSetting;
use crate::agents::{
    describe_gesture, run_inference_session, AgentError, NegativeReason, Outcome, PromptSet, SessionConfig,
    Transcript,
};
use crate::context::{CalculatorRegistry, ContextLibrary, ContextType, EXTERNAL, FUNCTION_LIST, GAZE, HISTORY};
use crate::encoder::{encode_stream, SegmentationConfig};
use crate::landmarks::parse_landmark_stream;
use crate::rules::RuleThresholds;
use crate::transport::ChatBackend;
use crate::tuner::MeanStd;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("task `{task}`: {message}")]
    Task { task: String, message: String },
    #[error("a task has an empty function list")]
    NoFunctions,
}

/// Inline JSON or a path (relative to the manifest) to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Inline {
    Path(String),
    Value(Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    id: String,
    scenario: String,
    stream: String,
    function_list: Inline,
    #[serde(default)]
    gaze: Option<Inline>,
    #[serde(default)]
    history: Option<Inline>,
    #[serde(default)]
    external: Option<Vec<String>>,
    ground_truth: String,
    #[serde(default)]
    fixtures: Option<String>,
}

/// One grounding task with its files resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub id: String,
    pub scenario: String,
    pub stream: PathBuf,
    pub library: ContextLibrary,
    pub ground_truth: String,
    /// Per-task scripted fixtures, if the manifest names them.
    pub fixtures: Option<PathBuf>,
}

impl TaskRecord {
    pub fn function_count(&self) -> usize {
        self.library.function_entries().map(|f| f.len()).unwrap_or(0)
    }
}

const FUNCTION_DESC: &str = "Interface functions available now. Each has an `id`, a `name`, the `device` it belongs to and the `location` of that device.";
const GAZE_DESC: &str = "Recent gaze samples of the user (`t` in seconds, position in scene coordinates). The `gaze_target` calculator names the device looked at during the last second.";
const HISTORY_DESC: &str = "The user's recent interactions with the interface, oldest first.";
const EXTERNAL_DESC: &str = "Facts about the environment at the time of the gesture.";

fn resolve_inline(v: &Inline, base: &Path) -> Result<Value, String> {
    match v {
        Inline::Value(v) => Ok(v.clone()),
        Inline::Path(p) => {
            let path = base.join(p);
            let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
        }
    }
}

fn build_task(entry: TaskEntry, base: &Path) -> Result<TaskRecord, EvalError> {
    let fail = |message: String| EvalError::Task {
        task: entry.id.clone(),
        message,
    };
    let mut lib = ContextLibrary::new();
    let add = |lib: &mut ContextLibrary, ctx: ContextType| lib.add_context_type(ctx).map_err(|e| fail(e.to_string()));
    add(&mut lib, ContextType::new(FUNCTION_LIST, FUNCTION_DESC, resolve_inline(&entry.function_list, base).map_err(fail)?))?;
    if let Some(g) = &entry.gaze {
        let values = resolve_inline(g, base).map_err(fail)?;
        add(&mut lib, ContextType::new(GAZE, GAZE_DESC, values).with_calculator("gaze_target"))?;
    }
    if let Some(h) = &entry.history {
        add(&mut lib, ContextType::new(HISTORY, HISTORY_DESC, resolve_inline(h, base).map_err(fail)?))?;
    }
    if let Some(x) = &entry.external {
        add(&mut lib, ContextType::new(EXTERNAL, EXTERNAL_DESC, json!(x)))?;
    }
    let functions = lib.function_entries().map_err(|e| fail(e.to_string()))?;
    if functions.is_empty() {
        return Err(fail("function list is empty".into()));
    }
    if !functions.iter().any(|f| f.id == entry.ground_truth) {
        return Err(fail(format!("ground truth `{}` is not in the function list", entry.ground_truth)));
    }
    let stream = base.join(&entry.stream);
    if !stream.is_file() {
        return Err(fail(format!("stream {} not found", stream.display())));
    }
    let fixtures = entry.fixtures.as_ref().map(|f| base.join(f));
    if let Some(f) = &fixtures {
        if !f.is_file() {
            return Err(fail(format!("fixtures {} not found", f.display())));
        }
    }
    Ok(TaskRecord {
        id: entry.id,
        scenario: entry.scenario,
        stream,
        library: lib,
        ground_truth: entry.ground_truth,
        fixtures,
    })
}

/// Reads a manifest: a JSON list of tasks with paths relative to the file.
pub fn load_manifest(path: &Path) -> Result<Vec<TaskRecord>, EvalError> {
    let bad = |message: String| EvalError::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let entries: Vec<TaskEntry> = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if entries.is_empty() {
        return Err(bad("no tasks".into()));
    }
    let mut ids = std::collections::HashSet::new();
    if let Some(dup) = entries.iter().find(|e| !ids.insert(e.id.clone())) {
        return Err(bad(format!("duplicate task id `{}`", dup.id)));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    entries.into_iter().map(|e| build_task(e, base)).collect()
}

/// 1-based position of `truth` in the conclusion, if present.
pub fn topk_rank(outcome: &Outcome, truth: &str) -> Option<usize> {
    outcome.ranked()?.iter().position(|id| id == truth).map(|i| i + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: MeanStd,
    pub top3: MeanStd,
    pub top5: MeanStd,
    pub negative: MeanStd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Rates {
    top1: f64,
    top3: f64,
    top5: f64,
}

fn rates(ranks: &[Option<usize>]) -> Rates {
    let n = ranks.len().max(1) as f64;
    let within = |k: usize| ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / n;
    Rates {
        top1: within(1),
        top3: within(3),
        top5: within(5),
    }
}

fn aggregate(reps: &[Rates]) -> Metrics {
    let col = |f: fn(&Rates) -> f64| MeanStd::of(&reps.iter().map(f).collect::<Vec<_>>());
    let m = Metrics {
        top1: col(|r| r.top1),
        top3: col(|r| r.top3),
        top5: col(|r| r.top5),
        negative: col(|r| 1.0 - r.top5),
    };
    debug_assert!(m.top1.mean <= m.top3.mean + 1e-12 && m.top3.mean <= m.top5.mean + 1e-12);
    debug_assert!((m.negative.mean + m.top5.mean - 1.0).abs() < 1e-9);
    m
}

/// Expected Top-k of uniform guessing: mean over tasks of `min(k, N)/N`.
pub fn random_guess_baseline(function_counts: &[usize]) -> Result<Metrics, EvalError> {
    if function_counts.is_empty() || function_counts.contains(&0) {
        return Err(EvalError::NoFunctions);
    }
    let n = function_counts.len() as f64;
    let expected = |k: usize| function_counts.iter().map(|&c| k.min(c) as f64 / c as f64).sum::<f64>() / n;
    let exact = |v: f64| MeanStd { mean: v, std: 0.0 };
    Ok(Metrics {
        top1: exact(expected(1)),
        top3: exact(expected(3)),
        top5: exact(expected(5)),
        negative: exact(1.0 - expected(5)),
    })
}

/// Everything needed to run one task end to end.
/// Builds a fresh backend for one task run.
pub type BackendFactory<'f> = dyn Fn(&TaskRecord) -> Result<Box<dyn ChatBackend>, String> + Sync + 'f;

pub struct Pipeline<'a> {
    pub prompts: &'a PromptSet,
    pub thresholds: RuleThresholds,
    pub segmentation: SegmentationConfig,
    pub registry: &'a CalculatorRegistry,
    pub session: SessionConfig,
    pub backend: &'a BackendFactory<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub task: String,
    pub scenario: String,
    pub setting: ContextSetting,
    pub repetition: usize,
    pub outcome: Outcome,
    pub rank: Option<usize>,
    pub rounds: u32,
    pub questions: u32,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency: f64,
    pub tokens_estimated: bool,
    /// Why the run was scored Negative without a completed session.
    pub failure: Option<String>,
}

impl SessionRecord {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

pub struct TaskRun {
    pub record: SessionRecord,
    pub transcript: Transcript,
}

/// Runs one task. Failures of any stage become a Negative outcome with the
/// cause attached.
pub fn run_task(task: &TaskRecord, setting: ContextSetting, repetition: usize, p: &Pipeline<'_>) -> TaskRun {
    let mut record = SessionRecord {
        task: task.id.clone(),
        scenario: task.scenario.clone(),
        setting,
        repetition,
        outcome: Outcome::Negative(NegativeReason::NoConclusion),
        rank: None,
        rounds: 0,
        questions: 0,
        input_tokens: 0,
        output_tokens: 0,
        latency: 0.0,
        tokens_estimated: false,
        failure: None,
    };
    let mut transcript = Transcript::default();
    let mut estimated = false;
    let result: Result<(), String> = (|| {
        let bytes = std::fs::read(&task.stream).map_err(|e| format!("{}: {e}", task.stream.display()))?;
        let stream = parse_landmark_stream(&bytes).map_err(|e| e.to_string())?;
        let matrices = encode_stream(&stream, &p.segmentation, &p.thresholds).map_err(|e| e.to_string())?;
        let matrix = matrices.first().ok_or("no gesture window in stream")?;
        if matrices.len() > 1 {
            log::info!("task {}: {} windows, using the first", task.id, matrices.len());
        }
        let llm = (p.backend)(task)?;
        estimated = llm.is_deterministic();
        let session = SessionConfig {
            setting,
            ..p.session.clone()
        };
        let description = describe_gesture(matrix, p.prompts, llm.as_ref(), &session, &mut transcript).map_err(|e| match e {
            AgentError::Parse(m) => format!("description: {m}"),
            other => other.to_string(),
        })?;
        let lib = &task.library;
        match run_inference_session(&description, lib, p.registry, p.prompts, llm.as_ref(), &session, std::mem::take(&mut transcript)) {
            Ok(r) => {
                record.rank = topk_rank(&r.outcome, &task.ground_truth);
                record.outcome = r.outcome;
                record.rounds = r.rounds;
                record.questions = r.questions;
                transcript = r.transcript;
                Ok(())
            }
            Err(f) => {
                transcript = f.transcript;
                Err(f.error.to_string())
            }
        }
    })();
    if let Err(cause) = result {
        log::warn!("task {} ({setting}, repetition {repetition}) scored Negative: {cause}", task.id);
        record.failure = Some(cause);
    }
    let usage = transcript.usage();
    record.input_tokens = usage.input_tokens;
    record.output_tokens = usage.output_tokens;
    record.latency = usage.latency;
    record.tokens_estimated = estimated;
    TaskRun { record, transcript }
}

pub struct SettingResult {
    pub setting: ContextSetting,
    pub metrics: Metrics,
    pub runs: Vec<TaskRun>,
}

impl SettingResult {
    pub fn completed(&self) -> usize {
        self.runs.iter().filter(|r| r.record.completed()).count()
    }
}

/// Runs every task `repetitions` times under one setting. Tasks of a
/// repetition run in parallel; results keep manifest order.
pub fn run_setting(tasks: &[TaskRecord], setting: ContextSetting, repetitions: usize, p: &Pipeline<'_>) -> SettingResult {
    let repetitions = repetitions.max(1);
    let mut runs = Vec::with_capacity(tasks.len() * repetitions);
    let mut reps = Vec::with_capacity(repetitions);
    for rep in 0..repetitions {
        let batch: Vec<TaskRun> = tasks.par_iter().map(|t| run_task(t, setting, rep, p)).collect();
        let ranks: Vec<Option<usize>> = batch.iter().map(|r| r.record.rank).collect();
        reps.push(rates(&ranks));
        runs.extend(batch);
    }
    SettingResult {
        setting,
        metrics: aggregate(&reps),
        runs,
    }
}

/// Metrics from precomputed ranks, one list per repetition.
pub fn metrics_from_ranks(per_repetition: &[Vec<Option<usize>>]) -> Metrics {
    aggregate(&per_repetition.iter().map(|r| rates(r)).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub mean_rounds: f64,
    pub mean_input_tokens: f64,
    pub mean_output_tokens: f64,
    pub mean_total_tokens: f64,
    pub mean_latency: f64,
    pub tokens_estimated: bool,
}

/// Per-session means over completed sessions; `None` when there are none.
pub fn cost_summary(records: &[SessionRecord]) -> Option<CostSummary> {
    let done: Vec<&SessionRecord> = records.iter().filter(|r| r.completed()).collect();
    if done.is_empty() {
        return None;
    }
    let n = done.len() as f64;
    let mean = |f: fn(&SessionRecord) -> f64| done.iter().map(|r| f(r)).sum::<f64>() / n;
    Some(CostSummary {
        mean_rounds: mean(|r| r.rounds as f64),
        mean_input_tokens: mean(|r| r.input_tokens as f64),
        mean_output_tokens: mean(|r| r.output_tokens as f64),
        mean_total_tokens: mean(|r| (r.input_tokens + r.output_tokens) as f64),
        mean_latency: mean(|r| r.latency),
        tokens_estimated: done.iter().any(|r| r.tokens_estimated),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub setting: ContextSetting,
    pub metrics: Metrics,
    pub tasks: usize,
    /// Sessions run: tasks times repetitions.
    pub sessions: usize,
    /// Sessions that reached an outcome without a task failure.
    pub completed: usize,
    pub cost: Option<CostSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub repetitions: usize,
    pub settings: Vec<SettingReport>,
    pub random_guess: Metrics,
    pub sessions: Vec<SessionRecord>,
}

impl EvalReport {
    pub fn build(results: &[SettingResult], tasks: &[TaskRecord], repetitions: usize) -> Result<Self, EvalError> {
        let counts: Vec<usize> = tasks.iter().map(TaskRecord::function_count).collect();
        let settings = results
            .iter()
            .map(|r| {
                let records: Vec<SessionRecord> = r.runs.iter().map(|t| t.record.clone()).collect();
                SettingReport {
                    setting: r.setting,
                    metrics: r.metrics,
                    tasks: tasks.len(),
                    sessions: r.runs.len(),
                    completed: r.completed(),
                    cost: cost_summary(&records),
                }
            })
            .collect();
        Ok(Self {
            repetitions,
            settings,
            random_guess: random_guess_baseline(&counts)?,
            sessions: results.iter().flat_map(|r| r.runs.iter().map(|t| t.record.clone())).collect(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Table of percentages, one row per setting plus the random baseline.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "setting,top1_mean,top1_std,top3_mean,top3_std,top5_mean,top5_std,negative_mean,negative_std,tasks,sessions,completed,mean_rounds,mean_input_tokens,mean_output_tokens,mean_latency_s,tokens\n",
        );
        let pct = |m: &MeanStd| format!("{:.2},{:.2}", 100.0 * m.mean, 100.0 * m.std);
        let metrics = |m: &Metrics| format!("{},{},{},{}", pct(&m.top1), pct(&m.top3), pct(&m.top5), pct(&m.negative));
        for s in &self.settings {
            let cost = match &s.cost {
                Some(c) => format!(
                    "{:.2},{:.1},{:.1},{:.3},{}",
                    c.mean_rounds,
                    c.mean_input_tokens,
                    c.mean_output_tokens,
                    c.mean_latency,
                    if c.tokens_estimated { "estimated" } else { "reported" }
                ),
                None => "unavailable,unavailable,unavailable,unavailable,unavailable".into(),
            };
            let _ = writeln!(out, "{},{},{},{},{},{}", s.setting, metrics(&s.metrics), s.tasks, s.sessions, s.completed, cost);
        }
        let _ = writeln!(out, "random_guess,{},,,,,,,,", metrics(&self.random_guess));
        out
    }
}
