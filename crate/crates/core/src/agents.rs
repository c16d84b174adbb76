//! The three agents: matrix description, gesture inference and context
//! management, and the dialogue that ties them together.
//!
//! Model replies are parsed leniently (the first JSON object anywhere in the
//! text wins) and recorded strictly. A reply that cannot be parsed gets one
//! repair request with a format reminder; a second failure ends the session.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::context::{
    render_library_prompt, render_library_values, CalculatorRegistry, ContextError, ContextLibrary, FunctionEntry,
    EXTERNAL, FUNCTION_LIST, GAZE, HISTORY,
};
use crate::encoder::{render_movement_rows, render_pose_rows, GestureStateMatrix};
use crate::transport::{ChatBackend, ChatMessage, CompletionRequest, TransportError, UsageRecord, DEFAULT_MODEL};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("cannot parse model reply: {0}")]
    Parse(String),
    #[error("prompt error: {0}")]
    Prompt(String),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("invalid gesture state matrix: {0}")]
    Matrix(String),
}

const POSE_SECTIONS: &[&str] = &["Introduction", "Procedure", "Examples"];
const INFERENCE_SECTIONS: &[&str] = &["Introduction", "Requirements", "Prohibitions", "Output Format"];

/// The four prompt templates. `{{name}}` markers are bound at render time.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub pose: String,
    pub movement: String,
    pub inference: String,
    pub context: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            pose: include_str!("../assets/prompts/pose.md").to_string(),
            movement: include_str!("../assets/prompts/movement.md").to_string(),
            inference: include_str!("../assets/prompts/inference.md").to_string(),
            context: include_str!("../assets/prompts/context.md").to_string(),
        }
    }
}

fn section_body<'a>(text: &'a str, heading: &str) -> Option<&'a str> {
    let marker = format!("## {heading}\n");
    let start = if text.starts_with(&marker) {
        marker.len()
    } else {
        text.find(&format!("\n{marker}"))? + marker.len() + 1
    };
    let rest = &text[start..];
    Some(rest.find("\n## ").map_or(rest, |end| &rest[..end]))
}

fn numbered_items(body: &str) -> usize {
    body.lines()
        .filter(|l| {
            let digits = l.chars().take_while(char::is_ascii_digit).count();
            digits > 0 && l[digits..].starts_with(". ")
        })
        .count()
}

impl PromptSet {
    /// Defaults, with any of `pose.md`, `movement.md`, `inference.md` or
    /// `context.md` found in `dir` taking precedence.
    pub fn load_dir(dir: &Path) -> Result<Self, AgentError> {
        if !dir.is_dir() {
            return Err(AgentError::Prompt(format!("{} is not a directory", dir.display())));
        }
        let mut set = Self::default();
        for (file, slot) in [
            ("pose.md", &mut set.pose),
            ("movement.md", &mut set.movement),
            ("inference.md", &mut set.inference),
            ("context.md", &mut set.context),
        ] {
            let path = dir.join(file);
            if path.exists() {
                *slot = std::fs::read_to_string(&path)
                    .map_err(|e| AgentError::Prompt(format!("{}: {e}", path.display())))?;
            }
        }
        set.validate()?;
        Ok(set)
    }

    /// Checks section headings and the requirement and prohibition counts.
    pub fn validate(&self) -> Result<(), AgentError> {
        let need = |name: &str, text: &str, sections: &[&str]| -> Result<(), AgentError> {
            for s in sections {
                if section_body(text, s).is_none() {
                    return Err(AgentError::Prompt(format!("{name} prompt lacks a `## {s}` section")));
                }
            }
            Ok(())
        };
        need("pose", &self.pose, POSE_SECTIONS)?;
        need("movement", &self.movement, POSE_SECTIONS)?;
        need("inference", &self.inference, INFERENCE_SECTIONS)?;
        need("context", &self.context, INFERENCE_SECTIONS)?;
        for (name, text, req, proh) in [("inference", &self.inference, 7, 5), ("context", &self.context, 4, 2)] {
            let r = numbered_items(section_body(text, "Requirements").unwrap_or(""));
            let p = numbered_items(section_body(text, "Prohibitions").unwrap_or(""));
            if (r, p) != (req, proh) {
                return Err(AgentError::Prompt(format!(
                    "{name} prompt has {r} requirements and {p} prohibitions, expected {req} and {proh}"
                )));
            }
        }
        Ok(())
    }
}

/// Replaces `{{name}}` markers (lowercase identifiers) with their bindings.
/// Fails if the template uses a name with no binding; bound values are not
/// rescanned. Other brace forms such as `{{CALC:id}}` pass through.
pub fn render_template(template: &str, bindings: &[(&str, &str)]) -> Result<String, AgentError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(pos) = rest.find("{{") {
        out.push_str(&rest[..pos]);
        let after = &rest[pos + 2..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'))
            .unwrap_or(after.len());
        let name = &after[..name_len];
        if name_len > 0 && after[name_len..].starts_with("}}") {
            let value = bindings
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| AgentError::Prompt(format!("unbound template variable `{name}`")))?;
            out.push_str(value);
            rest = &after[name_len + 2..];
        } else {
            out.push_str("{{");
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// First JSON object embedded in `raw`, tolerating prose and code fences.
pub fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    let mut from = 0;
    while let Some(pos) = raw[from..].find('{') {
        let start = from + pos;
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
        from = start + 1;
    }
    None
}

fn non_empty_str<'a>(map: &'a Map<String, Value>, key: &str) -> Option<&'a str> {
    map.get(key).and_then(Value::as_str).map(str::trim).filter(|s| !s.is_empty())
}

/// A conclusion keeps at most this many ids.
pub const MAX_CONCLUSION: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnAction {
    Question(String),
    Conclusion(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceTurn {
    pub thought: String,
    pub action: TurnAction,
}

impl InferenceTurn {
    pub fn to_json(&self) -> Value {
        match &self.action {
            TurnAction::Question(q) => json!({"thought": self.thought, "question": q}),
            TurnAction::Conclusion(ids) => json!({"thought": self.thought, "conclusion": ids}),
        }
    }
}

/// Parses an inference reply. Conclusion ids may be strings or integers;
/// repeats keep their first position and the list is cut to five.
pub fn parse_inference_turn(raw: &str) -> Result<InferenceTurn, AgentError> {
    let map = extract_json_object(raw).ok_or_else(|| AgentError::Parse("no JSON object found".into()))?;
    let thought = non_empty_str(&map, "thought")
        .ok_or_else(|| AgentError::Parse("missing non-empty `thought`".into()))?
        .to_string();
    let action = match (map.get("question"), map.get("conclusion")) {
        (Some(_), Some(_)) => return Err(AgentError::Parse("both `question` and `conclusion` present".into())),
        (None, None) => return Err(AgentError::Parse("neither `question` nor `conclusion` present".into())),
        (Some(_), None) => TurnAction::Question(
            non_empty_str(&map, "question")
                .ok_or_else(|| AgentError::Parse("`question` must be a non-empty string".into()))?
                .to_string(),
        ),
        (None, Some(c)) => {
            let items = c
                .as_array()
                .ok_or_else(|| AgentError::Parse("`conclusion` must be a list".into()))?;
            let mut ids: Vec<String> = Vec::new();
            for item in items {
                let id = match item {
                    Value::String(s) if !s.trim().is_empty() => s.trim().to_string(),
                    Value::Number(n) if n.is_u64() || n.is_i64() => n.to_string(),
                    other => return Err(AgentError::Parse(format!("bad function id {other}"))),
                };
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            if ids.is_empty() {
                return Err(AgentError::Parse("`conclusion` is empty".into()));
            }
            ids.truncate(MAX_CONCLUSION);
            TurnAction::Conclusion(ids)
        }
    };
    Ok(InferenceTurn { thought, action })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextTurn {
    pub thought: String,
    pub answer: String,
}

pub fn parse_context_turn(raw: &str) -> Result<ContextTurn, AgentError> {
    let map = extract_json_object(raw).ok_or_else(|| AgentError::Parse("no JSON object found".into()))?;
    let answer = non_empty_str(&map, "answer")
        .ok_or_else(|| AgentError::Parse("missing non-empty `answer`".into()))?
        .to_string();
    let thought = non_empty_str(&map, "thought").unwrap_or_default().to_string();
    Ok(ContextTurn { thought, answer })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseDescription {
    pub candidate_gestures: String,
    /// Inclusive column range.
    pub time_span: (usize, usize),
}

/// Parses a pose reply for a matrix with `columns` columns; a span end past
/// the last column is clamped.
pub fn parse_pose_reply(raw: &str, columns: usize) -> Result<PoseDescription, AgentError> {
    let map = extract_json_object(raw).ok_or_else(|| AgentError::Parse("no JSON object found".into()))?;
    let candidate_gestures = match map.get("candidate_gestures") {
        Some(Value::String(s)) if !s.trim().is_empty() => s.trim().to_string(),
        Some(Value::Array(items)) if !items.is_empty() => items
            .iter()
            .map(|v| v.as_str().map(str::trim).filter(|s| !s.is_empty()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| AgentError::Parse("`candidate_gestures` items must be non-empty strings".into()))?
            .join("\n"),
        _ => return Err(AgentError::Parse("missing `candidate_gestures`".into())),
    };
    let span = map
        .get("time_span")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()?, a[1].as_u64()?)))
        .ok_or_else(|| AgentError::Parse("`time_span` must be two non-negative integers".into()))?;
    let last = columns.saturating_sub(1) as u64;
    if span.0 > span.1 {
        return Err(AgentError::Parse(format!("time_span [{}, {}] is reversed", span.0, span.1)));
    }
    if span.0 > last {
        return Err(AgentError::Parse(format!("time_span starts after the last column {last}")));
    }
    if span.1 > last {
        log::warn!("time_span [{}, {}] clamped to [{}, {last}]", span.0, span.1, span.0);
    }
    Ok(PoseDescription {
        candidate_gestures,
        time_span: (span.0 as usize, span.1.min(last) as usize),
    })
}

pub fn parse_movement_reply(raw: &str) -> Result<String, AgentError> {
    let map = extract_json_object(raw).ok_or_else(|| AgentError::Parse("no JSON object found".into()))?;
    non_empty_str(&map, "movement")
        .map(str::to_string)
        .ok_or_else(|| AgentError::Parse("missing non-empty `movement`".into()))
}

fn bullets(text: &str) -> impl Iterator<Item = String> + '_ {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| {
        let body = l.strip_prefix("- ").or_else(|| l.strip_prefix("* ")).unwrap_or(l);
        format!("- {}", body.trim())
    })
}

/// One bullet per pose line followed by the movement bullets.
pub fn compose_description(pose: &PoseDescription, movement: &str) -> String {
    bullets(&pose.candidate_gestures)
        .chain(bullets(movement))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSetting {
    Baseline,
    OnlyGaze,
    OnlyHistoryExternal,
    All,
}

impl ContextSetting {
    pub const ALL: [ContextSetting; 4] = [
        ContextSetting::Baseline,
        ContextSetting::OnlyGaze,
        ContextSetting::OnlyHistoryExternal,
        ContextSetting::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContextSetting::Baseline => "baseline",
            ContextSetting::OnlyGaze => "only_gaze",
            ContextSetting::OnlyHistoryExternal => "only_history_external",
            ContextSetting::All => "all",
        }
    }

    /// Whether a context type is visible under this setting. The function
    /// list is always visible.
    pub fn admits(self, name: &str) -> bool {
        name == FUNCTION_LIST
            || match self {
                ContextSetting::Baseline => false,
                ContextSetting::OnlyGaze => name == GAZE,
                ContextSetting::OnlyHistoryExternal => name == HISTORY || name == EXTERNAL,
                ContextSetting::All => true,
            }
    }

    pub fn apply(self, lib: &ContextLibrary) -> ContextLibrary {
        lib.filtered(|c| self.admits(&c.name))
    }
}

impl fmt::Display for ContextSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ContextSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ContextSetting::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown setting `{s}` (baseline, only_gaze, only_history_external, all)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub max_rounds: u32,
    /// Repair requests allowed per malformed reply.
    pub repair_retries: u32,
    pub setting: ContextSetting,
    pub model: String,
    pub temperature: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            max_rounds: 10,
            repair_retries: 1,
            setting: ContextSetting::All,
            model: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
        }
    }
}

/// One model call (or the closing outcome) as written to the transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub index: usize,
    pub role: String,
    pub raw: String,
    pub parsed: Value,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub latency: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub repair: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Transcript {
    pub turns: Vec<TranscriptTurn>,
}

impl Transcript {
    fn push(&mut self, role: &str, raw: String, parsed: Value, usage: UsageRecord, repair: bool) {
        self.turns.push(TranscriptTurn {
            index: self.turns.len(),
            role: role.to_string(),
            raw,
            parsed,
            input_tokens: usage.input_tokens,
            output_tokens: usage.output_tokens,
            latency: usage.latency,
            repair,
        });
    }

    /// Token and latency totals over every turn.
    pub fn usage(&self) -> UsageRecord {
        let mut total = UsageRecord::default();
        for t in &self.turns {
            total.input_tokens += t.input_tokens;
            total.output_tokens += t.output_tokens;
            total.latency += t.latency;
        }
        total
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for t in &self.turns {
            out.push_str(&serde_json::to_string(t).expect("turn serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let turns = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { turns })
    }
}

/// Sends `messages`, parsing the reply with `parse`; on a parse failure
/// appends the reply and a reminder, then tries again within the budget.
/// Returns `Ok(None)` when every attempt was malformed.
fn ask<T>(
    llm: &dyn ChatBackend,
    cfg: &SessionConfig,
    messages: &mut Vec<ChatMessage>,
    transcript: &mut Transcript,
    role: &str,
    parse: impl Fn(&str) -> Result<T, AgentError>,
    to_json: impl Fn(&T) -> Value,
) -> Result<Option<T>, AgentError> {
    for attempt in 0..=cfg.repair_retries {
        let mut req = CompletionRequest::new(messages.clone());
        req.model.clone_from(&cfg.model);
        req.temperature = cfg.temperature;
        let completion = llm.complete(&req)?;
        messages.push(ChatMessage::assistant(completion.text.clone()));
        match parse(&completion.text) {
            Ok(v) => {
                transcript.push(role, completion.text, to_json(&v), completion.usage, attempt > 0);
                return Ok(Some(v));
            }
            Err(e) => {
                log::warn!("{role} reply rejected: {e}");
                transcript.push(role, completion.text, json!({"error": e.to_string()}), completion.usage, attempt > 0);
                messages.push(ChatMessage::user(format!(
                    "Your reply could not be used: {e}. Reply again with only the JSON object described under Output Format."
                )));
            }
        }
    }
    Ok(None)
}

fn validate_matrix(m: &GestureStateMatrix) -> Result<(), AgentError> {
    m.validate().map_err(AgentError::Matrix)?;
    if m.columns() == 0 {
        return Err(AgentError::Matrix("matrix has no columns".into()));
    }
    Ok(())
}

/// Stage one of the description: candidate gestures and their time span.
pub fn describe_pose(
    matrix: &GestureStateMatrix,
    prompts: &PromptSet,
    llm: &dyn ChatBackend,
    cfg: &SessionConfig,
    transcript: &mut Transcript,
) -> Result<PoseDescription, AgentError> {
    validate_matrix(matrix)?;
    let columns = matrix.columns();
    let system = render_template(
        &prompts.pose,
        &[
            ("sample_interval", &format!("{}", matrix.sample_interval)),
            ("columns", &columns.to_string()),
        ],
    )?;
    let mut messages = vec![
        ChatMessage::system(system),
        ChatMessage::user(format!("Pose rows of the gesture state matrix:\n\n{}", render_pose_rows(matrix))),
    ];
    let parsed = ask(
        llm,
        cfg,
        &mut messages,
        transcript,
        "description_pose",
        |raw| parse_pose_reply(raw, columns),
        |p| json!({"candidate_gestures": p.candidate_gestures, "time_span": [p.time_span.0, p.time_span.1]}),
    )?;
    parsed.ok_or_else(|| AgentError::Parse("pose description malformed after repair".into()))
}

/// Stage two: movement of the hand center within `span`.
pub fn describe_movement(
    matrix: &GestureStateMatrix,
    span: (usize, usize),
    prompts: &PromptSet,
    llm: &dyn ChatBackend,
    cfg: &SessionConfig,
    transcript: &mut Transcript,
) -> Result<String, AgentError> {
    validate_matrix(matrix)?;
    if span.0 > span.1 || span.1 >= matrix.columns() {
        return Err(AgentError::Matrix(format!("span {span:?} outside {} columns", matrix.columns())));
    }
    let system = render_template(
        &prompts.movement,
        &[
            ("sample_interval", &format!("{}", matrix.sample_interval)),
            ("hand_width", &format!("{:.3}", matrix.hand_width)),
        ],
    )?;
    let mut messages = vec![
        ChatMessage::system(system),
        ChatMessage::user(movement_message(matrix, span)),
    ];
    let parsed = ask(llm, cfg, &mut messages, transcript, "description_movement", parse_movement_reply, |m| {
        json!({"movement": m})
    })?;
    parsed.ok_or_else(|| AgentError::Parse("movement description malformed after repair".into()))
}

/// User message carrying the movement rows of `span`.
pub fn movement_message(matrix: &GestureStateMatrix, span: (usize, usize)) -> String {
    format!(
        "Movement rows for columns {} to {}:\n\n{}",
        span.0,
        span.1,
        render_movement_rows(matrix, span)
    )
}

/// Both description stages, composed into the bullet description.
pub fn describe_gesture(
    matrix: &GestureStateMatrix,
    prompts: &PromptSet,
    llm: &dyn ChatBackend,
    cfg: &SessionConfig,
    transcript: &mut Transcript,
) -> Result<String, AgentError> {
    let pose = describe_pose(matrix, prompts, llm, cfg, transcript)?;
    let movement = describe_movement(matrix, pose.time_span, prompts, llm, cfg, transcript)?;
    Ok(compose_description(&pose, &movement))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeReason {
    /// No conclusion even after the forced-conclusion request.
    NoConclusion,
    /// Every concluded id was outside the function list.
    NoValidIds,
    /// A reply stayed malformed after the repair request.
    MalformedReply,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Conclusion(Vec<String>),
    Negative(NegativeReason),
}

impl Outcome {
    pub fn ranked(&self) -> Option<&[String]> {
        match self {
            Outcome::Conclusion(ids) => Some(ids),
            Outcome::Negative(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub outcome: Outcome,
    /// Accepted inference turns, including a forced one.
    pub rounds: u32,
    pub questions: u32,
    pub dropped_ids: Vec<String>,
    pub transcript: Transcript,
}

/// A session that stopped on a transport or setup error, with everything
/// recorded up to that point.
#[derive(Debug)]
pub struct SessionFailure {
    pub error: AgentError,
    pub transcript: Transcript,
}

impl fmt::Display for SessionFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for SessionFailure {}

pub fn render_function_list(functions: &[FunctionEntry]) -> String {
    let mut out = String::new();
    for f in functions {
        let _ = match &f.device {
            Some(d) => writeln!(out, "- [{}] {d}: {}", f.id, f.name),
            None => writeln!(out, "- [{}] {}", f.id, f.name),
        };
    }
    out.truncate(out.trim_end().len());
    out
}

const FORCED_CONCLUSION: &str = "You have used all available rounds. Do not ask further questions. \
Reply now with your conclusion: a JSON object with \"thought\" and \"conclusion\", listing up to five \
function ids from most to least likely.";

/// Replaces every calculator placeholder in a context answer. A failing
/// calculation is reported in place so no placeholder survives.
const UNAVAILABLE: &str = "[calculation unavailable]";

fn resolve_answer(registry: &CalculatorRegistry, lib: &ContextLibrary, answer: &str) -> String {
    let unavailable = |_: &crate::context::Placeholder, e: ContextError| {
        log::warn!("context answer calculation failed: {e}");
        UNAVAILABLE.to_string()
    };
    match registry.resolve_with(lib, answer, unavailable) {
        Ok(text) => text,
        Err(e) => {
            log::warn!("context answer has malformed placeholders: {e}");
            let mut out = String::new();
            let mut rest = answer;
            while let Some(pos) = rest.find("{{CALC:") {
                out.push_str(&rest[..pos]);
                out.push_str(UNAVAILABLE);
                rest = rest[pos..].find("}}").map_or("", |end| &rest[pos + end + 2..]);
            }
            out.push_str(rest);
            out
        }
    }
}

/// Dialogue between the inference agent and the context agent until a
/// conclusion, a forced conclusion, or a Negative outcome.
pub fn run_inference_session(
    description: &str,
    lib: &ContextLibrary,
    registry: &CalculatorRegistry,
    prompts: &PromptSet,
    llm: &dyn ChatBackend,
    cfg: &SessionConfig,
    mut transcript: Transcript,
) -> Result<SessionResult, SessionFailure> {
    macro_rules! tryf {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => {
                    return Err(SessionFailure {
                        error: e.into(),
                        transcript,
                    })
                }
            }
        };
    }
    let visible = cfg.setting.apply(lib);
    let functions = tryf!(visible.function_entries());
    let known: BTreeSet<&str> = functions.iter().map(|f| f.id.as_str()).collect();
    let context_names: Vec<&str> = visible.entries().iter().map(|c| c.name.as_str()).collect();
    let inference_system = tryf!(render_template(
        &prompts.inference,
        &[
            ("function_list", &render_function_list(&functions)),
            ("context_names", &context_names.join(", ")),
            ("max_rounds", &cfg.max_rounds.to_string()),
        ],
    ));
    let context_system = tryf!(render_template(
        &prompts.context,
        &[
            ("library", render_library_prompt(&visible).trim_end()),
            ("library_values", &render_library_values(&visible)),
        ],
    ));
    let mut inference = vec![
        ChatMessage::system(inference_system),
        ChatMessage::user(format!("Gesture description:\n{description}")),
    ];
    let mut context = vec![ChatMessage::system(context_system)];
    let mut rounds = 0u32;
    let mut questions = 0u32;
    let finish = |outcome: Outcome, rounds, questions, dropped_ids, mut transcript: Transcript| {
        let parsed = serde_json::to_value(&outcome).expect("outcome serializes");
        transcript.push("outcome", String::new(), parsed, UsageRecord::default(), false);
        Ok(SessionResult {
            outcome,
            rounds,
            questions,
            dropped_ids,
            transcript,
        })
    };
    loop {
        let forced = rounds >= cfg.max_rounds;
        if forced {
            inference.push(ChatMessage::user(FORCED_CONCLUSION));
        }
        let turn = tryf!(ask(
            llm,
            cfg,
            &mut inference,
            &mut transcript,
            "inference",
            parse_inference_turn,
            InferenceTurn::to_json
        ));
        let Some(turn) = turn else {
            return finish(Outcome::Negative(NegativeReason::MalformedReply), rounds, questions, Vec::new(), transcript);
        };
        rounds += 1;
        match turn.action {
            TurnAction::Conclusion(ids) => {
                let (kept, dropped): (Vec<String>, Vec<String>) =
                    ids.into_iter().partition(|id| known.contains(id.as_str()));
                if !dropped.is_empty() {
                    log::warn!("dropped unknown function ids {dropped:?}");
                }
                let outcome = if kept.is_empty() {
                    Outcome::Negative(NegativeReason::NoValidIds)
                } else {
                    Outcome::Conclusion(kept)
                };
                return finish(outcome, rounds, questions, dropped, transcript);
            }
            TurnAction::Question(_) if forced => {
                return finish(Outcome::Negative(NegativeReason::NoConclusion), rounds, questions, Vec::new(), transcript);
            }
            TurnAction::Question(q) => {
                questions += 1;
                context.push(ChatMessage::user(q));
                let reply = tryf!(ask(
                    llm,
                    cfg,
                    &mut context,
                    &mut transcript,
                    "context",
                    parse_context_turn,
                    |c| json!({"thought": c.thought, "answer": c.answer})
                ));
                let Some(reply) = reply else {
                    return finish(Outcome::Negative(NegativeReason::MalformedReply), rounds, questions, Vec::new(), transcript);
                };
                let delivered = resolve_answer(registry, &visible, &reply.answer);
                if let Some(last) = transcript.turns.last_mut() {
                    if let Value::Object(m) = &mut last.parsed {
                        m.insert("delivered".into(), Value::String(delivered.clone()));
                    }
                }
                inference.push(ChatMessage::user(format!("Context Management Agent: {delivered}")));
            }
        }
    }
}
