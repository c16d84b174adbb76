//! Context library: named context types served to the agents, plus
//! calculators that turn raw context into short answers on demand.
//!
//! The context agent may write `{{CALC:<id>}}` or `{{CALC:<id>:<json-args>}}`
//! into its answer; [`CalculatorRegistry::resolve`] replaces every such token
//! with the calculator's text output before the answer is delivered.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const FUNCTION_LIST: &str = "function_list";
pub const GAZE: &str = "gaze";
pub const HISTORY: &str = "history";
pub const EXTERNAL: &str = "external";

/// Default gaze aggregation window in seconds.
pub const GAZE_WINDOW: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("context type `{0}` already exists")]
    DuplicateName(String),
    #[error("unknown context type `{0}`")]
    UnknownContext(String),
    #[error("bad path `{path}` at segment `{segment}`")]
    BadPath { path: String, segment: String },
    #[error("invalid context type: {0}")]
    Invalid(String),
    #[error("unknown calculator `{0}`")]
    UnknownCalculator(String),
    #[error("calculator `{0}` is already registered")]
    DuplicateCalculator(String),
    #[error("calculator `{id}` failed: {message}")]
    CalculatorFailure { id: String, message: String },
    #[error("malformed placeholder `{0}`")]
    BadPlaceholder(String),
    #[error("malformed library: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextType {
    pub name: String,
    pub description_md: String,
    pub values: Value,
    #[serde(default)]
    pub calculator_id: Option<String>,
}

impl ContextType {
    pub fn new(name: impl Into<String>, description_md: impl Into<String>, values: Value) -> Self {
        Self {
            name: name.into(),
            description_md: description_md.into(),
            values,
            calculator_id: None,
        }
    }

    pub fn with_calculator(mut self, id: impl Into<String>) -> Self {
        self.calculator_id = Some(id.into());
        self
    }

    fn validate(&self) -> Result<(), ContextError> {
        let ident = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !ident(&self.name) {
            return Err(ContextError::Invalid(format!("name `{}` is not an identifier", self.name)));
        }
        if self.description_md.trim().is_empty() {
            return Err(ContextError::Invalid(format!("`{}` has an empty description", self.name)));
        }
        Ok(())
    }
}

/// One interface function the gesture may map to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionEntry {
    pub id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<String>,
    /// 2D or 3D position of the function (or its device).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<String>,
}

/// One gaze sample; `z` is absent for screen-space gaze.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
}

/// Orders ids numerically when both are integers, otherwise as strings.
pub fn compare_ids(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LibraryFile {
    contexts: Vec<ContextType>,
}

/// Ordered set of context types with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextLibrary {
    entries: Vec<ContextType>,
}

impl ContextLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_context_type(&mut self, ctx: ContextType) -> Result<(), ContextError> {
        ctx.validate()?;
        if self.get(&ctx.name).is_some() {
            return Err(ContextError::DuplicateName(ctx.name));
        }
        self.entries.push(ctx);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ContextType> {
        self.entries.iter().find(|c| c.name == name)
    }

    pub fn entries(&self) -> &[ContextType] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Values of `name`, or the sub-tree at `path`. Path segments are
    /// separated by `/`; on arrays a segment is an index or `last`.
    pub fn retrieve(&self, name: &str, path: Option<&str>) -> Result<&Value, ContextError> {
        let ctx = self.get(name).ok_or_else(|| ContextError::UnknownContext(name.to_string()))?;
        let Some(path) = path.filter(|p| !p.is_empty()) else {
            return Ok(&ctx.values);
        };
        let mut node = &ctx.values;
        for segment in path.split('/') {
            let bad = || ContextError::BadPath {
                path: path.to_string(),
                segment: segment.to_string(),
            };
            node = match node {
                Value::Array(items) => {
                    let index = match segment {
                        "last" => items.len().checked_sub(1),
                        _ => segment.parse::<usize>().ok(),
                    };
                    index.and_then(|i| items.get(i)).ok_or_else(bad)?
                }
                Value::Object(map) => map.get(segment).ok_or_else(bad)?,
                _ => return Err(bad()),
            };
        }
        Ok(node)
    }

    /// Copy holding only the context types accepted by `keep`.
    pub fn filtered(&self, keep: impl Fn(&ContextType) -> bool) -> ContextLibrary {
        ContextLibrary {
            entries: self.entries.iter().filter(|c| keep(c)).cloned().collect(),
        }
    }

    pub fn function_entries(&self) -> Result<Vec<FunctionEntry>, ContextError> {
        let values = self.retrieve(FUNCTION_LIST, None)?;
        let entries: Vec<FunctionEntry> =
            serde_json::from_value(values.clone()).map_err(|e| ContextError::Malformed(format!("{FUNCTION_LIST}: {e}")))?;
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(ContextError::Malformed(format!("duplicate function id `{}`", e.id)));
            }
        }
        Ok(entries)
    }

    pub fn gaze_samples(&self) -> Result<Vec<GazeSample>, ContextError> {
        let values = self.retrieve(GAZE, None)?;
        serde_json::from_value(values.clone()).map_err(|e| ContextError::Malformed(format!("{GAZE}: {e}")))
    }

    pub fn from_json_str(text: &str) -> Result<Self, ContextError> {
        let file: LibraryFile = serde_json::from_str(text).map_err(|e| ContextError::Malformed(e.to_string()))?;
        let mut lib = ContextLibrary::new();
        for ctx in file.contexts {
            lib.add_context_type(ctx)?;
        }
        Ok(lib)
    }

    /// Canonical file form: pretty JSON with a trailing newline.
    pub fn to_json_string(&self) -> String {
        let file = LibraryFile {
            contexts: self.entries.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("library serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, ContextError> {
        let text = std::fs::read_to_string(path).map_err(|source| ContextError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }
}

const LIBRARY_HEADER: &str = "# Context Library\n\nThe following context types are available. Request them by name.\n";

/// Names and descriptions of every context type, without values.
pub fn render_library_prompt(lib: &ContextLibrary) -> String {
    let mut out = String::from(LIBRARY_HEADER);
    for ctx in lib.entries() {
        let _ = write!(out, "\n## {}\n\n{}\n", ctx.name, ctx.description_md.trim_end());
        if let Some(id) = &ctx.calculator_id {
            let _ = write!(out, "\nCalculator: write `{{{{CALC:{id}}}}}` to insert its result.\n");
        }
    }
    out
}

/// Values of every context type as fenced JSON, for the context agent.
pub fn render_library_values(lib: &ContextLibrary) -> String {
    let mut out = String::new();
    for ctx in lib.entries() {
        let body = serde_json::to_string_pretty(&ctx.values).expect("values serialize");
        let _ = write!(out, "## {}\n\n```json\n{body}\n```\n\n", ctx.name);
    }
    out.truncate(out.trim_end().len());
    out
}

/// Computes a text answer from library contents. Implementations must not
/// depend on anything but their inputs.
pub trait Calculator: Send + Sync {
    fn id(&self) -> &str;
    fn calculate(&self, lib: &ContextLibrary, args: &Value) -> Result<String, ContextError>;
}

fn window_arg(id: &str, args: &Value) -> Result<f64, ContextError> {
    match args.get("window") {
        None => Ok(GAZE_WINDOW),
        Some(v) => v.as_f64().filter(|w| *w > 0.0).ok_or_else(|| ContextError::CalculatorFailure {
            id: id.to_string(),
            message: format!("`window` must be a positive number, got {v}"),
        }),
    }
}

/// Samples within `window` seconds of the newest one.
pub fn recent_gaze(samples: &[GazeSample], window: f64) -> Vec<GazeSample> {
    let Some(last) = samples.iter().map(|s| s.t).reduce(f64::max) else {
        return Vec::new();
    };
    samples.iter().filter(|s| s.t >= last - window).copied().collect()
}

/// Nearest function to the centroid of recent gaze. Only the coordinates
/// present on both sides are compared; ties go to the lower id.
pub fn gaze_target<'a>(functions: &'a [FunctionEntry], samples: &[GazeSample], window: f64) -> Option<&'a FunctionEntry> {
    let recent = recent_gaze(samples, window);
    if recent.is_empty() {
        return None;
    }
    let n = recent.len() as f64;
    let mut centroid = vec![
        recent.iter().map(|s| s.x).sum::<f64>() / n,
        recent.iter().map(|s| s.y).sum::<f64>() / n,
    ];
    if recent.iter().all(|s| s.z.is_some()) {
        centroid.push(recent.iter().filter_map(|s| s.z).sum::<f64>() / n);
    }
    functions
        .iter()
        .filter_map(|f| {
            let loc = f.location.as_ref()?;
            let dims = loc.len().min(centroid.len());
            (dims >= 2).then(|| {
                let d2: f64 = (0..dims).map(|i| (loc[i] - centroid[i]).powi(2)).sum();
                (f, d2)
            })
        })
        .min_by(|(fa, da), (fb, db)| da.total_cmp(db).then_with(|| compare_ids(&fa.id, &fb.id)))
        .map(|(f, _)| f)
}

/// Built-in: the device (or function) the user has been looking at.
pub struct GazeTargetCalculator;

impl Calculator for GazeTargetCalculator {
    fn id(&self) -> &str {
        "gaze_target"
    }

    fn calculate(&self, lib: &ContextLibrary, args: &Value) -> Result<String, ContextError> {
        let window = window_arg(self.id(), args)?;
        let functions = lib.function_entries()?;
        let samples = lib.gaze_samples()?;
        Ok(match gaze_target(&functions, &samples, window) {
            Some(f) => f.device.clone().unwrap_or_else(|| f.name.clone()),
            None => "no gaze target".to_string(),
        })
    }
}

/// Built-in: the recent gaze samples as text.
pub struct GazeTraceCalculator;

impl Calculator for GazeTraceCalculator {
    fn id(&self) -> &str {
        "gaze_trace"
    }

    fn calculate(&self, lib: &ContextLibrary, args: &Value) -> Result<String, ContextError> {
        let window = window_arg(self.id(), args)?;
        let recent = recent_gaze(&lib.gaze_samples()?, window);
        if recent.is_empty() {
            return Ok("no gaze samples".to_string());
        }
        let lines: Vec<String> = recent
            .iter()
            .map(|s| match s.z {
                Some(z) => format!("t={:.2}: ({:.3}, {:.3}, {:.3})", s.t, s.x, s.y, z),
                None => format!("t={:.2}: ({:.3}, {:.3})", s.t, s.x, s.y),
            })
            .collect();
        Ok(lines.join("\n"))
    }
}

/// Runs a program that reads `{"library": …, "args": …}` on stdin and
/// writes its answer to stdout.
pub struct ExternalCalculator {
    pub id: String,
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl Calculator for ExternalCalculator {
    fn id(&self) -> &str {
        &self.id
    }

    fn calculate(&self, lib: &ContextLibrary, args: &Value) -> Result<String, ContextError> {
        let fail = |message: String| ContextError::CalculatorFailure {
            id: self.id.clone(),
            message,
        };
        let input = serde_json::json!({
            "library": serde_json::from_str::<Value>(&lib.to_json_string()).expect("library is JSON"),
            "args": args,
        });
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(format!("cannot start {}: {e}", self.program.display())))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let payload = input.to_string();
        let writer = std::thread::spawn(move || stdin.write_all(payload.as_bytes()));
        let output = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        // A program that ignores its input may close stdin early.
        let _ = writer.join();
        if !output.status.success() {
            return Err(fail(format!(
                "{}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let text = String::from_utf8(output.stdout).map_err(|_| fail("stdout is not UTF-8".into()))?;
        Ok(text.trim_end().to_string())
    }
}

/// A parsed `{{CALC:…}}` token.
#[derive(Debug, Clone, PartialEq)]
pub struct Placeholder {
    pub id: String,
    pub args: Value,
    /// Byte range of the token in the scanned text.
    pub span: (usize, usize),
}

const OPEN: &str = "{{CALC:";

/// Parses the placeholder starting at `text[start..]`.
fn parse_placeholder_at(text: &str, start: usize) -> Result<Placeholder, ContextError> {
    let rest = &text[start + OPEN.len()..];
    let id_len = rest
        .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-'))
        .unwrap_or(rest.len());
    let id = &rest[..id_len];
    let snippet = || text[start..].chars().take(60).collect::<String>();
    if id.is_empty() {
        return Err(ContextError::BadPlaceholder(snippet()));
    }
    let mut cursor = start + OPEN.len() + id_len;
    let mut args = Value::Object(Default::default());
    if text[cursor..].starts_with(':') {
        cursor += 1;
        let mut stream = serde_json::Deserializer::from_str(&text[cursor..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v @ Value::Object(_))) => args = v,
            _ => return Err(ContextError::BadPlaceholder(snippet())),
        }
        cursor += stream.byte_offset();
    }
    if !text[cursor..].starts_with("}}") {
        return Err(ContextError::BadPlaceholder(snippet()));
    }
    Ok(Placeholder {
        id: id.to_string(),
        args,
        span: (start, cursor + 2),
    })
}

/// All placeholders in `text`, in order.
pub fn find_placeholders(text: &str) -> Result<Vec<Placeholder>, ContextError> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(pos) = text[from..].find(OPEN) {
        let p = parse_placeholder_at(text, from + pos)?;
        from = p.span.1;
        out.push(p);
    }
    Ok(out)
}

pub fn contains_placeholder(text: &str) -> bool {
    text.contains(OPEN)
}

#[derive(Default)]
pub struct CalculatorRegistry {
    calculators: BTreeMap<String, Box<dyn Calculator>>,
}

impl CalculatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(Box::new(GazeTargetCalculator)).expect("fresh registry");
        r.register(Box::new(GazeTraceCalculator)).expect("fresh registry");
        r
    }

    pub fn register(&mut self, calc: Box<dyn Calculator>) -> Result<(), ContextError> {
        let id = calc.id().to_string();
        if self.calculators.contains_key(&id) {
            return Err(ContextError::DuplicateCalculator(id));
        }
        self.calculators.insert(id, calc);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.calculators.keys().map(String::as_str)
    }

    /// Evaluates one placeholder token such as `{{CALC:gaze_target}}`.
    pub fn calculate(&self, lib: &ContextLibrary, placeholder: &str) -> Result<String, ContextError> {
        let token = placeholder.trim();
        if !token.starts_with(OPEN) {
            return Err(ContextError::BadPlaceholder(token.to_string()));
        }
        let p = parse_placeholder_at(token, 0)?;
        if p.span.1 != token.len() {
            return Err(ContextError::BadPlaceholder(token.to_string()));
        }
        self.run(lib, &p)
    }

    fn run(&self, lib: &ContextLibrary, p: &Placeholder) -> Result<String, ContextError> {
        let calc = self
            .calculators
            .get(&p.id)
            .ok_or_else(|| ContextError::UnknownCalculator(p.id.clone()))?;
        calc.calculate(lib, &p.args)
    }

    /// Replaces every placeholder in `text` with its calculator output.
    pub fn resolve(&self, lib: &ContextLibrary, text: &str) -> Result<String, ContextError> {
        let mut first = None;
        let out = self.resolve_with(lib, text, |_, e| {
            first.get_or_insert(e);
            String::new()
        })?;
        match first {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// Like [`resolve`](Self::resolve), but a failing placeholder is replaced
    /// by whatever `on_error` returns. Only malformed placeholder syntax fails.
    pub fn resolve_with(
        &self,
        lib: &ContextLibrary,
        text: &str,
        mut on_error: impl FnMut(&Placeholder, ContextError) -> String,
    ) -> Result<String, ContextError> {
        let mut out = String::with_capacity(text.len());
        let mut last = 0;
        for p in find_placeholders(text)? {
            out.push_str(&text[last..p.span.0]);
            match self.run(lib, &p) {
                Ok(v) => out.push_str(&v),
                Err(e) => out.push_str(&on_error(&p, e)),
            }
            last = p.span.1;
        }
        out.push_str(&text[last..]);
        Ok(out)
    }
}
