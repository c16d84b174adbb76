//! `gesture`: command-line entry points for encoding, tuning, grounding and
//! evaluation.
//!
//! Exit codes: 0 success, 2 input error, 3 Negative grounding outcome,
//! 4 transport failure (or an eval setting with no completed task).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gesture_core::agents::{describe_gesture, run_inference_session, AgentError, Outcome, PromptSet, SessionConfig, Transcript};
use gesture_core::context::{render_library_prompt, CalculatorRegistry, ContextLibrary, ContextType, ExternalCalculator, FUNCTION_LIST};
use gesture_core::encoder::{encode_stream, parse_matrix_text, serialize_matrix, GestureStateMatrix, SegmentationConfig};
use gesture_core::eval::{load_manifest, run_setting, ContextSetting, EvalReport, Pipeline, TaskRecord};
use gesture_core::landmarks::parse_landmark_stream;
use gesture_core::rules::RuleThresholds;
use gesture_core::transport::{load_fixtures, BackendSpec, ChatBackend, RetryPolicy, ScriptedBackend, TransportError};
use gesture_core::tuner::{
    evaluate_thresholds, load_labeled_dataset, partition_by_group, split_ambiguous, tune, GridSpec, LossWeights,
    ParamGroup,
};

const INPUT: u8 = 2;
const NEGATIVE: u8 = 3;
const TRANSPORT: u8 = 4;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn input<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| fail(INPUT, format!("{context}: {e}"))
}

type CmdResult = Result<u8, Failure>;

#[derive(Parser)]
#[command(name = "gesture", version, about = "Hand-gesture encoding and LLM-based function grounding")]
struct Cli {
    /// Seed for retry jitter.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for parallel work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect gesture windows in a landmark stream and write one matrix per window.
    Encode(EncodeArgs),
    /// Grid-search rule thresholds on a labeled dataset.
    Tune(TuneArgs),
    /// Describe a gesture matrix and ground it to a function.
    Ground(GroundArgs),
    /// Run the evaluation protocol over a task manifest.
    Eval(EvalArgs),
    /// Manage a context library file.
    #[command(subcommand)]
    Context(ContextCommand),
}

#[derive(Args)]
struct EncodeArgs {
    /// Landmark stream JSON.
    stream: PathBuf,
    /// Rule thresholds JSON (defaults when omitted).
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Segmentation config JSON (`chest_line`, `trigger_frames`, `end_hold`).
    #[arg(long)]
    segmentation: Option<PathBuf>,
    /// Output directory for `window_<k>.json` and `window_<k>.txt`.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    /// Labeled dataset (JSON lines).
    dataset: PathBuf,
    /// Separate dataset for the thumb flexion rule.
    #[arg(long)]
    thumb_dataset: Option<PathBuf>,
    /// Grid ranges JSON (defaults when omitted).
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Loss weights JSON (`correct`, `unsure`, `error`).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Starting thresholds for groups without samples.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Where to write the tuned thresholds.
    #[arg(long, short)]
    out: PathBuf,
    /// Where to write the loss report (default: `<out>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BackendArgs {
    /// `scripted:<fixtures.json>`, `live` or `live:<config.json>`.
    #[arg(long)]
    backend: Option<String>,
    /// Directory with prompt overrides (pose.md, movement.md, inference.md, context.md).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Maximum inference rounds before a forced conclusion.
    #[arg(long, default_value_t = 10)]
    max_rounds: u32,
    /// Model id sent with each request.
    #[arg(long, default_value = gesture_core::transport::DEFAULT_MODEL)]
    model: String,
    /// External calculator as `<id>=<program>`; the program gets JSON on stdin.
    #[arg(long = "calculator", value_name = "ID=PROGRAM")]
    calculators: Vec<String>,
    /// Attempts per request for live backends.
    #[arg(long, default_value_t = 4)]
    max_attempts: u32,
}

#[derive(Args)]
struct GroundArgs {
    /// Gesture state matrix (JSON from `encode`, or its text form).
    matrix: PathBuf,
    /// Context library JSON.
    #[arg(long)]
    library: PathBuf,
    /// Context setting: baseline, only_gaze, only_history_external or all.
    #[arg(long, default_value = "all")]
    setting: ContextSetting,
    #[command(flatten)]
    backend: BackendArgs,
    /// Output directory for `transcript.jsonl` and `conclusion.json`.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Task manifest JSON.
    manifest: PathBuf,
    /// Comma-separated settings (default: all four).
    #[arg(long, value_delimiter = ',')]
    settings: Vec<ContextSetting>,
    /// Runs per task and setting.
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Rule thresholds JSON (defaults when omitted).
    #[arg(long)]
    thresholds: Option<PathBuf>,
    /// Segmentation config JSON.
    #[arg(long)]
    segmentation: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
    /// Output directory for `report.json`, `report.csv` and transcripts.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ContextCommand {
    /// Add a context type (the library file is created if missing).
    Add {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        name: String,
        /// Markdown description.
        #[arg(long, conflicts_with = "description_file")]
        description: Option<String>,
        #[arg(long)]
        description_file: Option<PathBuf>,
        /// JSON file with the values.
        #[arg(long)]
        values: PathBuf,
        /// Calculator serving this context.
        #[arg(long)]
        calculator: Option<String>,
    },
    /// Print the library prompt, or one context's values.
    Show {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        name: Option<String>,
        /// Sub-path such as `last` or `0/name`.
        #[arg(long, requires = "name")]
        path: Option<String>,
    },
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(input(&dir.display().to_string()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(input(&dir.display().to_string()))?;
    tmp.write_all(bytes).map_err(input(&path.display().to_string()))?;
    tmp.persist(path).map_err(|e| fail(INPUT, format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(input(&path.display().to_string()))?;
    serde_json::from_str(&text).map_err(input(&path.display().to_string()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn load_thresholds(path: Option<&Path>) -> Result<RuleThresholds, Failure> {
    match path {
        None => Ok(RuleThresholds::default()),
        Some(p) => {
            let th: RuleThresholds = read_json(p)?;
            th.validate().map_err(input(&p.display().to_string()))?;
            Ok(th)
        }
    }
}

fn load_segmentation(path: Option<&Path>) -> Result<SegmentationConfig, Failure> {
    path.map_or(Ok(SegmentationConfig::default()), read_json)
}

fn require_exists(paths: &[&Path]) -> Result<(), Failure> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(fail(INPUT, format!("{} does not exist", p.display()))),
        None => Ok(()),
    }
}

fn cmd_encode(a: &EncodeArgs) -> CmdResult {
    require_exists(&[&a.stream])?;
    let th = load_thresholds(a.thresholds.as_deref())?;
    let seg = load_segmentation(a.segmentation.as_deref())?;
    let bytes = std::fs::read(&a.stream).map_err(input(&a.stream.display().to_string()))?;
    let stream = parse_landmark_stream(&bytes).map_err(input(&a.stream.display().to_string()))?;
    let matrices = encode_stream(&stream, &seg, &th).map_err(input("encode"))?;
    for (k, m) in matrices.iter().enumerate() {
        write_atomic(&a.out.join(format!("window_{k}.json")), to_json(m).as_bytes())?;
        write_atomic(&a.out.join(format!("window_{k}.txt")), serialize_matrix(m).as_bytes())?;
    }
    println!("{} windows", matrices.len());
    Ok(0)
}

fn cmd_tune(a: &TuneArgs) -> CmdResult {
    let mut paths: Vec<&Path> = vec![&a.dataset];
    paths.extend(a.thumb_dataset.as_deref());
    paths.extend(a.grid.as_deref());
    paths.extend(a.weights.as_deref());
    paths.extend(a.base.as_deref());
    require_exists(&paths)?;
    let grid: GridSpec = a.grid.as_deref().map_or(Ok(GridSpec::default()), read_json)?;
    let weights: LossWeights = a.weights.as_deref().map_or(Ok(LossWeights::default()), read_json)?;
    if !weights.is_ordered() {
        return Err(fail(INPUT, "loss weights must satisfy 0 <= correct < unsure < error"));
    }
    let base = load_thresholds(a.base.as_deref())?;
    let mut samples = load_labeled_dataset(&a.dataset).map_err(input("dataset"))?;
    if let Some(thumb) = &a.thumb_dataset {
        let thumb_samples = load_labeled_dataset(thumb).map_err(input("thumb dataset"))?;
        samples.retain(|s| s.rule.group() != ParamGroup::FlexionThumb);
        samples.extend(thumb_samples.into_iter().filter(|s| s.rule.group() == ParamGroup::FlexionThumb));
    }
    let (usable, ambiguous) = split_ambiguous(samples);
    if ambiguous > 0 {
        log::info!("filtered {ambiguous} samples with ambiguous labels");
    }
    if usable.is_empty() {
        return Err(fail(INPUT, format!("no usable samples after filtering {ambiguous} ambiguous labels")));
    }
    let datasets = partition_by_group(usable);
    let report = tune(&datasets, &grid, &weights, &base, ambiguous).map_err(input("tune"))?;
    let defaults = evaluate_thresholds(&datasets, &RuleThresholds::default(), &weights).map_err(input("tune"))?;
    write_atomic(&a.out, to_json(&report.thresholds).as_bytes())?;
    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    let doc = serde_json::json!({"tuned": report, "defaults": defaults});
    write_atomic(&report_path, to_json(&doc).as_bytes())?;
    for r in &report.rules {
        println!(
            "{:<17} {:?} loss {:.4} error {:.3} unsure {:.3} correct {:.3} (n={})",
            r.rule.name(),
            r.parameters,
            r.loss,
            r.error,
            r.unsure,
            r.correct,
            r.samples
        );
    }
    Ok(0)
}

fn registry(calculators: &[String]) -> Result<CalculatorRegistry, Failure> {
    let mut reg = CalculatorRegistry::with_builtins();
    for spec in calculators {
        let (id, program) = spec
            .split_once('=')
            .ok_or_else(|| fail(INPUT, format!("--calculator `{spec}`: expected ID=PROGRAM")))?;
        let mut parts = program.split_whitespace();
        let exe = parts.next().ok_or_else(|| fail(INPUT, format!("--calculator `{spec}`: empty program")))?;
        reg.register(Box::new(ExternalCalculator {
            id: id.to_string(),
            program: exe.into(),
            args: parts.map(str::to_string).collect(),
        }))
        .map_err(input("--calculator"))?;
    }
    Ok(reg)
}

fn prompts(dir: Option<&Path>) -> Result<PromptSet, Failure> {
    match dir {
        Some(d) => PromptSet::load_dir(d).map_err(input("prompts")),
        None => Ok(PromptSet::default()),
    }
}

fn backend_spec(spec: &str) -> Result<BackendSpec, Failure> {
    BackendSpec::parse(spec).map_err(|e| match e {
        TransportError::Config(m) => fail(INPUT, m),
        other => fail(TRANSPORT, other.to_string()),
    })
}

fn transport_code(e: &AgentError) -> u8 {
    match e {
        AgentError::Transport(_) => TRANSPORT,
        _ => INPUT,
    }
}

fn read_matrix(path: &Path) -> Result<GestureStateMatrix, Failure> {
    let text = std::fs::read_to_string(path).map_err(input(&path.display().to_string()))?;
    let m = if text.trim_start().starts_with('{') {
        serde_json::from_str::<GestureStateMatrix>(&text).map_err(input(&path.display().to_string()))?
    } else {
        parse_matrix_text(&text).map_err(input(&path.display().to_string()))?
    };
    m.validate().map_err(input(&path.display().to_string()))?;
    Ok(m)
}

fn session_config(b: &BackendArgs, setting: ContextSetting) -> SessionConfig {
    SessionConfig {
        max_rounds: b.max_rounds,
        setting,
        model: b.model.clone(),
        ..SessionConfig::default()
    }
}

fn retry_policy(b: &BackendArgs, seed: u64) -> RetryPolicy {
    RetryPolicy {
        max_attempts: b.max_attempts.max(1),
        seed,
        ..RetryPolicy::default()
    }
}

fn cmd_ground(a: &GroundArgs, seed: u64) -> CmdResult {
    let mut paths: Vec<&Path> = vec![&a.matrix, &a.library];
    paths.extend(a.backend.prompts.as_deref());
    require_exists(&paths)?;
    let matrix = read_matrix(&a.matrix)?;
    let lib = ContextLibrary::load(&a.library).map_err(input("library"))?;
    if lib.get(FUNCTION_LIST).is_none() {
        return Err(fail(INPUT, format!("library {} has no `{FUNCTION_LIST}` context", a.library.display())));
    }
    lib.function_entries().map_err(input("library"))?;
    let prompts = prompts(a.backend.prompts.as_deref())?;
    let reg = registry(&a.backend.calculators)?;
    let spec = backend_spec(a.backend.backend.as_deref().ok_or_else(|| fail(INPUT, "--backend is required"))?)?;
    let llm = spec.build(retry_policy(&a.backend, seed)).map_err(|e| fail(TRANSPORT, e.to_string()))?;
    let cfg = session_config(&a.backend, a.setting);

    let mut transcript = Transcript::default();
    let description = match describe_gesture(&matrix, &prompts, llm.as_ref(), &cfg, &mut transcript) {
        Ok(d) => d,
        Err(AgentError::Parse(m)) => {
            write_atomic(&a.out.join("transcript.jsonl"), transcript.to_jsonl().as_bytes())?;
            write_outcome(&a.out, &serde_json::json!({"negative": "malformed_reply", "cause": m}))?;
            println!("Negative: description could not be parsed");
            return Ok(NEGATIVE);
        }
        Err(e) => {
            write_atomic(&a.out.join("transcript.jsonl"), transcript.to_jsonl().as_bytes())?;
            return Err(fail(transport_code(&e), e.to_string()));
        }
    };
    match run_inference_session(&description, &lib, &reg, &prompts, llm.as_ref(), &cfg, transcript) {
        Ok(r) => {
            write_atomic(&a.out.join("transcript.jsonl"), r.transcript.to_jsonl().as_bytes())?;
            let usage = r.transcript.usage();
            let doc = serde_json::json!({
                "description": description,
                "outcome": r.outcome,
                "rounds": r.rounds,
                "questions": r.questions,
                "dropped_ids": r.dropped_ids,
                "input_tokens": usage.input_tokens,
                "output_tokens": usage.output_tokens,
            });
            write_outcome(&a.out, &doc)?;
            match &r.outcome {
                Outcome::Conclusion(ids) => {
                    println!("{}", ids.join(" "));
                    Ok(0)
                }
                Outcome::Negative(reason) => {
                    println!("Negative: {}", serde_json::to_value(reason).unwrap_or_default());
                    Ok(NEGATIVE)
                }
            }
        }
        Err(f) => {
            write_atomic(&a.out.join("transcript.jsonl"), f.transcript.to_jsonl().as_bytes())?;
            Err(fail(transport_code(&f.error), f.error.to_string()))
        }
    }
}

fn write_outcome(dir: &Path, doc: &serde_json::Value) -> Result<(), Failure> {
    write_atomic(&dir.join("conclusion.json"), to_json(doc).as_bytes())
}

fn cmd_eval(a: &EvalArgs, seed: u64) -> CmdResult {
    let mut paths: Vec<&Path> = vec![&a.manifest];
    paths.extend(a.thresholds.as_deref());
    paths.extend(a.segmentation.as_deref());
    paths.extend(a.backend.prompts.as_deref());
    require_exists(&paths)?;
    let tasks = load_manifest(&a.manifest).map_err(input("manifest"))?;
    let thresholds = load_thresholds(a.thresholds.as_deref())?;
    let segmentation = load_segmentation(a.segmentation.as_deref())?;
    let prompts = prompts(a.backend.prompts.as_deref())?;
    let reg = registry(&a.backend.calculators)?;
    let shared = a.backend.backend.as_deref().map(backend_spec).transpose()?;
    if shared.is_none() {
        if let Some(t) = tasks.iter().find(|t| t.fixtures.is_none()) {
            return Err(fail(INPUT, format!("task `{}` has no fixtures and no --backend was given", t.id)));
        }
    }
    let policy = retry_policy(&a.backend, seed);
    let task_fixtures: Vec<(String, Vec<gesture_core::transport::Fixture>)> = tasks
        .iter()
        .filter_map(|t| t.fixtures.as_ref().map(|f| (t.id.clone(), f)))
        .map(|(id, f)| load_fixtures(f).map(|fx| (id, fx)).map_err(input("fixtures")))
        .collect::<Result<_, _>>()?;
    let build = |task: &TaskRecord| -> Result<Box<dyn ChatBackend>, String> {
        if let Some((_, fx)) = task_fixtures.iter().find(|(id, _)| *id == task.id) {
            return Ok(Box::new(ScriptedBackend::new(fx.clone())));
        }
        shared
            .as_ref()
            .ok_or_else(|| "no backend".to_string())?
            .build(policy)
            .map_err(|e| e.to_string())
    };
    let settings = if a.settings.is_empty() {
        ContextSetting::ALL.to_vec()
    } else {
        a.settings.clone()
    };
    let pipeline = Pipeline {
        prompts: &prompts,
        thresholds,
        segmentation,
        registry: &reg,
        session: session_config(&a.backend, ContextSetting::All),
        backend: &build,
    };
    let results: Vec<_> = settings
        .iter()
        .map(|s| run_setting(&tasks, *s, a.repetitions, &pipeline))
        .collect();
    for r in &results {
        for run in &r.runs {
            let rec = &run.record;
            let name = format!("{}_r{}.jsonl", rec.task, rec.repetition);
            write_atomic(&a.out.join("transcripts").join(r.setting.name()).join(name), run.transcript.to_jsonl().as_bytes())?;
        }
    }
    let report = EvalReport::build(&results, &tasks, a.repetitions.max(1)).map_err(input("report"))?;
    write_atomic(&a.out.join("report.json"), report.to_json().as_bytes())?;
    let csv = report.to_csv();
    write_atomic(&a.out.join("report.csv"), csv.as_bytes())?;
    print!("{csv}");
    if let Some(s) = report.settings.iter().find(|s| s.completed == 0) {
        return Err(fail(TRANSPORT, format!("setting {} completed no task", s.setting)));
    }
    Ok(0)
}

fn cmd_context(c: &ContextCommand) -> CmdResult {
    match c {
        ContextCommand::Add {
            library,
            name,
            description,
            description_file,
            values,
            calculator,
        } => {
            require_exists(&[values])?;
            let mut lib = if library.exists() {
                ContextLibrary::load(library).map_err(input("library"))?
            } else {
                ContextLibrary::new()
            };
            let description = match (description, description_file) {
                (Some(d), _) => d.clone(),
                (None, Some(f)) => std::fs::read_to_string(f).map_err(input(&f.display().to_string()))?,
                (None, None) => return Err(fail(INPUT, "--description or --description-file is required")),
            };
            let mut ctx = ContextType::new(name.clone(), description, read_json(values)?);
            ctx.calculator_id = calculator.clone();
            lib.add_context_type(ctx).map_err(input("add"))?;
            write_atomic(library, lib.to_json_string().as_bytes())?;
            println!("{} context types", lib.len());
            Ok(0)
        }
        ContextCommand::Show { library, name, path } => {
            require_exists(&[library])?;
            let lib = ContextLibrary::load(library).map_err(input("library"))?;
            match name {
                None => print!("{}", render_library_prompt(&lib)),
                Some(n) => {
                    let v = lib.retrieve(n, path.as_deref()).map_err(input("retrieve"))?;
                    print!("{}", to_json(v));
                }
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            log::warn!("cannot size thread pool: {e}");
        }
    }
    let result = match &cli.command {
        Command::Encode(a) => cmd_encode(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Ground(a) => cmd_ground(a, cli.seed),
        Command::Eval(a) => cmd_eval(a, cli.seed),
        Command::Context(c) => cmd_context(c),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
