//! Evaluation over a three-task manifest with scripted replies: one Top-1
//! hit, one Top-3 hit, and one stream without a gesture.

use std::path::{Path, PathBuf};

use gesture_core::agents::{PromptSet, SessionConfig};
use gesture_core::context::{CalculatorRegistry, ContextLibrary, FUNCTION_LIST};
use gesture_core::eval::{load_manifest, run_setting, ContextSetting, EvalReport, Pipeline, TaskRecord};
use gesture_core::rules::RuleThresholds;
use gesture_core::synth::raise_stream;
use gesture_core::transport::{load_fixtures, ChatBackend, ScriptedBackend};
use gesture_core::SegmentationConfig;
use serde_json::json;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn write_dataset(dir: &Path) -> PathBuf {
    let streams = [
        ("brighter", raise_stream(15.0, 2.0, &[(0.4, 1.0)], 0.8, 0.4)),
        ("light_color", raise_stream(15.0, 2.0, &[(0.6, 1.4)], 0.8, 0.4)),
        ("idle", raise_stream(15.0, 1.0, &[], 0.8, 0.4)),
    ];
    for (name, s) in &streams {
        std::fs::write(dir.join(format!("{name}.json")), s.to_json()).unwrap();
    }
    let lib = ContextLibrary::load(&fixtures().join("smart_home_library.json")).unwrap();
    let functions = lib.retrieve(FUNCTION_LIST, None).unwrap().clone();
    let gaze = lib.retrieve("gaze", None).unwrap().clone();
    let manifest = json!([
        {"id": "brighter", "scenario": "smart_home", "stream": "brighter.json", "function_list": functions,
         "ground_truth": "2", "external": ["It is getting dark."]},
        {"id": "light_color", "scenario": "smart_home", "stream": "light_color.json", "function_list": functions,
         "gaze": gaze, "ground_truth": "3"},
        {"id": "idle", "scenario": "smart_home", "stream": "idle.json", "function_list": functions,
         "ground_truth": "1"}
    ]);
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

fn report() -> (EvalReport, Vec<TaskRecord>) {
    let dir = tempfile::tempdir().unwrap();
    let tasks = load_manifest(&write_dataset(dir.path())).unwrap();
    let prompts = PromptSet::default();
    let registry = CalculatorRegistry::with_builtins();
    let backend = |task: &TaskRecord| -> Result<Box<dyn ChatBackend>, String> {
        let path = fixtures().join("eval").join(format!("{}.json", task.id));
        Ok(Box::new(ScriptedBackend::new(load_fixtures(&path).map_err(|e| e.to_string())?)))
    };
    let pipeline = Pipeline {
        prompts: &prompts,
        thresholds: RuleThresholds::default(),
        segmentation: SegmentationConfig::default(),
        registry: &registry,
        session: SessionConfig::default(),
        backend: &backend,
    };
    let settings = [ContextSetting::Baseline, ContextSetting::All];
    let results: Vec<_> = settings.iter().map(|s| run_setting(&tasks, *s, 2, &pipeline)).collect();
    (EvalReport::build(&results, &tasks, 2).unwrap(), tasks)
}

#[test]
fn metrics_follow_the_scripted_ranks() {
    let (report, tasks) = report();
    assert_eq!(tasks.iter().map(TaskRecord::function_count).collect::<Vec<_>>(), [18, 18, 18]);
    for s in &report.settings {
        // ranks 1, 3 and none in both repetitions
        let m = &s.metrics;
        assert!((m.top1.mean - 1.0 / 3.0).abs() < 1e-12 && m.top1.std == 0.0);
        assert!((m.top3.mean - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.top5.mean - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.negative.mean - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!((s.tasks, s.sessions, s.completed), (3, 6, 4));
    }
    let idle: Vec<_> = report.sessions.iter().filter(|r| r.task == "idle").collect();
    assert_eq!(idle.len(), 4);
    assert!(idle.iter().all(|r| r.failure.is_some() && r.rank.is_none()));
    assert!((report.random_guess.top1.mean - 1.0 / 18.0).abs() < 1e-15);
}

#[test]
fn report_matches_golden_files() {
    let (report, _) = report();
    let json = report.to_json();
    let csv = report.to_csv();
    // GESTURE_BLESS=1 rewrites the golden files after an intended change
    if std::env::var_os("GESTURE_BLESS").is_some() {
        std::fs::write(fixtures().join("eval/golden_report.json"), &json).unwrap();
        std::fs::write(fixtures().join("eval/golden_report.csv"), &csv).unwrap();
    }
    let golden_json = std::fs::read_to_string(fixtures().join("eval/golden_report.json")).unwrap();
    let golden_csv = std::fs::read_to_string(fixtures().join("eval/golden_report.csv")).unwrap();
    assert_eq!(json, golden_json);
    assert_eq!(csv, golden_csv);
}
