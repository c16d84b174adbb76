use std::path::Path;

use gesture_core::agents::{
    compose_description, describe_gesture, run_inference_session, ContextSetting, NegativeReason, Outcome,
    PoseDescription, PromptSet, SessionConfig, Transcript,
};
use gesture_core::context::{CalculatorRegistry, ContextLibrary};
use gesture_core::encoder::encode_stream;
use gesture_core::rules::RuleThresholds;
use gesture_core::synth::raise_stream;
use gesture_core::transport::{estimate_tokens, load_fixtures, ScriptedBackend};
use gesture_core::SegmentationConfig;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn description_matches_golden() {
    let pose = PoseDescription {
        candidate_gestures: "Thumbs up\n* Like".into(),
        time_span: (0, 3),
    };
    let golden = std::fs::read_to_string(fixture("golden_description.md")).unwrap();
    assert_eq!(compose_description(&pose, "- The hand moves up.\n\n  It stops at eye level.  "), golden.trim_end());
}

#[test]
fn scripted_session_end_to_end() {
    let stream = raise_stream(30.0, 3.0, &[(1.0, 1.8)], 0.8, 0.4);
    let matrices = encode_stream(&stream, &SegmentationConfig::default(), &RuleThresholds::default()).unwrap();
    assert_eq!(matrices.len(), 1);
    // raised from 1.0 to 1.8 s: 0.8 s at 0.2 s steps
    assert_eq!(matrices[0].columns(), 5);

    let llm = ScriptedBackend::new(load_fixtures(&fixture("eval/light_color.json")).unwrap());
    let lib = ContextLibrary::load(&fixture("smart_home_library.json")).unwrap();
    let prompts = PromptSet::default();
    let cfg = SessionConfig::default();
    let mut transcript = Transcript::default();
    let description = describe_gesture(&matrices[0], &prompts, &llm, &cfg, &mut transcript).unwrap();
    assert_eq!(description, "- Thumbs up\n- The hand moves up.");

    let result = run_inference_session(
        &description,
        &ContextSetting::OnlyGaze.apply(&lib),
        &CalculatorRegistry::with_builtins(),
        &prompts,
        &llm,
        &cfg,
        transcript,
    )
    .unwrap();
    assert_eq!(result.outcome, Outcome::Conclusion(vec!["1".into(), "2".into(), "3".into()]));
    assert_eq!((result.rounds, result.questions), (2, 1));
    assert_eq!(llm.calls(), 5);

    let roles: Vec<&str> = result.transcript.turns.iter().map(|t| t.role.as_str()).collect();
    assert_eq!(roles, ["description_pose", "description_movement", "inference", "context", "inference", "outcome"]);
    let context_turn = &result.transcript.turns[3];
    assert_eq!(context_turn.parsed["delivered"], "Smart Screen");

    // usage is the sum over turns, and each output count is the estimate of its raw text
    let usage = result.transcript.usage();
    let turns = &result.transcript.turns;
    assert_eq!(usage.input_tokens, turns.iter().map(|t| t.input_tokens).sum::<u64>());
    assert_eq!(usage.output_tokens, turns.iter().map(|t| t.output_tokens).sum::<u64>());
    assert!(turns.iter().all(|t| t.output_tokens == estimate_tokens(&t.raw)));

    let text = result.transcript.to_jsonl();
    assert_eq!(Transcript::from_jsonl(&text).unwrap(), result.transcript);
}

#[test]
fn baseline_setting_hides_gaze() {
    let lib = ContextLibrary::load(&fixture("smart_home_library.json")).unwrap();
    let names = |s: ContextSetting| s.apply(&lib).entries().iter().map(|c| c.name.clone()).collect::<Vec<_>>();
    assert_eq!(names(ContextSetting::Baseline), ["function_list"]);
    assert_eq!(names(ContextSetting::OnlyGaze), ["function_list", "gaze"]);
    assert_eq!(names(ContextSetting::OnlyHistoryExternal), ["function_list", "history", "external"]);
    assert_eq!(names(ContextSetting::All), ["function_list", "gaze", "history", "external"]);
}

#[test]
fn forced_conclusion_still_asking_is_negative() {
    let lib = ContextLibrary::load(&fixture("smart_home_library.json")).unwrap();
    let q = r#"{"thought": "t", "question": "More?"}"#;
    let a = r#"{"thought": "t", "answer": "Nothing."}"#;
    let llm = ScriptedBackend::from_responses([q, a, q]);
    let cfg = SessionConfig { max_rounds: 1, ..SessionConfig::default() };
    let result = run_inference_session(
        "- Wave.",
        &lib,
        &CalculatorRegistry::with_builtins(),
        &PromptSet::default(),
        &llm,
        &cfg,
        Transcript::default(),
    )
    .unwrap();
    assert_eq!(result.outcome, Outcome::Negative(NegativeReason::NoConclusion));
    assert_eq!((result.rounds, result.questions), (2, 1));
}
