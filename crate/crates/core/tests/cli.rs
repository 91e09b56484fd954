//! End-to-end exercises of the command-line binary: staged subcommands over
//! a scripted fixture, config-key overrides, and the exit-code contract
//! (0 success, 2 config error, 3 stage failure, 4 endpoint failure).

mod common;

use std::process::{Command, Output};

use common::*;
use conflict_harness::config::{InterventionConfig, RunConfig};
use conflict_harness::intervention::InterventionKind;

fn harness(args: &[&str], dir: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conflict-harness"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &std::path::Path, config: &RunConfig) -> std::path::PathBuf {
    write_json_file(dir, "config.json", config)
}

#[test]
fn staged_subcommands_share_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cases = synthetic_cases(30);
    let dataset = write_fixture_dataset(dir.path(), &cases);
    let nli = contradiction_nli(dir.path());
    let (script, _, _) = biased_script(&cases, 1.0, 0.0, 5);
    let script_path = write_json_file(dir.path(), "script.json", &script);
    let mut config = base_config(dir.path(), dataset, script_path, nli, "out");
    config.interventions = vec![InterventionConfig {
        kind: InterventionKind::Mask,
        max_passes: 16,
        single_pass: false,
        first_occurrence_only: false,
        tokenizer: serde_json::json!({"kind": "whitespace"}),
    }];
    // The mask run needs scripted answers for the masked prompts too.
    let template = conflict_harness::prompt::PromptTemplate::open_book(INSTRUCTION);
    let mut script = conflict_harness::gateway::Script::default();
    for case in &cases {
        if case.contained {
            let mut masked = case.example.clone();
            masked.context = conflict_harness::intervention::mask_answer(
                &case.example.context,
                &case.wrong_answer,
            )
            .unwrap();
            let prompt =
                conflict_harness::prompt::build_open_book_prompt(&template, &masked).unwrap();
            script
                .by_prompt
                .insert(prompt, case.example.gold_answers[0].clone());
        }
    }
    let (mut base_script, _, _) = biased_script(&cases, 1.0, 0.0, 5);
    base_script.by_prompt.extend(script.by_prompt);
    let script_path = write_json_file(dir.path(), "script.json", &base_script);
    config.backend =
        serde_json::json!({"kind": "scripted", "path": script_path.display().to_string()});
    write_config(dir.path(), &config);

    for (subcommand, needle) in [
        ("closed-book", "closed-book: 30 answers"),
        ("filter", "knowledge conflict 30"),
        ("open-book", "open-book [baseline]: 30 outcomes"),
        ("intervene", ""),
        ("analyze", "delta P(R)"),
        ("report", "reports written"),
        ("run", "run complete: 30 conflict cases"),
    ] {
        let output = if subcommand == "intervene" {
            harness(&["-c", "config.json", "intervene", "mask"], dir.path())
        } else {
            harness(&["-c", "config.json", subcommand], dir.path())
        };
        assert!(
            output.status.success(),
            "{subcommand} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        let stdout = String::from_utf8_lossy(&output.stdout);
        assert!(stdout.contains(needle), "{subcommand}: {stdout}");
    }

    for name in [
        "stage1_records.jsonl",
        "stage2_cases.jsonl",
        "knowledge_conflict.jsonl",
        "stage3_baseline_outcomes.jsonl",
        "intervention_masked_outcomes.jsonl",
        "analysis.json",
        "manifest.json",
        "reports/filter_report.txt",
        "reports/categories.csv",
        "reports/interventions.txt",
        "reports/bias.json",
        "reports/containment.csv",
    ] {
        assert!(
            dir.path().join("out").join(name).exists(),
            "missing artifact {name}"
        );
    }
}

#[test]
fn out_dir_override_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cases = synthetic_cases(6);
    let dataset = write_fixture_dataset(dir.path(), &cases);
    let nli = contradiction_nli(dir.path());
    let (script, _, _) = biased_script(&cases, 0.0, 0.0, 5);
    let script_path = write_json_file(dir.path(), "script.json", &script);
    let config = base_config(dir.path(), dataset, script_path, nli, "out");
    write_config(dir.path(), &config);
    let output = harness(
        &["-c", "config.json", "--out-dir", "elsewhere", "run"],
        dir.path(),
    );
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(dir.path().join("elsewhere/manifest.json").exists());
    assert!(!dir.path().join("out/manifest.json").exists());
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let output = harness(&["-c", "nope.json", "run"], dir.path());
    assert_eq!(
        output.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn invalid_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.json"), r#"{"surprise": true}"#).unwrap();
    let output = harness(&["-c", "config.json", "run"], dir.path());
    assert_eq!(
        output.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn unreachable_endpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cases = synthetic_cases(3);
    let dataset = write_fixture_dataset(dir.path(), &cases);
    let nli = contradiction_nli(dir.path());
    let (script, _, _) = biased_script(&cases, 0.0, 0.0, 5);
    let script_path = write_json_file(dir.path(), "script.json", &script);
    let mut config = base_config(dir.path(), dataset, script_path, nli, "out");
    // Nothing listens on the discard port; retries exhaust immediately.
    config.backend = serde_json::json!({
        "kind": "http",
        "base_url": "http://127.0.0.1:9",
        "model_id": "m",
        "timeout_secs": 2,
    });
    config.retry = conflict_harness::gateway::RetryPolicy {
        max_attempts: 1,
        initial_backoff_ms: 1,
    };
    write_config(dir.path(), &config);
    let output = harness(&["-c", "config.json", "closed-book"], dir.path());
    assert_eq!(
        output.status.code(),
        Some(4),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn failed_stage_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cases = synthetic_cases(3);
    let dataset = write_fixture_dataset(dir.path(), &cases);
    let nli = contradiction_nli(dir.path());
    // Scripted backend with no entries: every generation fails, which is a
    // stage failure rather than an endpoint one.
    let script_path = write_json_file(dir.path(), "script.json", &serde_json::json!({}));
    let config = base_config(dir.path(), dataset, script_path, nli, "out");
    write_config(dir.path(), &config);
    let output = harness(&["-c", "config.json", "closed-book"], dir.path());
    assert_eq!(
        output.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("closed-book"), "{stderr}");
    assert!(stderr.contains("resume"), "{stderr}");
}
