//! Stage resume semantics: artifacts are reused only while every input they
//! depend on is unchanged, including the contents of scripted strategy
//! files, not just their paths.

mod common;

use common::*;
use conflict_harness::run::{read_json, Runner};

#[test]
fn editing_the_scripted_backend_invalidates_stage1() {
    let dir = tempfile::tempdir().unwrap();
    let cases = synthetic_cases(8);
    let dataset = write_fixture_dataset(dir.path(), &cases);
    let nli = contradiction_nli(dir.path());
    let (script, _, _) = biased_script(&cases, 0.0, 0.0, 1);
    let script_path = write_json_file(dir.path(), "script.json", &script);
    let config = base_config(dir.path(), dataset, script_path, nli, "out");

    let runner = Runner::new(config.clone(), dir.path()).unwrap();
    let (answers, manifest) = runner.stage1().unwrap();
    assert_eq!(answers[0].a_p, "wronganswer0");
    let first_key = manifest.key.clone();

    // Unchanged inputs: the same key resumes from the artifact.
    let runner = Runner::new(config.clone(), dir.path()).unwrap();
    let (_, manifest) = runner.stage1().unwrap();
    assert_eq!(manifest.key, first_key);

    // Rewrite the script in place: same path, different answers.
    let mut edited = script.clone();
    for answer in edited.by_prompt.values_mut() {
        if answer.starts_with("wronganswer") {
            *answer = format!("edited-{answer}");
        }
    }
    write_json_file(dir.path(), "script.json", &edited);

    let runner = Runner::new(config, dir.path()).unwrap();
    let (answers, manifest) = runner.stage1().unwrap();
    assert_ne!(
        manifest.key, first_key,
        "content edit must invalidate the stage"
    );
    assert_eq!(answers[0].a_p, "edited-wronganswer0");

    let persisted: serde_json::Value =
        read_json(&dir.path().join("out/stage1_manifest.json")).unwrap();
    assert_eq!(persisted["key"], serde_json::json!(manifest.key));
}

#[test]
fn changing_the_seed_invalidates_downstream_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cases = synthetic_cases(4);
    let dataset = write_fixture_dataset(dir.path(), &cases);
    let nli = contradiction_nli(dir.path());
    let (script, _, _) = biased_script(&cases, 0.0, 0.0, 1);
    let script_path = write_json_file(dir.path(), "script.json", &script);
    let mut config = base_config(dir.path(), dataset, script_path, nli, "out");

    let runner = Runner::new(config.clone(), dir.path()).unwrap();
    let (_, first) = runner.stage1().unwrap();

    config.seed = 999;
    let runner = Runner::new(config, dir.path()).unwrap();
    let (_, second) = runner.stage1().unwrap();
    assert_ne!(first.key, second.key);
}
