//! Synthetic fixtures shared by the integration test targets.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use conflict_harness::config::{DatasetConfig, PromptConfig, RunConfig, ShotsConfig};
use conflict_harness::dataset::{write_mrqa, DatasetSlice, Provenance, QAExample};
use conflict_harness::gateway::{RetryPolicy, Script};
use conflict_harness::prompt::{build_closed_book_prompt, build_open_book_prompt, PromptTemplate};

pub const INSTRUCTION: &str = "concisely using the context";

pub struct SyntheticCase {
    pub example: QAExample,
    pub wrong_answer: String,
    pub contained: bool,
}

/// `n` conflict examples; even indices carry the wrong answer inside the
/// context (the containment group), odd ones do not.
pub fn synthetic_cases(n: usize) -> Vec<SyntheticCase> {
    (0..n)
        .map(|i| {
            let contained = i % 2 == 0;
            let gold = format!("goldanswer{i}");
            let wrong = format!("wronganswer{i}");
            let mut context =
                format!("Paragraph about topic {i}. The officially recorded value is {gold}.");
            if contained {
                context.push_str(&format!(" Some sources once claimed {wrong} instead."));
            }
            SyntheticCase {
                example: QAExample {
                    id: format!("syn{i}"),
                    question: format!("What is the recorded value for topic {i}?"),
                    context,
                    gold_answers: vec![gold],
                    source_dataset: "Synthetic".into(),
                },
                wrong_answer: wrong,
                contained,
            }
        })
        .collect()
}

pub fn write_fixture_dataset(dir: &Path, cases: &[SyntheticCase]) -> PathBuf {
    let slice = DatasetSlice {
        examples: cases.iter().map(|c| c.example.clone()).collect(),
        provenance: Provenance {
            source: "synthetic".into(),
            lineage: vec!["full".into()],
        },
    };
    let path = dir.join("dataset.jsonl");
    let mut buf = Vec::new();
    write_mrqa(&slice, &mut buf).unwrap();
    std::fs::write(&path, buf).unwrap();
    path
}

pub fn write_json_file<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(value).unwrap()).unwrap();
    path
}

pub fn contradiction_nli(dir: &Path) -> PathBuf {
    write_json_file(
        dir,
        "nli.json",
        &serde_json::json!({"rules": [], "default": "contradiction"}),
    )
}

pub fn base_config(
    dir: &Path,
    dataset: PathBuf,
    script: PathBuf,
    nli: PathBuf,
    out: &str,
) -> RunConfig {
    RunConfig {
        dataset: DatasetConfig {
            name: "Synthetic".into(),
            path: dataset,
            training_path: None,
        },
        backend: serde_json::json!({"kind": "scripted", "path": script.display().to_string()}),
        scorer: serde_json::json!({"kind": "exact"}),
        nli: serde_json::json!({"kind": "scripted", "path": nli.display().to_string()}),
        prompt: PromptConfig::Fixed {
            instruction: INSTRUCTION.into(),
        },
        shots: ShotsConfig {
            closed_book: Some(0),
            open_book: 0,
            long_context_model: false,
        },
        max_new_tokens: 16,
        stop_sequences: vec![],
        interventions: vec![],
        bias_success: conflict_harness::stats::SuccessDefinition::CorrectUpdate,
        parallelism: 4,
        cache_dir: None,
        out_dir: dir.join(out),
        seed: 11,
        retry: RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 1,
        },
    }
}

/// Scripted answers for a probabilistically biased model: closed-book it
/// always gives the wrong answer; open-book it retains that answer with the
/// group's rate, otherwise reads the gold one. Returns the script plus the
/// exact retained counts per group (contained, not contained).
pub fn biased_script(
    cases: &[SyntheticCase],
    retain_rate_contained: f64,
    retain_rate_other: f64,
    seed: u64,
) -> (Script, usize, usize) {
    let open_template = PromptTemplate::open_book(INSTRUCTION);
    let closed_template = PromptTemplate::closed_book();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut script = Script::default();
    let mut retained = [0usize; 2];
    for case in cases {
        let closed = build_closed_book_prompt(&closed_template, &case.example).unwrap();
        script.by_prompt.insert(closed, case.wrong_answer.clone());
        let rate = if case.contained {
            retain_rate_contained
        } else {
            retain_rate_other
        };
        let retain = rng.random::<f64>() < rate;
        retained[case.contained as usize] += retain as usize;
        let answer = if retain {
            case.wrong_answer.clone()
        } else {
            case.example.gold_answers[0].clone()
        };
        let open = build_open_book_prompt(&open_template, &case.example).unwrap();
        script.by_prompt.insert(open, answer);
    }
    (script, retained[1], retained[0])
}
