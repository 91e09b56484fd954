//! The three-stage pipeline: closed-book answer gathering, conflict
//! filtering, and open-book categorization.
//!
//! Stage 1 probes the model without context to collect parametric answers.
//! Stage 2 drops answers that are already correct (no conflict) and answers
//! the context entails (also no conflict); the survivors form the
//! knowledge-conflict dataset. Stage 3 answers open-book over that dataset
//! and buckets every answer into exactly one of three categories.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSlice, QAExample};
use crate::equivalence::nli::{entails, Nli};
use crate::equivalence::{exact_match, is_equivalent, Scorer};
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::intervention::contains_answer;
use crate::prompt::{
    build_closed_book_prompt, build_open_book_prompt, GenerationSettings, Layout, PromptTemplate,
};

/// Open-book answer categories.
///
/// `Uc` -- the model updated to an answer equivalent to gold.
/// `R`  -- the model retained its (wrong) parametric answer.
/// `Ui` -- the model changed its answer but is still wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    R,
    #[serde(rename = "U_c")]
    Uc,
    #[serde(rename = "U_i")]
    Ui,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::R, Category::Uc, Category::Ui];

    pub fn label(&self) -> &'static str {
        match self {
            Category::R => "R",
            Category::Uc => "U_c",
            Category::Ui => "U_i",
        }
    }
}

/// Which experimental condition produced an outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Baseline,
    Masked,
    Injected,
    Icl,
}

impl Condition {
    pub fn label(&self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::Masked => "masked",
            Condition::Injected => "injected",
            Condition::Icl => "icl",
        }
    }
}

/// Stage 1 row: the model's closed-book answer for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedBookAnswer {
    pub example_id: String,
    pub a_p: String,
}

/// Stage 2 row: the closed-book answer with its filter verdicts. Exactly one
/// bucket applies: correct, entailed-but-wrong, or conflict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricRecord {
    pub example_id: String,
    pub a_p: String,
    pub closed_book_correct: bool,
    pub entailed_by_context: bool,
}

/// A surviving knowledge conflict: wrong, non-entailed parametric answer
/// paired with its example, plus whether the answer appears in the context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictCase {
    pub example: QAExample,
    pub a_p: String,
    pub ap_in_context: bool,
}

/// Stage 3 row: the open-book answer and its category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenBookOutcome {
    pub case: ConflictCase,
    pub a_c: String,
    pub category: Category,
    pub condition: Condition,
}

/// A generation that failed after retries. The example is excluded
/// downstream and counted, never silently dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub example_id: String,
    pub error: String,
}

/// Example counts through the Stage 2 funnel. The lineage is a chain:
/// knowledge_conflict is a subset of closed_book_wrong is a subset of full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketCounts {
    pub full: usize,
    pub closed_book_correct: usize,
    pub closed_book_wrong: usize,
    pub knowledge_conflict: usize,
}

#[derive(Debug)]
pub struct Stage1Output {
    pub answers: Vec<ClosedBookAnswer>,
    pub failures: Vec<GenerationFailure>,
    /// First typed generation error, kept so total failures can surface
    /// with the right flavor (endpoint vs. generation).
    pub first_error: Option<Error>,
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub records: Vec<ParametricRecord>,
    pub cases: Vec<ConflictCase>,
    pub counts: BucketCounts,
}

#[derive(Debug)]
pub struct Stage3Output {
    pub outcomes: Vec<OpenBookOutcome>,
    pub failures: Vec<GenerationFailure>,
    pub first_error: Option<Error>,
}

/// Stage 1: answer every example closed-book and keep the post-processed
/// answers for filtering.
pub fn stage1_closed_book(
    slice: &DatasetSlice,
    gateway: &Gateway,
    settings: &GenerationSettings,
    template: &PromptTemplate,
) -> Result<Stage1Output> {
    if template.layout != Layout::ClosedBook {
        return Err(Error::Prompt("stage 1 needs a closed_book template".into()));
    }
    let requests = slice
        .examples
        .iter()
        .map(|ex| Ok(settings.request(build_closed_book_prompt(template, ex)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut answers = Vec::with_capacity(slice.len());
    let mut failures = Vec::new();
    let mut first_error = None;
    for (ex, response) in slice.examples.iter().zip(gateway.generate_batch(&requests)) {
        match response {
            Ok(r) => answers.push(ClosedBookAnswer {
                example_id: ex.id.clone(),
                a_p: r.answer_text,
            }),
            Err(e) => {
                failures.push(GenerationFailure {
                    example_id: ex.id.clone(),
                    error: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    Ok(Stage1Output {
        answers,
        failures,
        first_error,
    })
}

/// Stage 2: drop closed-book-correct answers, then drop answers the context
/// entails. Survivors become conflict cases with the containment flag set.
pub fn stage2_filter(
    answers: &[ClosedBookAnswer],
    slice: &DatasetSlice,
    scorer: &dyn Scorer,
    nli: &dyn Nli,
    parallelism: usize,
) -> Result<Stage2Output> {
    let by_id: std::collections::HashMap<&str, &QAExample> = slice
        .examples
        .iter()
        .map(|ex| (ex.id.as_str(), ex))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1).min(answers.len().max(1)))
        .build()
        .expect("worker pool");
    let verdicts: Vec<(ParametricRecord, Option<ConflictCase>)> = pool.install(|| {
        answers
            .par_iter()
            .map(|answer| {
                let ex = *by_id.get(answer.example_id.as_str()).ok_or_else(|| {
                    Error::domain(format!(
                        "closed-book answer {} has no example in the slice",
                        answer.example_id
                    ))
                })?;
                let correct =
                    is_equivalent(&answer.a_p, &ex.gold_answers, &ex.question, scorer)?.equivalent;
                let entailed = if correct {
                    false
                } else {
                    entails(&ex.context, &ex.question, &answer.a_p, nli)?
                };
                let record = ParametricRecord {
                    example_id: answer.example_id.clone(),
                    a_p: answer.a_p.clone(),
                    closed_book_correct: correct,
                    entailed_by_context: entailed,
                };
                let case = (!correct && !entailed).then(|| ConflictCase {
                    example: ex.clone(),
                    a_p: answer.a_p.clone(),
                    ap_in_context: contains_answer(&ex.context, &answer.a_p),
                });
                Ok((record, case))
            })
            .collect::<Result<_>>()
    })?;

    let mut records = Vec::with_capacity(verdicts.len());
    let mut cases = Vec::new();
    for (record, case) in verdicts {
        records.push(record);
        cases.extend(case);
    }
    let correct = records.iter().filter(|r| r.closed_book_correct).count();
    let counts = BucketCounts {
        full: records.len(),
        closed_book_correct: correct,
        closed_book_wrong: records.len() - correct,
        knowledge_conflict: cases.len(),
    };
    Ok(Stage2Output {
        records,
        cases,
        counts,
    })
}

/// Assign the open-book answer its category: correct update beats retain
/// beats incorrect update. Equivalence to gold uses the configured scorer;
/// the retain test is normalized exact match against the parametric answer.
pub fn categorize(
    a_c: &str,
    a_p: &str,
    golds: &[String],
    question: &str,
    scorer: &dyn Scorer,
) -> Result<Category> {
    let equivalent = is_equivalent(a_c, golds, question, scorer)?.equivalent;
    if equivalent {
        if exact_match(a_c, a_p) {
            // Can only happen when a_p slipped past Stage 2, e.g. after a
            // scorer config change between stages.
            log::warn!("a_c matches both gold and a_p; categorizing as U_c");
        }
        return Ok(Category::Uc);
    }
    if exact_match(a_c, a_p) {
        return Ok(Category::R);
    }
    Ok(Category::Ui)
}

/// Stage 3: answer the conflict cases open-book and categorize each answer.
pub fn stage3_open_book(
    cases: &[ConflictCase],
    template: &PromptTemplate,
    gateway: &Gateway,
    settings: &GenerationSettings,
    scorer: &dyn Scorer,
    condition: Condition,
) -> Result<Stage3Output> {
    if template.layout != Layout::OpenBook {
        return Err(Error::Prompt("stage 3 needs an open_book template".into()));
    }
    let requests = cases
        .iter()
        .map(|case| Ok(settings.request(build_open_book_prompt(template, &case.example)?)))
        .collect::<Result<Vec<_>>>()?;
    collect_outcomes(
        cases,
        gateway.generate_batch(&requests),
        scorer,
        condition,
        gateway.parallelism(),
    )
}

/// Shared tail of stage 3 and the interventions: fold generation results
/// into categorized outcomes plus a failure list. Scoring calls run under
/// the same parallelism bound as generation.
pub(crate) fn collect_outcomes(
    cases: &[ConflictCase],
    responses: Vec<Result<crate::gateway::GenerationResponse>>,
    scorer: &dyn Scorer,
    condition: Condition,
    parallelism: usize,
) -> Result<Stage3Output> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1).min(cases.len().max(1)))
        .build()
        .expect("worker pool");
    type Scored = std::result::Result<OpenBookOutcome, (GenerationFailure, Error)>;
    let scored: Vec<Result<Scored>> = pool.install(|| {
        cases
            .par_iter()
            .zip(responses.into_par_iter())
            .map(|(case, response)| match response {
                Ok(r) => {
                    let category = categorize(
                        &r.answer_text,
                        &case.a_p,
                        &case.example.gold_answers,
                        &case.example.question,
                        scorer,
                    )?;
                    Ok(Ok(OpenBookOutcome {
                        case: case.clone(),
                        a_c: r.answer_text,
                        category,
                        condition,
                    }))
                }
                Err(e) => {
                    let failure = GenerationFailure {
                        example_id: case.example.id.clone(),
                        error: e.to_string(),
                    };
                    Ok(Err((failure, e)))
                }
            })
            .collect()
    });
    let mut outcomes = Vec::with_capacity(cases.len());
    let mut failures = Vec::new();
    let mut first_error = None;
    for item in scored {
        match item? {
            Ok(outcome) => outcomes.push(outcome),
            Err((failure, error)) => {
                failures.push(failure);
                first_error.get_or_insert(error);
            }
        }
    }
    Ok(Stage3Output {
        outcomes,
        failures,
        first_error,
    })
}
