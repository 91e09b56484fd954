//! Prompt construction and instruction search.
//!
//! Prompt building is a pure function of (template, example) and the layouts
//! are bit-pinned: downstream runs compare answer strings across conditions,
//! so a single drifting byte would poison every cache key and diff. Golden
//! files under tests/ lock the exact bytes.

use serde::{Deserialize, Serialize};

use crate::dataset::{sample_subset, DatasetSlice, QAExample};
use crate::equivalence::{is_equivalent, Scorer};
use crate::error::{Error, Result};
use crate::gateway::{Gateway, GenerationRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    ClosedBook,
    OpenBook,
    OpenBookInjection,
}

/// One in-context demonstration. Closed-book demos carry no context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub question: String,
    pub context: Option<String>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub instruction: String,
    pub layout: Layout,
    #[serde(default)]
    pub demonstrations: Vec<Demonstration>,
}

impl PromptTemplate {
    pub fn open_book(instruction: impl Into<String>) -> PromptTemplate {
        PromptTemplate {
            instruction: instruction.into(),
            layout: Layout::OpenBook,
            demonstrations: Vec::new(),
        }
    }

    pub fn closed_book() -> PromptTemplate {
        PromptTemplate {
            instruction: String::new(),
            layout: Layout::ClosedBook,
            demonstrations: Vec::new(),
        }
    }

    pub fn with_demonstrations(mut self, demonstrations: Vec<Demonstration>) -> PromptTemplate {
        self.demonstrations = demonstrations;
        self
    }
}

fn open_book_block(instruction: &str, context: &str, question: &str) -> String {
    format!(
        "Answer the question {instruction}.\n\nContext: {context}\nQuestion: {question}\nAnswer:"
    )
}

/// Open-book prompt: demonstrations rendered in the same layout with their
/// answers filled, blank-line separated, then the target block. No trailing
/// whitespace after the final "Answer:".
pub fn build_open_book_prompt(template: &PromptTemplate, example: &QAExample) -> Result<String> {
    if template.layout != Layout::OpenBook {
        return Err(Error::Prompt(
            "open-book builder needs an open_book template".into(),
        ));
    }
    if template.instruction.is_empty() {
        return Err(Error::Prompt(
            "open-book prompts need an instruction".into(),
        ));
    }
    let mut blocks = Vec::with_capacity(template.demonstrations.len() + 1);
    for demo in &template.demonstrations {
        let context = demo
            .context
            .as_deref()
            .ok_or_else(|| Error::Prompt("open-book demonstrations need a context".into()))?;
        blocks.push(format!(
            "{} {}",
            open_book_block(&template.instruction, context, &demo.question),
            demo.answer
        ));
    }
    blocks.push(open_book_block(
        &template.instruction,
        &example.context,
        &example.question,
    ));
    Ok(blocks.join("\n\n"))
}

/// Closed-book prompt: bare Question/Answer blocks, no context anywhere.
pub fn build_closed_book_prompt(template: &PromptTemplate, example: &QAExample) -> Result<String> {
    if template.layout != Layout::ClosedBook {
        return Err(Error::Prompt(
            "closed-book builder needs a closed_book template".into(),
        ));
    }
    let mut blocks = Vec::with_capacity(template.demonstrations.len() + 1);
    for demo in &template.demonstrations {
        if demo.context.is_some() {
            return Err(Error::Prompt(
                "closed-book demonstrations must not carry a context".into(),
            ));
        }
        blocks.push(format!(
            "Question: {}\nAnswer: {}",
            demo.question, demo.answer
        ));
    }
    blocks.push(format!("Question: {}\nAnswer:", example.question));
    Ok(blocks.join("\n\n"))
}

/// The instruction search dimensions: a brevity clause crossed with a
/// context-reference clause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSpace {
    pub brevity_options: Vec<String>,
    pub context_reference_options: Vec<String>,
}

impl Default for InstructionSpace {
    fn default() -> Self {
        let brevity = [
            "with as few words as possible",
            "concisely",
            "in the most compact form",
            "using minimal text",
            "by being succinct",
        ];
        let reference = [
            "using the context",
            "by reading from the context",
            "by consulting the provided context",
            "through the information given in the context",
            "by extracting information directly from the context",
            "by copying verbatim from the context",
        ];
        InstructionSpace {
            brevity_options: brevity.iter().map(|s| s.to_string()).collect(),
            context_reference_options: reference.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Cross product "{brevity} {context_reference}" in brevity-major order.
/// The default space yields exactly 30 instructions.
pub fn enumerate_instructions(space: &InstructionSpace) -> Vec<String> {
    let mut out =
        Vec::with_capacity(space.brevity_options.len() * space.context_reference_options.len());
    for brevity in &space.brevity_options {
        for reference in &space.context_reference_options {
            out.push(format!("{brevity} {reference}"));
        }
    }
    out
}

/// Default demonstration count per dataset. Short-context models get fewer
/// shots on the long-document datasets; long-context models take eight
/// everywhere.
pub fn default_k_shots(dataset: &str, long_context_model: bool) -> usize {
    if long_context_model {
        return 8;
    }
    match dataset {
        "NewsQA" | "TriviaQA" | "SearchQA" => 2,
        _ => 5,
    }
}

/// Draw k demonstrations from a training slice, deterministically. Uses the
/// first gold alias as the demo answer; demos stay fixed across every
/// condition of an experiment.
pub fn demonstrations_from(
    training: &DatasetSlice,
    k: usize,
    seed: u64,
    with_context: bool,
) -> Vec<Demonstration> {
    sample_subset(training, k, seed)
        .examples
        .into_iter()
        .map(|ex| Demonstration {
            question: ex.question,
            context: with_context.then_some(ex.context),
            answer: ex.gold_answers[0].clone(),
        })
        .collect()
}

/// Decode settings shared by every request of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub model_id: String,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl GenerationSettings {
    pub fn request(&self, prompt: String) -> GenerationRequest {
        GenerationRequest {
            prompt_text: prompt,
            model_id: self.model_id.clone(),
            max_new_tokens: self.max_new_tokens,
            temperature: 0.0,
            stop_sequences: self.stop_sequences.clone(),
        }
    }
}

/// Per-candidate outcome of a prompt search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub instruction: String,
    /// Fraction of scored answers equivalent to gold; absent when the
    /// candidate was disqualified.
    pub score: Option<f64>,
    pub scored: usize,
    pub equivalent: usize,
    pub generation_failures: usize,
    pub disqualified: bool,
}

/// Evaluate each candidate open-book on the subset and return the winner.
///
/// Score = equivalent / scored. Candidates failing generation on at least
/// half the subset are disqualified. Ties break toward the earlier
/// candidate.
pub fn prompt_search(
    candidates: &[PromptTemplate],
    subset: &DatasetSlice,
    gateway: &Gateway,
    settings: &GenerationSettings,
    scorer: &dyn Scorer,
) -> Result<(PromptTemplate, Vec<CandidateScore>)> {
    if subset.is_empty() {
        return Err(Error::domain("prompt search needs a non-empty subset"));
    }
    if candidates.is_empty() {
        return Err(Error::domain("prompt search needs at least one candidate"));
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for (index, candidate) in candidates.iter().enumerate() {
        let requests: Vec<GenerationRequest> = subset
            .examples
            .iter()
            .map(|ex| Ok(settings.request(build_open_book_prompt(candidate, ex)?)))
            .collect::<Result<_>>()?;
        let responses = gateway.generate_batch(&requests);
        let mut scored = 0usize;
        let mut equivalent = 0usize;
        let mut failures = 0usize;
        for (ex, response) in subset.examples.iter().zip(responses) {
            match response {
                Ok(r) => {
                    scored += 1;
                    if is_equivalent(&r.answer_text, &ex.gold_answers, &ex.question, scorer)?
                        .equivalent
                    {
                        equivalent += 1;
                    }
                }
                Err(e) => {
                    log::warn!("prompt search: generation failed for {}: {e}", ex.id);
                    failures += 1;
                }
            }
        }
        let disqualified = failures * 2 >= subset.len();
        scores.push(CandidateScore {
            index,
            instruction: candidate.instruction.clone(),
            score: (!disqualified && scored > 0).then(|| equivalent as f64 / scored as f64),
            scored,
            equivalent,
            generation_failures: failures,
            disqualified,
        });
    }
    let winner = scores
        .iter()
        .filter(|s| s.score.is_some())
        .max_by(|a, b| {
            a.score
                .partial_cmp(&b.score)
                .unwrap()
                // First candidate wins ties.
                .then(b.index.cmp(&a.index))
        })
        .ok_or_else(|| Error::domain("every prompt candidate was disqualified"))?;
    Ok((candidates[winner.index].clone(), scores))
}
