//! The two causal probes for parametric bias: masking the parametric answer
//! out of the context, and injecting it behind an "Unrelated text:" marker.
//!
//! Both hinge on the containment predicate: a case-insensitive,
//! whitespace-collapsed substring search of the parametric answer in the
//! context. Masking edits the original context in place — it locates
//! occurrences through a folded view that maps back to original byte
//! spans, then blanks the first token of each occurrence and rescans until
//! the answer is gone.

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};

use crate::dataset::QAExample;
use crate::equivalence::Scorer;
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::pipeline::{collect_outcomes, Condition, ConflictCase, Stage3Output};
use crate::prompt::{build_open_book_prompt, GenerationSettings, Layout, PromptTemplate};
use crate::registry::{options, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    Mask,
    Inject,
}

/// Masking knobs. The defaults give the testable postcondition: every
/// occurrence masked, rescanning until elimination or the pass budget runs
/// out. `single_pass` and `first_occurrence_only` weaken that for ablations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskOptions {
    #[serde(default = "default_max_passes")]
    pub max_passes: usize,
    #[serde(default)]
    pub single_pass: bool,
    #[serde(default)]
    pub first_occurrence_only: bool,
}

fn default_max_passes() -> usize {
    16
}

impl Default for MaskOptions {
    fn default() -> Self {
        MaskOptions {
            max_passes: default_max_passes(),
            single_pass: false,
            first_occurrence_only: false,
        }
    }
}

/// Splits text into tokens for masking. The harness has no access to the
/// target model's tokenizer, so the default is whitespace tokens; an
/// external subprocess hook exists for model-faithful token boundaries.
pub trait Tokenizer: Send + Sync {
    /// Byte span of the first token in `text`, or None if there is none.
    fn first_token_span(&self, text: &str) -> Result<Option<(usize, usize)>>;
}

pub static TOKENIZERS: Lazy<Registry<dyn Tokenizer>> = Lazy::new(|| {
    Registry::new("tokenizer")
        .register("whitespace", |_, _| {
            Ok(Box::new(WhitespaceTokenizer) as Box<dyn Tokenizer>)
        })
        .register("subprocess", |v, _| {
            let opts: SubprocessTokenizerOptions = options(v, "subprocess tokenizer")?;
            let tokenizer: Box<dyn Tokenizer> = Box::new(SubprocessTokenizer::new(opts));
            Ok(tokenizer)
        })
});

pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn first_token_span(&self, text: &str) -> Result<Option<(usize, usize)>> {
        let mut start = None;
        for (idx, ch) in text.char_indices() {
            match (start, ch.is_whitespace()) {
                (None, false) => start = Some(idx),
                (Some(s), true) => return Ok(Some((s, idx))),
                _ => {}
            }
        }
        Ok(start.map(|s| (s, text.len())))
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct SubprocessTokenizerOptions {
    /// Command and arguments. The process reads {"text": ...} on stdin and
    /// must print {"tokens": [[start, end], ...]} byte offsets on stdout.
    pub command: Vec<String>,
}

pub struct SubprocessTokenizer {
    command: Vec<String>,
}

#[derive(Deserialize)]
struct TokenSpans {
    tokens: Vec<(usize, usize)>,
}

impl SubprocessTokenizer {
    pub fn new(opts: SubprocessTokenizerOptions) -> SubprocessTokenizer {
        SubprocessTokenizer {
            command: opts.command,
        }
    }
}

impl Tokenizer for SubprocessTokenizer {
    fn first_token_span(&self, text: &str) -> Result<Option<(usize, usize)>> {
        use std::io::Write;
        use std::process::{Command, Stdio};
        let program = self
            .command
            .first()
            .ok_or_else(|| Error::config("subprocess tokenizer needs a command"))?;
        let mut child = Command::new(program)
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::domain(format!("spawn tokenizer {program}: {e}")))?;
        let payload = serde_json::json!({ "text": text }).to_string();
        child
            .stdin
            .take()
            .expect("piped stdin")
            .write_all(payload.as_bytes())
            .map_err(|e| Error::domain(format!("tokenizer stdin: {e}")))?;
        let output = child
            .wait_with_output()
            .map_err(|e| Error::domain(format!("tokenizer wait: {e}")))?;
        if !output.status.success() {
            return Err(Error::domain(format!(
                "tokenizer exited with {}",
                output.status
            )));
        }
        let spans: TokenSpans = serde_json::from_slice(&output.stdout)
            .map_err(|e| Error::domain(format!("tokenizer output: {e}")))?;
        match spans.tokens.first().copied() {
            None => Ok(None),
            Some((s, e)) => {
                if s >= e
                    || e > text.len()
                    || !text.is_char_boundary(s)
                    || !text.is_char_boundary(e)
                {
                    return Err(Error::domain(format!(
                        "tokenizer returned invalid span ({s}, {e})"
                    )));
                }
                Ok(Some((s, e)))
            }
        }
    }
}

/// Case- and whitespace-folded view of a string: every character lowercased,
/// every whitespace run collapsed to one space, with a map from each folded
/// char back to its original byte span.
struct Folded {
    text: String,
    /// Original byte span per folded char, parallel to folded char order.
    spans: Vec<(usize, usize)>,
    /// Byte offset in `text` of each folded char, for match mapping.
    offsets: Vec<usize>,
}

fn fold(original: &str) -> Folded {
    let mut text = String::with_capacity(original.len());
    let mut spans = Vec::new();
    let mut offsets = Vec::new();
    let mut pending_ws: Option<(usize, usize)> = None;
    for (idx, ch) in original.char_indices() {
        let end = idx + ch.len_utf8();
        if ch.is_whitespace() {
            pending_ws = Some(match pending_ws {
                Some((s, _)) => (s, end),
                None => (idx, end),
            });
            continue;
        }
        if let Some(span) = pending_ws.take() {
            offsets.push(text.len());
            text.push(' ');
            spans.push(span);
        }
        for lower in ch.to_lowercase() {
            offsets.push(text.len());
            text.push(lower);
            spans.push((idx, end));
        }
    }
    if let Some(span) = pending_ws {
        offsets.push(text.len());
        text.push(' ');
        spans.push(span);
    }
    Folded {
        text,
        spans,
        offsets,
    }
}

fn fold_needle(a_p: &str) -> String {
    a_p.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Does the parametric answer appear in the context? Case-insensitive
/// substring search after collapsing whitespace on both sides. Empty
/// answers never match.
pub fn contains_answer(context: &str, a_p: &str) -> bool {
    let needle = fold_needle(a_p);
    if needle.is_empty() {
        return false;
    }
    fold(context).text.contains(&needle)
}

/// Original byte spans of all non-overlapping occurrences, left to right.
fn occurrence_spans(context: &str, needle: &str) -> Vec<(usize, usize)> {
    let folded = fold(context);
    let mut result: Vec<(usize, usize)> = Vec::new();
    let mut search_from = 0usize;
    while let Some(rel) = folded.text[search_from..].find(needle) {
        let start_byte = search_from + rel;
        let end_byte = start_byte + needle.len();
        // Folded byte offset -> folded char index -> original span.
        let first_char = folded
            .offsets
            .binary_search(&start_byte)
            .expect("match starts on a char boundary");
        let last_char = match folded.offsets.binary_search(&(end_byte - 1)) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let span = (folded.spans[first_char].0, folded.spans[last_char].1);
        // Lowercase expansions can make adjacent folded matches share an
        // original char; keep original spans disjoint so in-place edits stay
        // on char boundaries. Skipped overlaps resurface on the next pass.
        if result.last().is_none_or(|prev| span.0 >= prev.1) {
            result.push(span);
        }
        search_from = end_byte;
    }
    result
}

/// Mask every occurrence of the parametric answer by blanking the first
/// token of each occurrence, rescanning until the answer no longer appears
/// or the pass budget is exhausted (an error: pathological repetition).
///
/// On success the no-occurrence postcondition holds; when the answer never
/// appeared the context comes back byte-identical.
pub fn mask_answer(context: &str, a_p: &str) -> Result<String> {
    mask_answer_with(context, a_p, &MaskOptions::default(), &WhitespaceTokenizer)
}

pub fn mask_answer_with(
    context: &str,
    a_p: &str,
    opts: &MaskOptions,
    tokenizer: &dyn Tokenizer,
) -> Result<String> {
    let needle = fold_needle(a_p);
    if needle.is_empty() || !fold(context).text.contains(&needle) {
        return Ok(context.to_string());
    }
    let mut current = context.to_string();
    for _pass in 0..opts.max_passes.max(1) {
        let mut spans = occurrence_spans(&current, &needle);
        if spans.is_empty() {
            return Ok(current);
        }
        if opts.first_occurrence_only {
            spans.truncate(1);
        }
        // Edit right-to-left so earlier spans stay valid.
        for (start, end) in spans.into_iter().rev() {
            let segment = &current[start..end];
            let Some((ts, te)) = tokenizer.first_token_span(segment)? else {
                continue;
            };
            current.replace_range(start + ts..start + te, " ");
        }
        if opts.single_pass {
            return Ok(current);
        }
    }
    if fold(&current).text.contains(&needle) {
        return Err(Error::MaskBudget {
            answer: a_p.to_string(),
            passes: opts.max_passes,
        });
    }
    Ok(current)
}

/// Open-book prompt with the parametric answer appended behind the
/// "Unrelated text:" marker, between context and question. The context
/// bytes are never modified.
pub fn inject_answer_prompt(
    template: &PromptTemplate,
    example: &QAExample,
    a_p: &str,
) -> Result<String> {
    if template.layout != Layout::OpenBook {
        return Err(Error::Prompt(
            "injection needs an open_book template".into(),
        ));
    }
    if a_p.trim().is_empty() {
        return Err(Error::Prompt(
            "cannot inject an empty parametric answer".into(),
        ));
    }
    let baseline = build_open_book_prompt(template, example)?;
    let question_line = format!("\nQuestion: {}\nAnswer:", example.question);
    let insert_at = baseline
        .rfind(&question_line)
        .expect("open-book prompt ends with the question block");
    let mut prompt = String::with_capacity(baseline.len() + a_p.len() + 18);
    prompt.push_str(&baseline[..insert_at]);
    prompt.push_str("\nUnrelated text: ");
    prompt.push_str(a_p);
    prompt.push_str(&baseline[insert_at..]);
    Ok(prompt)
}

/// A fully resolved intervention: which probe to run plus the masking
/// machinery it may need.
pub struct InterventionSpec<'a> {
    pub kind: InterventionKind,
    pub mask: MaskOptions,
    pub tokenizer: &'a dyn Tokenizer,
}

/// Re-run the open-book stage under an intervention. Masking rewrites the
/// context only where the parametric answer actually appears; injection
/// applies to every case. Returns the outcomes plus how many prompts were
/// actually altered relative to baseline.
pub struct InterventionRun {
    pub output: Stage3Output,
    pub condition: Condition,
    pub altered: usize,
}

pub fn run_intervention(
    cases: &[ConflictCase],
    spec: &InterventionSpec,
    template: &PromptTemplate,
    gateway: &Gateway,
    settings: &GenerationSettings,
    scorer: &dyn Scorer,
) -> Result<InterventionRun> {
    if template.layout != Layout::OpenBook {
        return Err(Error::Prompt(
            "interventions need an open_book template".into(),
        ));
    }
    let mut altered = 0usize;
    let mut requests = Vec::with_capacity(cases.len());
    let mut prompt_errors: Vec<(usize, Error)> = Vec::new();
    for (idx, case) in cases.iter().enumerate() {
        let prompt = match spec.kind {
            InterventionKind::Mask => {
                if contains_answer(&case.example.context, &case.a_p) {
                    altered += 1;
                    let masked = mask_answer_with(
                        &case.example.context,
                        &case.a_p,
                        &spec.mask,
                        spec.tokenizer,
                    );
                    match masked {
                        Ok(context) => {
                            let mut ex = case.example.clone();
                            ex.context = context;
                            build_open_book_prompt(template, &ex)
                        }
                        Err(e) => Err(e),
                    }
                } else {
                    build_open_book_prompt(template, &case.example)
                }
            }
            InterventionKind::Inject => {
                altered += 1;
                inject_answer_prompt(template, &case.example, &case.a_p)
            }
        };
        match prompt {
            Ok(p) => requests.push(Some(settings.request(p))),
            Err(e) => {
                requests.push(None);
                prompt_errors.push((idx, e));
            }
        }
    }

    // Generate only the buildable prompts, then stitch results back in
    // input order so failures stay per-case.
    let live: Vec<crate::gateway::GenerationRequest> = requests.iter().flatten().cloned().collect();
    let mut generated = gateway.generate_batch(&live).into_iter();
    let responses: Vec<Result<crate::gateway::GenerationResponse>> = requests
        .iter()
        .enumerate()
        .map(|(idx, slot)| match slot {
            Some(_) => generated.next().expect("one response per live request"),
            None => {
                let (_, e) = prompt_errors
                    .iter()
                    .position(|(i, _)| *i == idx)
                    .map(|p| prompt_errors.remove(p))
                    .expect("prompt error recorded");
                Err(e)
            }
        })
        .collect();

    let condition = match spec.kind {
        InterventionKind::Mask => Condition::Masked,
        InterventionKind::Inject => Condition::Injected,
    };
    let output = collect_outcomes(cases, responses, scorer, condition, gateway.parallelism())?;
    Ok(InterventionRun {
        output,
        condition,
        altered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SUPER_BOWL: &str = "The Super Bowl 50 halftime show was headlined by the British rock \
group Coldplay with special guest performers Beyoncé and Bruno Mars.";

    #[test]
    fn containment_examples() {
        assert!(contains_answer(SUPER_BOWL, "Beyoncé"));
        assert!(!contains_answer(SUPER_BOWL, "Taylor Swift"));
        assert!(contains_answer("foo  Bar baz", "bar"));
        assert!(contains_answer("foo\tbar  baz", "Bar baz"));
        assert!(!contains_answer("anything", ""));
        assert!(!contains_answer("anything", "   "));
    }

    #[test]
    fn mask_removes_single_token_answer() {
        let masked = mask_answer(SUPER_BOWL, "Beyoncé").unwrap();
        assert!(!contains_answer(&masked, "Beyoncé"));
        // The token itself becomes one space; the surrounding spaces stay.
        assert!(masked.contains("performers   and Bruno Mars"));
        assert!(masked.len() < SUPER_BOWL.len());
    }

    #[test]
    fn mask_is_noop_when_absent() {
        let masked = mask_answer(SUPER_BOWL, "Taylor Swift").unwrap();
        assert_eq!(masked, SUPER_BOWL);
    }

    #[test]
    fn mask_eliminates_overlapping_repetitions() {
        let masked = mask_answer("X Y Z X Y", "X Y").unwrap();
        assert!(!contains_answer(&masked, "X Y"));
        let masked = mask_answer("a a a a a", "a a").unwrap();
        assert!(!contains_answer(&masked, "a a"));
    }

    #[test]
    fn mask_multi_token_answer_drops_first_token() {
        let masked = mask_answer("performers Bruno Mars tonight", "Bruno Mars").unwrap();
        assert!(!contains_answer(&masked, "Bruno Mars"));
        // Only the first token of the occurrence goes away.
        assert!(masked.contains("Mars"));
    }

    #[test]
    fn mask_single_pass_flag_stops_early() {
        let opts = MaskOptions {
            single_pass: true,
            ..MaskOptions::default()
        };
        let out = mask_answer_with("b a a", "b a", &opts, &WhitespaceTokenizer).unwrap();
        // One pass blanks "b"; the result may or may not still fold-contain
        // the needle, but single-pass mode must not error.
        assert!(!out.contains('b'));
    }

    #[test]
    fn mask_budget_exhaustion_errors() {
        let opts = MaskOptions {
            max_passes: 1,
            ..MaskOptions::default()
        };
        // One pass cannot eliminate the chained repetition "a a a": masking
        // the first token of the single non-overlapping occurrence leaves
        // "a" twice.
        let err = mask_answer_with("a a a", "a a", &opts, &WhitespaceTokenizer);
        assert!(matches!(err, Err(Error::MaskBudget { .. })));
    }

    #[test]
    fn mask_survives_lowercase_expansion_overlaps() {
        // 'İ' folds to "i" plus a combining dot, so adjacent matches of a
        // needle straddling the expansion map to overlapping original
        // spans. Must not panic; the usual success/budget contract holds.
        let context = "İİİ xİx";
        let needle = "\u{307}i";
        match mask_answer(context, needle) {
            Ok(masked) => assert!(!contains_answer(&masked, needle)),
            Err(Error::MaskBudget { .. }) => {}
            Err(other) => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn mask_never_grows_context() {
        for (ctx, ap) in [
            ("word word word", "word"),
            ("ABC abc AbC", "abc"),
            ("x  y  x  y", "x y"),
        ] {
            let masked = mask_answer(ctx, ap).unwrap();
            assert!(masked.len() <= ctx.len(), "{ctx:?} grew to {masked:?}");
        }
    }

    fn bbc_example() -> QAExample {
        QAExample {
            id: "bbc".into(),
            question: "Aside from BBC Radio 5, what radio station will broadcast the game?".into(),
            context: "In the United Kingdom, BBC Radio 5 Live and 5 Live Sports Extra will \
carry the contest. The BBC will carry its own British English broadcast, with Greg Brady, \
Darren Fletcher and Rocky Boiman on commentary."
                .into(),
            gold_answers: vec!["talkSPORT".into()],
            source_dataset: "TestSet".into(),
        }
    }

    #[test]
    fn inject_places_unrelated_text_between_context_and_question() {
        let template = PromptTemplate::open_book(
            "with as few words as possible by extracting information directly from the context",
        );
        let ex = bbc_example();
        let prompt = inject_answer_prompt(&template, &ex, "talkSPORT").unwrap();
        assert!(prompt.contains("commentary.\nUnrelated text: talkSPORT\nQuestion: Aside"));

        // Removing the injected line recovers the baseline prompt byte for byte.
        let baseline = build_open_book_prompt(&template, &ex).unwrap();
        let line = "\nUnrelated text: talkSPORT";
        let stripped = prompt.replacen(line, "", 1);
        assert_eq!(stripped, baseline);
    }

    #[test]
    fn inject_rejects_empty_answer() {
        let template = PromptTemplate::open_book("i");
        assert!(inject_answer_prompt(&template, &bbc_example(), "  ").is_err());
    }

    #[test]
    fn whitespace_tokenizer_spans() {
        let t = WhitespaceTokenizer;
        assert_eq!(t.first_token_span("  foo bar").unwrap(), Some((2, 5)));
        assert_eq!(t.first_token_span("foo").unwrap(), Some((0, 3)));
        assert_eq!(t.first_token_span("   ").unwrap(), None);
        assert_eq!(t.first_token_span("").unwrap(), None);
    }

    #[test]
    fn registry_kinds() {
        assert_eq!(TOKENIZERS.kinds(), vec!["subprocess", "whitespace"]);
    }

    #[test]
    fn subprocess_tokenizer_round_trip() {
        if std::process::Command::new("python3")
            .arg("--version")
            .output()
            .is_err()
        {
            eprintln!("skipping: python3 not available");
            return;
        }
        let program = r#"
import json, re, sys
text = json.load(sys.stdin)["text"].encode()
spans = [[m.start(), m.end()] for m in re.finditer(rb"\S+", text)]
print(json.dumps({"tokens": spans}))
"#;
        let tokenizer = SubprocessTokenizer::new(SubprocessTokenizerOptions {
            command: vec!["python3".into(), "-c".into(), program.into()],
        });
        assert_eq!(
            tokenizer.first_token_span("  foo bar").unwrap(),
            Some((2, 5))
        );
        assert_eq!(tokenizer.first_token_span("   ").unwrap(), None);
        let masked =
            mask_answer_with("x wrong y", "wrong", &MaskOptions::default(), &tokenizer).unwrap();
        assert!(!contains_answer(&masked, "wrong"));
        assert_eq!(masked, "x   y");
    }

    proptest! {
        /// Fuzzed masking postcondition: on success the answer is gone, and
        /// absent answers leave the context byte-identical.
        #[test]
        fn mask_postcondition(ctx_words in proptest::collection::vec("[abXY]{1,3}", 0..12),
                              ap_words in proptest::collection::vec("[abXY]{1,3}", 1..3)) {
            let context = ctx_words.join(" ");
            let a_p = ap_words.join(" ");
            let had_answer = contains_answer(&context, &a_p);
            match mask_answer(&context, &a_p) {
                Ok(masked) => {
                    prop_assert!(!contains_answer(&masked, &a_p));
                    prop_assert!(masked.len() <= context.len());
                    if !had_answer {
                        prop_assert_eq!(masked, context);
                    }
                }
                Err(Error::MaskBudget { .. }) => {
                    prop_assert!(had_answer);
                }
                Err(other) => return Err(TestCaseError::fail(format!("unexpected error {other}"))),
            }
        }

        /// Masking changes nothing outside matched occurrences: the suffix
        /// and prefix around the first edit always survive.
        #[test]
        fn mask_only_edits_inside_occurrences(prefix in "[cd ]{0,8}", suffix in "[cd ]{0,8}") {
            let context = format!("{prefix}target{suffix}");
            let masked = mask_answer(&context, "target").unwrap();
            prop_assert!(masked.starts_with(&prefix));
            prop_assert!(masked.ends_with(&suffix));
        }
    }
}
