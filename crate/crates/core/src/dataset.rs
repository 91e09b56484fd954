//! MRQA-format dataset ingestion and deterministic subset sampling.
//!
//! MRQA dumps are line-delimited JSON: one header line followed by one
//! record per context, each holding a `qas` array. We flatten that to one
//! [`QAExample`] per question, keeping file order. Only the plain-text
//! `answers` aliases are used; token-span annotations are ignored since all
//! downstream checks are string-level.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One (question, context, gold answers) triplet from an open-book QA
/// dataset. `gold_answers` holds every acceptable surface form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub context: String,
    pub gold_answers: Vec<String>,
    pub source_dataset: String,
}

/// Where a slice came from: the source file and the chain of filters applied
/// so far (e.g. `["full", "closed_book_wrong", "knowledge_conflict"]`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub lineage: Vec<String>,
}

/// An ordered, immutable collection of examples. Ordering is file order and
/// stable across runs for identical input bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSlice {
    pub examples: Vec<QAExample>,
    pub provenance: Provenance,
}

impl DatasetSlice {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// A copy with `tag` appended to the lineage chain.
    pub fn derive(&self, examples: Vec<QAExample>, tag: &str) -> DatasetSlice {
        let mut lineage = self.provenance.lineage.clone();
        lineage.push(tag.to_string());
        DatasetSlice {
            examples,
            provenance: Provenance {
                source: self.provenance.source.clone(),
                lineage,
            },
        }
    }
}

/// One qas entry dropped during parsing, with the reason. Dirty entries are
/// skipped and counted rather than failing the whole load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub line: usize,
    pub qid: Option<String>,
    pub reason: String,
}

/// Result of parsing an MRQA stream: the slice plus the skip report.
#[derive(Debug, Clone)]
pub struct ParsedDataset {
    pub slice: DatasetSlice,
    pub skipped: Vec<SkippedEntry>,
}

#[derive(Deserialize)]
struct MrqaRecord {
    context: String,
    qas: Vec<MrqaQa>,
}

#[derive(Deserialize)]
struct MrqaQa {
    qid: serde_json::Value,
    question: String,
    #[serde(default)]
    answers: Option<Vec<String>>,
}

/// Parse an MRQA-format stream into a [`DatasetSlice`].
///
/// The first line is a header object and is discarded. Each following line
/// carries a `context` and a `qas` array; every qas entry becomes one
/// example. Entries without a usable answer list are skipped and reported.
/// A malformed JSON line or a duplicate qid is an error naming the line.
pub fn parse_mrqa<R: BufRead>(reader: R, source_name: &str, origin: &str) -> Result<ParsedDataset> {
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    let mut seen_ids: HashSet<String> = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if line_no == 1 {
            // Header line: validate it is JSON, then drop it.
            serde_json::from_str::<serde_json::Value>(&line).map_err(|e| Error::Parse {
                line: line_no,
                message: format!("header: {e}"),
            })?;
            continue;
        }
        let record: MrqaRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let context = record.context;
        if context.trim().is_empty() {
            for qa in &record.qas {
                skipped.push(SkippedEntry {
                    line: line_no,
                    qid: Some(qid_string(&qa.qid)),
                    reason: "empty context".into(),
                });
            }
            continue;
        }
        for qa in record.qas {
            let qid = qid_string(&qa.qid);
            let answers: Vec<String> = qa
                .answers
                .unwrap_or_default()
                .into_iter()
                .filter(|a| !a.trim().is_empty())
                .collect();
            if answers.is_empty() {
                skipped.push(SkippedEntry {
                    line: line_no,
                    qid: Some(qid),
                    reason: "missing or empty answers".into(),
                });
                continue;
            }
            if !seen_ids.insert(qid.clone()) {
                return Err(Error::DuplicateId {
                    id: qid,
                    line: line_no,
                });
            }
            examples.push(QAExample {
                id: qid,
                question: qa.question,
                context: context.clone(),
                gold_answers: answers,
                source_dataset: source_name.to_string(),
            });
        }
    }

    Ok(ParsedDataset {
        slice: DatasetSlice {
            examples,
            provenance: Provenance {
                source: origin.to_string(),
                lineage: vec!["full".to_string()],
            },
        },
        skipped,
    })
}

/// Load an MRQA file, transparently inflating gzip (detected by magic bytes,
/// not extension).
pub fn load_mrqa_file(path: &Path, source_name: &str) -> Result<ParsedDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let head = reader.fill_buf().map_err(|e| Error::io(path, e))?;
    let gzipped = head.len() >= 2 && head[0] == 0x1f && head[1] == 0x8b;
    let origin = path.display().to_string();
    if gzipped {
        let inflater = BufReader::new(flate2::read::GzDecoder::new(reader));
        parse_mrqa(inflater, source_name, &origin)
    } else {
        parse_mrqa(reader, source_name, &origin)
    }
}

/// Read a whole file's bytes and return the sha256 hex digest, for run
/// manifests.
pub fn content_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn qid_string(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Serialize a slice back to MRQA-style lines (header + one record per
/// example). Reparsing the output yields the identical example sequence.
pub fn write_mrqa<W: Write>(slice: &DatasetSlice, mut w: W) -> Result<()> {
    let write_err = |e: std::io::Error| Error::io("<mrqa writer>", e);
    let header = serde_json::json!({"header": {"dataset": slice
        .examples
        .first()
        .map(|e| e.source_dataset.as_str())
        .unwrap_or(""), "lineage": slice.provenance.lineage}});
    writeln!(w, "{header}").map_err(write_err)?;
    for ex in &slice.examples {
        let record = serde_json::json!({
            "context": ex.context,
            "qas": [{"qid": ex.id, "question": ex.question, "answers": ex.gold_answers}],
        });
        writeln!(w, "{record}").map_err(write_err)?;
    }
    Ok(())
}

/// Canonical line-delimited JSON form used for stage artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CanonicalRow {
    id: String,
    question: String,
    context: String,
    gold_answers: Vec<String>,
    source_dataset: String,
    lineage: Vec<String>,
}

pub fn write_canonical<W: Write>(slice: &DatasetSlice, mut w: W) -> Result<()> {
    for ex in &slice.examples {
        let row = CanonicalRow {
            id: ex.id.clone(),
            question: ex.question.clone(),
            context: ex.context.clone(),
            gold_answers: ex.gold_answers.clone(),
            source_dataset: ex.source_dataset.clone(),
            lineage: slice.provenance.lineage.clone(),
        };
        serde_json::to_writer(&mut w, &row)?;
        writeln!(w).map_err(|e| Error::io("<canonical writer>", e))?;
    }
    Ok(())
}

pub fn read_canonical<R: BufRead>(reader: R, origin: &str) -> Result<DatasetSlice> {
    let mut examples = Vec::new();
    let mut lineage = vec!["full".to_string()];
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: CanonicalRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        lineage = row.lineage;
        examples.push(QAExample {
            id: row.id,
            question: row.question,
            context: row.context,
            gold_answers: row.gold_answers,
            source_dataset: row.source_dataset,
        });
    }
    Ok(DatasetSlice {
        examples,
        provenance: Provenance {
            source: origin.to_string(),
            lineage,
        },
    })
}

/// Deterministic pseudo-random subset of `min(k, len)` examples.
///
/// Selection depends only on the slice contents, `k` and `seed`; the chosen
/// examples keep their original relative order. Uses an explicit partial
/// Fisher-Yates over indices so the result is stable across library
/// versions.
pub fn sample_subset(slice: &DatasetSlice, k: usize, seed: u64) -> DatasetSlice {
    let n = slice.examples.len();
    let take = k.min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in 0..take {
        // next_u64 modulo the remaining range, reduced in u64 so the pick
        // sequence is identical across platforms; bias is irrelevant here.
        let j = i + (rng.next_u64() % (n - i).max(1) as u64) as usize;
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..take].to_vec();
    chosen.sort_unstable();
    let examples = chosen
        .into_iter()
        .map(|i| slice.examples[i].clone())
        .collect();
    slice.derive(examples, &format!("sample(k={k},seed={seed})"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture_line(context: &str, qas: &[(&str, &str, &[&str])]) -> String {
        let qas: Vec<serde_json::Value> = qas
            .iter()
            .map(|(qid, q, answers)| {
                serde_json::json!({"qid": qid, "question": q, "answers": answers})
            })
            .collect();
        serde_json::json!({"context": context, "qas": qas}).to_string()
    }

    fn parse(lines: &[String]) -> ParsedDataset {
        let joined = lines.join("\n");
        parse_mrqa(joined.as_bytes(), "TestSet", "mem").unwrap()
    }

    #[test]
    fn parses_one_example_per_qa_entry() {
        let lines = vec![
            r#"{"header": {"dataset": "TestSet"}}"#.to_string(),
            fixture_line(
                "In 1873, Tesla returned to his birthtown, Smiljan. Shortly after he arrived, Tesla contracted cholera.",
                &[("x1", "What disease did Tesla contract in 1873?", &["Cholera"])],
            ),
        ];
        let parsed = parse(&lines);
        assert_eq!(parsed.slice.len(), 1);
        let ex = &parsed.slice.examples[0];
        assert_eq!(ex.id, "x1");
        assert_eq!(ex.gold_answers, vec!["Cholera"]);
        assert_eq!(parsed.slice.provenance.lineage, vec!["full"]);
    }

    #[test]
    fn header_only_gives_empty_slice() {
        let lines = vec![r#"{"header": {}}"#.to_string()];
        let parsed = parse(&lines);
        assert!(parsed.slice.is_empty());
        assert!(parsed.skipped.is_empty());
    }

    #[test]
    fn flattens_grouped_qas_in_file_order() {
        // 1 header + 2 records carrying 2 and 3 qas entries -> 5 examples.
        let lines = vec![
            r#"{"header": {}}"#.to_string(),
            fixture_line("ctx one", &[("a", "q1", &["1"]), ("b", "q2", &["2"])]),
            fixture_line(
                "ctx two",
                &[
                    ("c", "q3", &["3"]),
                    ("d", "q4", &["4"]),
                    ("e", "q5", &["5"]),
                ],
            ),
        ];
        let parsed = parse(&lines);
        assert_eq!(parsed.slice.len(), 5);
        let ids: Vec<&str> = parsed
            .slice
            .examples
            .iter()
            .map(|e| e.id.as_str())
            .collect();
        assert_eq!(ids, vec!["a", "b", "c", "d", "e"]);
    }

    #[test]
    fn skips_entries_without_answers() {
        let lines = vec![
            r#"{"header": {}}"#.to_string(),
            r#"{"context": "c", "qas": [{"qid": "a", "question": "q"}, {"qid": "b", "question": "q", "answers": []}, {"qid": "c", "question": "q", "answers": ["  "]}, {"qid": "d", "question": "q", "answers": ["keep"]}]}"#
                .to_string(),
        ];
        let parsed = parse(&lines);
        assert_eq!(parsed.slice.len(), 1);
        assert_eq!(parsed.skipped.len(), 3);
        assert_eq!(parsed.slice.examples[0].id, "d");
    }

    #[test]
    fn malformed_line_errors_with_line_number() {
        let input = "{\"header\": {}}\nnot json\n";
        let err = parse_mrqa(input.as_bytes(), "x", "mem").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_qid_is_an_error() {
        let lines = [
            r#"{"header": {}}"#.to_string(),
            fixture_line("c1", &[("dup", "q", &["a"])]),
            fixture_line("c2", &[("dup", "q", &["a"])]),
        ];
        let joined = lines.join("\n");
        let err = parse_mrqa(joined.as_bytes(), "x", "mem").unwrap_err();
        assert!(matches!(err, Error::DuplicateId { .. }));
    }

    #[test]
    fn sample_subset_edges() {
        let lines = [
            r#"{"header": {}}"#.to_string(),
            fixture_line(
                "c",
                &[
                    ("a", "q", &["1"]),
                    ("b", "q", &["1"]),
                    ("c", "q", &["1"]),
                    ("d", "q", &["1"]),
                    ("e", "q", &["1"]),
                    ("f", "q", &["1"]),
                    ("g", "q", &["1"]),
                    ("h", "q", &["1"]),
                    ("i", "q", &["1"]),
                    ("j", "q", &["1"]),
                ],
            ),
        ];
        let slice = parse(&lines).slice;
        assert!(sample_subset(&slice, 0, 7).is_empty());
        assert_eq!(sample_subset(&slice, 10, 7).len(), 10);
        assert_eq!(sample_subset(&slice, 99, 7).len(), 10);
        let once = sample_subset(&slice, 5, 42);
        let twice = sample_subset(&slice, 5, 42);
        assert_eq!(once.examples, twice.examples);
        assert_ne!(
            sample_subset(&slice, 5, 1).examples,
            sample_subset(&slice, 5, 2).examples,
            "different seeds should pick different subsets on 10 choose 5"
        );
        assert_eq!(once.provenance.lineage, vec!["full", "sample(k=5,seed=42)"]);
    }

    proptest! {
        #[test]
        fn mrqa_round_trip(contexts in proptest::collection::vec("[a-zA-Z0-9 ,.]{1,40}", 1..8)) {
            let lines: Vec<String> = std::iter::once(r#"{"header": {}}"#.to_string())
                .chain(contexts.iter().enumerate().map(|(i, c)| {
                    fixture_line(c, &[(&format!("id{i}"), "question?", &["ans"])])
                }))
                .collect();
            let parsed = parse(&lines);
            let mut buf = Vec::new();
            write_mrqa(&parsed.slice, &mut buf).unwrap();
            let reparsed = parse_mrqa(buf.as_slice(), "TestSet", "mem").unwrap();
            prop_assert_eq!(&reparsed.slice.examples, &parsed.slice.examples);

            // Parsing is idempotent: a second round trip changes nothing.
            let mut buf2 = Vec::new();
            write_mrqa(&reparsed.slice, &mut buf2).unwrap();
            prop_assert_eq!(buf, buf2);
        }

        #[test]
        fn subset_is_subset_and_ordered(k in 0usize..30, seed in 0u64..1000) {
            let lines: Vec<String> = std::iter::once(r#"{"header": {}}"#.to_string())
                .chain((0..20).map(|i| fixture_line("ctx", &[(&format!("id{i}"), "q", &["a"])])))
                .collect();
            let slice = parse(&lines).slice;
            let sub = sample_subset(&slice, k, seed);
            prop_assert_eq!(sub.len(), k.min(20));
            let all_ids: Vec<&str> = slice.examples.iter().map(|e| e.id.as_str()).collect();
            let mut cursor = 0usize;
            for ex in &sub.examples {
                // Every sampled id appears in the original, in order.
                let pos = all_ids[cursor..]
                    .iter()
                    .position(|id| *id == ex.id)
                    .expect("sampled id missing from original");
                cursor += pos + 1;
            }
        }
    }

    #[test]
    fn canonical_round_trip() {
        let lines = vec![
            r#"{"header": {}}"#.to_string(),
            fixture_line("some context", &[("q1", "what?", &["x", "y"])]),
        ];
        let slice = parse(&lines).slice;
        let mut buf = Vec::new();
        write_canonical(&slice, &mut buf).unwrap();
        let back = read_canonical(buf.as_slice(), "mem").unwrap();
        assert_eq!(back.examples, slice.examples);
        assert_eq!(back.provenance.lineage, slice.provenance.lineage);
    }

    #[test]
    fn gzip_detection_by_magic_bytes() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{}\n{}\n",
            r#"{"header": {}}"#,
            fixture_line("ctx", &[("z1", "q", &["a"])])
        );

        let plain = dir.path().join("plain.jsonl");
        std::fs::write(&plain, &body).unwrap();
        // Deliberately misleading extension: detection must use magic bytes.
        let gz = dir.path().join("data.jsonl");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(body.as_bytes()).unwrap();
        std::fs::write(&gz, enc.finish().unwrap()).unwrap();

        let a = load_mrqa_file(&plain, "T").unwrap();
        let b = load_mrqa_file(&gz, "T").unwrap();
        assert_eq!(a.slice.examples, b.slice.examples);
    }
}
