//! End-to-end orchestration: wire up the configured strategies, run the
//! stages in order, persist line-delimited artifacts with per-stage
//! manifests, and emit the report files.
//!
//! Every stage writes its rows as JSONL next to a small manifest carrying a
//! resume key (a digest of everything the stage's output depends on) and
//! its counts. A re-run with an unchanged key loads the artifact instead of
//! recomputing, so runs resume at stage granularity and a warm re-run makes
//! no remote calls at all. Reports are pure views over the artifacts and
//! are rewritten on every run.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{key_hash, InterventionConfig, PromptConfig, RunConfig};
use crate::dataset::{content_hash, load_mrqa_file, DatasetSlice};
use crate::equivalence::nli::{Nli, NLIS};
use crate::equivalence::{Scorer, SCORERS};
use crate::error::{Error, Result};
use crate::gateway::{Backend, DiskCache, Gateway, BACKENDS};
use crate::intervention::{
    run_intervention, InterventionKind, InterventionSpec, Tokenizer, TOKENIZERS,
};
use crate::pipeline::{
    stage1_closed_book, stage2_filter, stage3_open_book, BucketCounts, ClosedBookAnswer, Condition,
    ConflictCase, GenerationFailure, OpenBookOutcome, ParametricRecord,
};
use crate::prompt::{
    default_k_shots, demonstrations_from, enumerate_instructions, prompt_search, CandidateScore,
    GenerationSettings, InstructionSpace, PromptTemplate,
};
use crate::registry::BuildContext;
use crate::report::{
    self, BiasReportRow, CategoryCounts, CategoryReportRow, ContainmentRow, DeltaReportRow,
    FilterReportRow,
};
use crate::stats::{summarize_parametric_bias, ParametricBiasSummary};

const HYPOTHESIS_TEMPLATE: &str = "The answer to the question \"{question}\" is {answer}.";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Manifest {
    pub key: String,
    pub total_examples: usize,
    pub generated: usize,
    pub skipped_parse: usize,
    pub failures: Vec<GenerationFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Manifest {
    pub key: String,
    pub counts: BucketCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage3Manifest {
    pub key: String,
    pub condition: Condition,
    pub counts: CategoryCounts,
    pub failures: Vec<GenerationFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterventionManifest {
    pub key: String,
    pub condition: Condition,
    pub counts: CategoryCounts,
    pub altered: usize,
    pub failures: Vec<GenerationFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSearchArtifact {
    pub key: String,
    pub winner_instruction: String,
    pub winner_index: usize,
    pub scores: Vec<CandidateScore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisArtifact {
    pub stage3_key: String,
    pub condition: Condition,
    pub containment: ContainmentRow,
    pub bias: Option<ParametricBiasSummary>,
    /// Why the bias test is absent, when it is.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_note: Option<String>,
}

/// Choices the run made that the numbers depend on but the config does not
/// fully pin; recorded so every run is auditable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunChoices {
    pub closed_book_k: usize,
    pub open_book_k: usize,
    pub demo_seed: u64,
    pub demo_separator: String,
    pub demo_source: String,
    pub nli_hypothesis_template: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub dataset_name: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub input_hashes: BTreeMap<String, String>,
    pub backend_id: String,
    pub instruction: String,
    pub choices: RunChoices,
    pub stages: BTreeMap<String, serde_json::Value>,
    pub artifacts: BTreeMap<String, String>,
}

pub struct Runner {
    config: RunConfig,
    base_dir: PathBuf,
    out_dir: PathBuf,
    gateway: Gateway,
    scorer: Box<dyn Scorer>,
    nli: Box<dyn Nli>,
    settings: GenerationSettings,
    dataset_hash: String,
    training_hash: Option<String>,
}

impl Runner {
    pub fn new(config: RunConfig, base_dir: &Path) -> Result<Runner> {
        config.validate()?;
        let out_dir = resolve(base_dir, &config.out_dir);
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let cache = config
            .cache_dir
            .as_ref()
            .map(|dir| DiskCache::new(resolve(base_dir, dir)));
        let ctx = BuildContext {
            cache,
            retry: config.retry.clone(),
            base_dir: Some(base_dir.to_path_buf()),
        };
        let backend: Box<dyn Backend> = BACKENDS.build(&config.backend, &ctx)?;
        let scorer: Box<dyn Scorer> = SCORERS.build(&config.scorer, &ctx)?;
        let nli: Box<dyn Nli> = NLIS.build(&config.nli, &ctx)?;
        let gateway = Gateway::new(backend, ctx.cache.clone(), config.parallelism);
        let settings = config.generation_settings();
        let dataset_path = resolve(base_dir, &config.dataset.path);
        let dataset_hash = content_hash(&dataset_path)?;
        let training_hash = match &config.dataset.training_path {
            Some(p) => Some(content_hash(&resolve(base_dir, p))?),
            None => None,
        };
        Ok(Runner {
            config,
            base_dir: base_dir.to_path_buf(),
            out_dir,
            gateway,
            scorer,
            nli,
            settings,
            dataset_hash,
            training_hash,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn stage_error(&self, stage: &str, error: Error) -> Error {
        match error {
            e @ (Error::Stage { .. } | Error::Endpoint { .. } | Error::Config(_)) => e,
            other => Error::Stage {
                stage: stage.to_string(),
                message: other.to_string(),
                out_dir: self.out_dir.clone(),
            },
        }
    }

    fn load_dataset(&self) -> Result<(DatasetSlice, usize)> {
        let path = resolve(&self.base_dir, &self.config.dataset.path);
        let parsed = load_mrqa_file(&path, &self.config.dataset.name)?;
        for skip in &parsed.skipped {
            log::warn!(
                "skipped line {} ({}): {}",
                skip.line,
                skip.qid.as_deref().unwrap_or("?"),
                skip.reason
            );
        }
        Ok((parsed.slice, parsed.skipped.len()))
    }

    fn load_training(&self) -> Result<DatasetSlice> {
        let path = self
            .config
            .dataset
            .training_path
            .as_ref()
            .ok_or_else(|| Error::config("this step needs dataset.training_path"))?;
        let path = resolve(&self.base_dir, path);
        Ok(load_mrqa_file(&path, &self.config.dataset.name)?.slice)
    }

    fn closed_book_k(&self) -> usize {
        self.config.shots.closed_book.unwrap_or_else(|| {
            default_k_shots(
                &self.config.dataset.name,
                self.config.shots.long_context_model,
            )
        })
    }

    fn choices(&self, open_book_template: &PromptTemplate) -> RunChoices {
        RunChoices {
            closed_book_k: self.closed_book_k(),
            open_book_k: open_book_template.demonstrations.len(),
            demo_seed: self.config.seed,
            demo_separator: "blank_line".to_string(),
            demo_source: "training_split_gold_answers".to_string(),
            nli_hypothesis_template: HYPOTHESIS_TEMPLATE.to_string(),
        }
    }

    fn stage3_condition(template: &PromptTemplate) -> Condition {
        if template.demonstrations.is_empty() {
            Condition::Baseline
        } else {
            Condition::Icl
        }
    }

    /// Strategy descriptor plus a content hash of any local file it points
    /// at, so stage resume keys see script edits, not just path changes.
    fn fingerprint(&self, descriptor: &serde_json::Value) -> serde_json::Value {
        let content = descriptor
            .get("path")
            .and_then(serde_json::Value::as_str)
            .and_then(|p| content_hash(&resolve(&self.base_dir, Path::new(p))).ok());
        match content {
            Some(hash) => serde_json::json!({"descriptor": descriptor, "content": hash}),
            None => descriptor.clone(),
        }
    }

    // ---- instruction resolution -------------------------------------------------

    fn search_key(&self, subset_size: usize, space: &InstructionSpace) -> String {
        key_hash(&serde_json::json!({
            "stage": "prompt_search",
            "training": self.training_hash,
            "subset_size": subset_size,
            "space": space,
            "seed": self.config.seed,
            "backend": self.fingerprint(&self.config.backend),
            "scorer": self.fingerprint(&self.config.scorer),
            "settings": self.settings,
        }))
    }

    /// The instruction for open-book prompts: fixed from config, loaded
    /// from a template file, or the prompt-search winner (cached in its
    /// artifact).
    pub fn resolve_instruction(&self) -> Result<String> {
        match &self.config.prompt {
            PromptConfig::Fixed { instruction } => Ok(instruction.clone()),
            PromptConfig::Search { subset_size, space } => Ok(self
                .prompt_search_stage(*subset_size, space.as_ref())?
                .winner_instruction),
            PromptConfig::File { .. } => Ok(self.open_book_template()?.instruction),
        }
    }

    pub fn prompt_search_stage(
        &self,
        subset_size: usize,
        space: Option<&InstructionSpace>,
    ) -> Result<PromptSearchArtifact> {
        let default_space = InstructionSpace::default();
        let space = space.unwrap_or(&default_space);
        let key = self.search_key(subset_size, space);
        let path = self.out_dir.join("prompt_search.json");
        if let Some(artifact) = read_json_if::<PromptSearchArtifact>(&path, &key)? {
            return Ok(artifact);
        }
        let training = self.load_training()?;
        let subset = crate::dataset::sample_subset(&training, subset_size, self.config.seed);
        if subset.is_empty() {
            return Err(self.stage_error("prompt-search", Error::domain("training split is empty")));
        }
        let candidates: Vec<PromptTemplate> = enumerate_instructions(space)
            .into_iter()
            .map(PromptTemplate::open_book)
            .collect();
        let (winner, scores) = prompt_search(
            &candidates,
            &subset,
            &self.gateway,
            &self.settings,
            self.scorer.as_ref(),
        )
        .map_err(|e| self.stage_error("prompt-search", e))?;
        let winner_index = scores
            .iter()
            .find(|s| s.instruction == winner.instruction && s.score.is_some())
            .map(|s| s.index)
            .unwrap_or(0);
        let artifact = PromptSearchArtifact {
            key,
            winner_instruction: winner.instruction,
            winner_index,
            scores,
        };
        write_json(&path, &artifact)?;
        Ok(artifact)
    }

    // ---- stage 1 ---------------------------------------------------------------

    fn stage1_key(&self) -> String {
        key_hash(&serde_json::json!({
            "stage": "stage1",
            "dataset": self.dataset_hash,
            "backend": self.fingerprint(&self.config.backend),
            "settings": self.settings,
            "k": self.closed_book_k(),
            "training": if self.closed_book_k() > 0 { self.training_hash.clone() } else { None },
            "seed": self.config.seed,
        }))
    }

    pub fn stage1(&self) -> Result<(Vec<ClosedBookAnswer>, Stage1Manifest)> {
        let key = self.stage1_key();
        let manifest_path = self.out_dir.join("stage1_manifest.json");
        let rows_path = self.out_dir.join("stage1_records.jsonl");
        if let Some(manifest) = read_json_if::<Stage1Manifest>(&manifest_path, &key)? {
            let answers = read_jsonl(&rows_path)?;
            return Ok((answers, manifest));
        }
        let (slice, skipped_parse) = self.load_dataset()?;
        let k = self.closed_book_k();
        let mut template = PromptTemplate::closed_book();
        if k > 0 {
            let training = self.load_training()?;
            template = template.with_demonstrations(demonstrations_from(
                &training,
                k,
                self.config.seed,
                false,
            ));
        }
        let mut output = stage1_closed_book(&slice, &self.gateway, &self.settings, &template)
            .map_err(|e| self.stage_error("closed-book", e))?;
        if output.answers.is_empty() && !slice.is_empty() {
            let cause = output
                .first_error
                .take()
                .unwrap_or_else(|| Error::Generation("every generation failed".to_string()));
            return Err(self.stage_error("closed-book", cause));
        }
        let manifest = Stage1Manifest {
            key,
            total_examples: slice.len(),
            generated: output.answers.len(),
            skipped_parse,
            failures: output.failures,
        };
        write_jsonl(&rows_path, &output.answers)?;
        write_json(&manifest_path, &manifest)?;
        Ok((output.answers, manifest))
    }

    // ---- stage 2 ---------------------------------------------------------------

    fn stage2_key(&self) -> String {
        key_hash(&serde_json::json!({
            "stage": "stage2",
            "upstream": self.stage1_key(),
            "scorer": self.fingerprint(&self.config.scorer),
            "nli": self.fingerprint(&self.config.nli),
        }))
    }

    pub fn stage2(&self) -> Result<(Vec<ConflictCase>, Stage2Manifest)> {
        let key = self.stage2_key();
        let manifest_path = self.out_dir.join("stage2_manifest.json");
        let cases_path = self.out_dir.join("stage2_cases.jsonl");
        let records_path = self.out_dir.join("stage2_records.jsonl");
        if let Some(manifest) = read_json_if::<Stage2Manifest>(&manifest_path, &key)? {
            let cases = read_jsonl(&cases_path)?;
            return Ok((cases, manifest));
        }
        let (answers, _) = self.stage1()?;
        let (slice, _) = self.load_dataset()?;
        let output = stage2_filter(
            &answers,
            &slice,
            self.scorer.as_ref(),
            self.nli.as_ref(),
            self.config.parallelism,
        )
        .map_err(|e| self.stage_error("filter", e))?;

        // The surviving conflict set as a dataset slice with its filter
        // lineage, reusable as input elsewhere.
        let wrong_ids: std::collections::HashSet<&str> = output
            .records
            .iter()
            .filter(|r| !r.closed_book_correct)
            .map(|r| r.example_id.as_str())
            .collect();
        let wrong = slice.derive(
            slice
                .examples
                .iter()
                .filter(|ex| wrong_ids.contains(ex.id.as_str()))
                .cloned()
                .collect(),
            "closed_book_wrong",
        );
        let conflict_ids: std::collections::HashSet<&str> =
            output.cases.iter().map(|c| c.example.id.as_str()).collect();
        let conflict = wrong.derive(
            wrong
                .examples
                .iter()
                .filter(|ex| conflict_ids.contains(ex.id.as_str()))
                .cloned()
                .collect(),
            "knowledge_conflict",
        );
        let mut buffer = Vec::new();
        crate::dataset::write_canonical(&conflict, &mut buffer)?;
        let conflict_path = self.out_dir.join("knowledge_conflict.jsonl");
        fs::write(&conflict_path, buffer).map_err(|e| Error::io(&conflict_path, e))?;

        let manifest = Stage2Manifest {
            key,
            counts: output.counts,
        };
        write_jsonl(&records_path, &output.records)?;
        write_jsonl(&cases_path, &output.cases)?;
        write_json(&manifest_path, &manifest)?;
        Ok((output.cases, manifest))
    }

    pub fn stage2_records(&self) -> Result<Vec<ParametricRecord>> {
        self.stage2()?;
        read_jsonl(&self.out_dir.join("stage2_records.jsonl"))
    }

    // ---- stage 3 ---------------------------------------------------------------

    fn open_book_template(&self) -> Result<PromptTemplate> {
        if let PromptConfig::File { path } = &self.config.prompt {
            let path = resolve(&self.base_dir, path);
            let template: PromptTemplate = read_json(&path)?;
            if template.layout != crate::prompt::Layout::OpenBook {
                return Err(Error::config(format!(
                    "{}: template layout must be open_book",
                    path.display()
                )));
            }
            return Ok(template);
        }
        let instruction = self.resolve_instruction()?;
        let mut template = PromptTemplate::open_book(instruction);
        if self.config.shots.open_book > 0 {
            let training = self.load_training()?;
            template = template.with_demonstrations(demonstrations_from(
                &training,
                self.config.shots.open_book,
                self.config.seed,
                true,
            ));
        }
        Ok(template)
    }

    fn stage3_key(&self, template: &PromptTemplate) -> String {
        key_hash(&serde_json::json!({
            "stage": "stage3",
            "upstream": self.stage2_key(),
            "template": template,
            "condition": Self::stage3_condition(template),
        }))
    }

    fn stage3_paths(&self, condition: Condition) -> (PathBuf, PathBuf) {
        (
            self.out_dir
                .join(format!("stage3_{}_manifest.json", condition.label())),
            self.out_dir
                .join(format!("stage3_{}_outcomes.jsonl", condition.label())),
        )
    }

    pub fn stage3(&self) -> Result<(Vec<OpenBookOutcome>, Stage3Manifest)> {
        let template = self.open_book_template()?;
        let condition = Self::stage3_condition(&template);
        let key = self.stage3_key(&template);
        let (manifest_path, rows_path) = self.stage3_paths(condition);
        if let Some(manifest) = read_json_if::<Stage3Manifest>(&manifest_path, &key)? {
            let outcomes = read_jsonl(&rows_path)?;
            return Ok((outcomes, manifest));
        }
        let (cases, _) = self.stage2()?;
        let mut output = stage3_open_book(
            &cases,
            &template,
            &self.gateway,
            &self.settings,
            self.scorer.as_ref(),
            condition,
        )
        .map_err(|e| self.stage_error("open-book", e))?;
        if output.outcomes.is_empty() && !cases.is_empty() {
            let cause = output
                .first_error
                .take()
                .unwrap_or_else(|| Error::Generation("every generation failed".to_string()));
            return Err(self.stage_error("open-book", cause));
        }
        let manifest = Stage3Manifest {
            key,
            condition,
            counts: CategoryCounts::tally(&output.outcomes),
            failures: output.failures,
        };
        write_jsonl(&rows_path, &output.outcomes)?;
        write_json(&manifest_path, &manifest)?;
        Ok((output.outcomes, manifest))
    }

    // ---- interventions ----------------------------------------------------------

    fn intervention_paths(&self, kind: InterventionKind) -> (PathBuf, PathBuf) {
        let tag = match kind {
            InterventionKind::Mask => "masked",
            InterventionKind::Inject => "injected",
        };
        (
            self.out_dir
                .join(format!("intervention_{tag}_manifest.json")),
            self.out_dir
                .join(format!("intervention_{tag}_outcomes.jsonl")),
        )
    }

    pub fn intervene(
        &self,
        intervention: &InterventionConfig,
    ) -> Result<(Vec<OpenBookOutcome>, InterventionManifest)> {
        let template = self.open_book_template()?;
        let key = key_hash(&serde_json::json!({
            "stage": "intervention",
            "upstream": self.stage3_key(&template),
            "intervention": intervention,
        }));
        let (manifest_path, rows_path) = self.intervention_paths(intervention.kind);
        if let Some(manifest) = read_json_if::<InterventionManifest>(&manifest_path, &key)? {
            let outcomes = read_jsonl(&rows_path)?;
            return Ok((outcomes, manifest));
        }
        // Baseline outcomes must exist first; the delta report needs them.
        self.stage3()?;
        let (cases, _) = self.stage2()?;
        let ctx = BuildContext {
            cache: None,
            retry: self.config.retry.clone(),
            base_dir: Some(self.base_dir.clone()),
        };
        let tokenizer: Box<dyn Tokenizer> = TOKENIZERS.build(&intervention.tokenizer, &ctx)?;
        let spec = InterventionSpec {
            kind: intervention.kind,
            mask: intervention.mask_options(),
            tokenizer: tokenizer.as_ref(),
        };
        let run = run_intervention(
            &cases,
            &spec,
            &template,
            &self.gateway,
            &self.settings,
            self.scorer.as_ref(),
        )
        .map_err(|e| self.stage_error("intervene", e))?;
        let manifest = InterventionManifest {
            key,
            condition: run.condition,
            counts: CategoryCounts::tally(&run.output.outcomes),
            altered: run.altered,
            failures: run.output.failures,
        };
        write_jsonl(&rows_path, &run.output.outcomes)?;
        write_json(&manifest_path, &manifest)?;
        Ok((run.output.outcomes, manifest))
    }

    // ---- analysis ----------------------------------------------------------------

    pub fn analyze(&self) -> Result<AnalysisArtifact> {
        let (outcomes, manifest) = self.stage3()?;
        let containment = ContainmentRow::from_outcomes(&self.config.dataset.name, &outcomes);
        let (bias, bias_note) = match summarize_parametric_bias(&outcomes, self.config.bias_success)
        {
            Ok(summary) => (Some(summary), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let artifact = AnalysisArtifact {
            stage3_key: manifest.key,
            condition: manifest.condition,
            containment,
            bias,
            bias_note,
        };
        write_json(&self.out_dir.join("analysis.json"), &artifact)?;
        Ok(artifact)
    }

    // ---- full run -----------------------------------------------------------------

    pub fn run_full(&self) -> Result<RunManifest> {
        let (_, stage1_manifest) = self.stage1()?;
        let (_, stage2_manifest) = self.stage2()?;
        let (_, stage3_manifest) = self.stage3()?;
        let mut intervention_manifests = Vec::new();
        for intervention in &self.config.interventions {
            let (_, manifest) = self.intervene(intervention)?;
            intervention_manifests.push(manifest);
        }
        let analysis = self.analyze()?;
        let manifest = self.build_manifest(
            &stage1_manifest,
            &stage2_manifest,
            &stage3_manifest,
            &intervention_manifests,
            &analysis,
        )?;
        write_json(&self.out_dir.join("manifest.json"), &manifest)?;
        self.emit_reports()?;
        Ok(manifest)
    }

    fn build_manifest(
        &self,
        s1: &Stage1Manifest,
        s2: &Stage2Manifest,
        s3: &Stage3Manifest,
        interventions: &[InterventionManifest],
        analysis: &AnalysisArtifact,
    ) -> Result<RunManifest> {
        let mut input_hashes = BTreeMap::new();
        input_hashes.insert("dataset".to_string(), self.dataset_hash.clone());
        if let Some(h) = &self.training_hash {
            input_hashes.insert("training".to_string(), h.clone());
        }
        let mut stages = BTreeMap::new();
        stages.insert("stage1".to_string(), serde_json::to_value(s1)?);
        stages.insert("stage2".to_string(), serde_json::to_value(s2)?);
        stages.insert("stage3".to_string(), serde_json::to_value(s3)?);
        for manifest in interventions {
            stages.insert(
                format!("intervention_{}", manifest.condition.label()),
                serde_json::to_value(manifest)?,
            );
        }
        stages.insert("analysis".to_string(), serde_json::to_value(analysis)?);

        let mut artifacts = BTreeMap::new();
        artifacts.insert("stage1_records".into(), "stage1_records.jsonl".into());
        artifacts.insert("stage2_records".into(), "stage2_records.jsonl".into());
        artifacts.insert("stage2_cases".into(), "stage2_cases.jsonl".into());
        artifacts.insert(
            "knowledge_conflict_slice".into(),
            "knowledge_conflict.jsonl".into(),
        );
        artifacts.insert(
            "stage3_outcomes".into(),
            format!("stage3_{}_outcomes.jsonl", s3.condition.label()),
        );
        for manifest in interventions {
            artifacts.insert(
                format!("intervention_{}_outcomes", manifest.condition.label()),
                format!("intervention_{}_outcomes.jsonl", manifest.condition.label()),
            );
        }
        artifacts.insert("analysis".into(), "analysis.json".into());
        artifacts.insert("reports".into(), "reports".into());

        let template = self.open_book_template()?;
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            dataset_name: self.config.dataset.name.clone(),
            config_hash: self.config.content_hash(),
            config: self.config.clone(),
            input_hashes,
            backend_id: self.gateway.backend_id(),
            instruction: template.instruction.clone(),
            choices: self.choices(&template),
            stages,
            artifacts,
        })
    }

    // ---- reports ------------------------------------------------------------------

    /// Regenerate every report file from the artifacts on disk.
    pub fn emit_reports(&self) -> Result<()> {
        let reports_dir = self.out_dir.join("reports");
        fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
        let dataset = self.config.dataset.name.clone();

        let (_, s1) = self.stage1()?;
        let (_, s2) = self.stage2()?;
        let (outcomes, s3) = self.stage3()?;

        let filter_rows = vec![FilterReportRow {
            dataset: dataset.clone(),
            counts: s2.counts,
            skipped_parse: s1.skipped_parse,
            generation_failures: s1.failures.len(),
        }];
        write_text(
            &reports_dir.join("filter_report.txt"),
            &report::filter_report_text(&filter_rows),
        )?;
        write_text(
            &reports_dir.join("filter_report.csv"),
            &report::filter_report_csv(&filter_rows),
        )?;
        write_text(
            &reports_dir.join("filter_report.json"),
            &report::to_named_json(&filter_rows)?,
        )?;

        let mut category_rows = vec![CategoryReportRow {
            dataset: dataset.clone(),
            condition: s3.condition,
            counts: s3.counts,
            generation_failures: s3.failures.len(),
            baseline: None,
        }];

        let mut delta_rows: Vec<DeltaReportRow> = Vec::new();
        for intervention in &self.config.interventions {
            let (int_outcomes, manifest) = self.intervene(intervention)?;
            category_rows.push(CategoryReportRow {
                dataset: dataset.clone(),
                condition: manifest.condition,
                counts: manifest.counts,
                generation_failures: manifest.failures.len(),
                baseline: Some(s3.counts),
            });
            let contained_baseline = CategoryCounts::tally(
                &outcomes
                    .iter()
                    .filter(|o| o.case.ap_in_context)
                    .cloned()
                    .collect::<Vec<_>>(),
            );
            let contained_intervention = CategoryCounts::tally(
                &int_outcomes
                    .iter()
                    .filter(|o| o.case.ap_in_context)
                    .cloned()
                    .collect::<Vec<_>>(),
            );
            delta_rows.push(DeltaReportRow {
                dataset: dataset.clone(),
                condition: manifest.condition,
                baseline: s3.counts,
                intervention: manifest.counts,
                altered: manifest.altered,
                generation_failures: manifest.failures.len(),
                contained_baseline,
                contained_intervention,
            });
        }

        write_text(
            &reports_dir.join("categories.txt"),
            &report::category_report_text(&category_rows),
        )?;
        write_text(
            &reports_dir.join("categories.csv"),
            &report::category_report_csv(&category_rows),
        )?;
        write_text(
            &reports_dir.join("categories.json"),
            &report::to_named_json(&category_rows)?,
        )?;

        if !delta_rows.is_empty() {
            write_text(
                &reports_dir.join("interventions.txt"),
                &report::delta_report_text(&delta_rows),
            )?;
            write_text(
                &reports_dir.join("interventions.csv"),
                &report::delta_report_csv(&delta_rows),
            )?;
            write_text(
                &reports_dir.join("interventions.json"),
                &report::to_named_json(&delta_rows)?,
            )?;
        }

        let analysis = self.analyze()?;
        let containment_rows = vec![analysis.containment.clone()];
        write_text(
            &reports_dir.join("containment.txt"),
            &report::containment_text(&containment_rows),
        )?;
        write_text(
            &reports_dir.join("containment.csv"),
            &report::containment_csv(&containment_rows),
        )?;
        write_text(
            &reports_dir.join("containment.json"),
            &report::to_named_json(&containment_rows)?,
        )?;

        if let Some(summary) = analysis.bias {
            let bias_rows = vec![BiasReportRow {
                dataset: dataset.clone(),
                summary,
            }];
            write_text(
                &reports_dir.join("bias.txt"),
                &report::bias_report_text(&bias_rows),
            )?;
            write_text(
                &reports_dir.join("bias.csv"),
                &report::bias_report_csv(&bias_rows),
            )?;
            write_text(
                &reports_dir.join("bias.json"),
                &report::to_named_json(&bias_rows)?,
            )?;
        }

        if let PromptConfig::Search { subset_size, space } = &self.config.prompt {
            let artifact = self.prompt_search_stage(*subset_size, space.as_ref())?;
            write_text(
                &reports_dir.join("prompt_search.csv"),
                &report::prompt_search_csv(&artifact.scores),
            )?;
            write_text(
                &reports_dir.join("prompt_search.json"),
                &report::to_named_json(&artifact)?,
            )?;
        }
        Ok(())
    }
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_relative() {
        base.join(path)
    } else {
        path.to_path_buf()
    }
}

// ---- artifact io ------------------------------------------------------------------

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buffer = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buffer, row)?;
        buffer.push(b'\n');
    }
    atomic_write(path, &buffer)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    use std::io::BufRead;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a stage manifest if present and keyed identically; a missing file or
/// a stale key means recompute.
fn read_json_if<T: DeserializeOwned + KeyedManifest>(path: &Path, key: &str) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let value: T = read_json(path)?;
    if value.key() == key {
        Ok(Some(value))
    } else {
        Ok(None)
    }
}

trait KeyedManifest {
    fn key(&self) -> &str;
}

macro_rules! keyed {
    ($($ty:ty),*) => {
        $(impl KeyedManifest for $ty {
            fn key(&self) -> &str {
                &self.key
            }
        })*
    };
}

keyed!(
    Stage1Manifest,
    Stage2Manifest,
    Stage3Manifest,
    InterventionManifest,
    PromptSearchArtifact
);
