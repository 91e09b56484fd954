//! Command-line entry point. Subcommands mirror the pipeline stages; every
//! one reads and writes the stage artifacts in the configured output
//! directory, so runs resume wherever they left off.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use conflict_harness::config::{InterventionConfig, RunConfig};
use conflict_harness::error::Error;
use conflict_harness::intervention::InterventionKind;
use conflict_harness::run::Runner;

#[derive(Parser)]
#[command(
    name = "conflict-harness",
    version,
    about = "Build knowledge-conflict datasets from extractive QA data, categorize a model's \
knowledge-updating behavior, quantify parametric bias, and run masking/injection interventions."
)]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(short, long, global = true, default_value = "config.json")]
    config: PathBuf,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Override the cache directory from the config.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Override request parallelism.
    #[arg(long, global = true)]
    parallelism: Option<usize>,

    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the dataset file path.
    #[arg(long, global = true)]
    dataset_path: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, ValueEnum)]
enum InterventionArg {
    Mask,
    Inject,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: stages 1-3, analysis, configured
    /// interventions, and all reports.
    Run,
    /// Stage 1: gather closed-book parametric answers.
    ClosedBook,
    /// Stage 2: filter to the knowledge-conflict subset.
    Filter,
    /// Stage 3: open-book answering and categorization.
    OpenBook,
    /// Re-run stage 3 under an intervention.
    Intervene {
        #[arg(value_enum)]
        kind: InterventionArg,
    },
    /// Containment analysis and the parametric-bias significance test.
    Analyze,
    /// Evaluate the instruction search space on a held-out training subset.
    PromptSearch,
    /// Regenerate every report file from the stage artifacts.
    Report,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    let (mut config, base_dir) = RunConfig::load(&cli.config)?;
    if let Some(out_dir) = cli.out_dir {
        config.out_dir = out_dir;
    }
    if let Some(cache_dir) = cli.cache_dir {
        config.cache_dir = Some(cache_dir);
    }
    if let Some(parallelism) = cli.parallelism {
        config.parallelism = parallelism;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(path) = cli.dataset_path {
        config.dataset.path = path;
    }
    config.validate()?;
    let runner = Runner::new(config, &base_dir)?;

    match cli.command {
        Command::Run => {
            let manifest = runner.run_full()?;
            println!(
                "run complete: {} conflict cases, artifacts in {}",
                manifest
                    .stages
                    .get("stage2")
                    .and_then(|s| s.pointer("/counts/knowledge_conflict"))
                    .and_then(|v| v.as_u64())
                    .unwrap_or(0),
                runner.out_dir().display()
            );
        }
        Command::ClosedBook => {
            let (answers, manifest) = runner.stage1()?;
            println!(
                "closed-book: {} answers generated, {} failures",
                answers.len(),
                manifest.failures.len()
            );
        }
        Command::Filter => {
            let (cases, manifest) = runner.stage2()?;
            let c = manifest.counts;
            println!(
                "filter: full {} -> closed-book wrong {} -> knowledge conflict {}",
                c.full,
                c.closed_book_wrong,
                cases.len()
            );
        }
        Command::OpenBook => {
            let (outcomes, manifest) = runner.stage3()?;
            println!(
                "open-book [{}]: {} outcomes (R {} / U_c {} / U_i {})",
                manifest.condition.label(),
                outcomes.len(),
                manifest.counts.r,
                manifest.counts.u_c,
                manifest.counts.u_i
            );
        }
        Command::Intervene { kind } => {
            let kind = match kind {
                InterventionArg::Mask => InterventionKind::Mask,
                InterventionArg::Inject => InterventionKind::Inject,
            };
            let intervention = runner
                .config()
                .interventions
                .iter()
                .find(|i| i.kind == kind)
                .cloned()
                .unwrap_or_else(|| InterventionConfig {
                    kind,
                    max_passes: 16,
                    single_pass: false,
                    first_occurrence_only: false,
                    tokenizer: serde_json::json!({"kind": "whitespace"}),
                });
            let (outcomes, manifest) = runner.intervene(&intervention)?;
            println!(
                "intervene [{}]: {} outcomes, {} prompts altered",
                manifest.condition.label(),
                outcomes.len(),
                manifest.altered
            );
        }
        Command::Analyze => {
            let analysis = runner.analyze()?;
            match &analysis.bias {
                Some(summary) => println!(
                    "analyze: delta P(R) {:+.1} pp, tail p-value {:.4}{}",
                    summary.delta_pp(),
                    summary.p_value_tail(),
                    if summary.significant() {
                        " (significant at 0.05)"
                    } else {
                        ""
                    }
                ),
                None => println!(
                    "analyze: bias test unavailable ({})",
                    analysis.bias_note.as_deref().unwrap_or("unknown")
                ),
            }
        }
        Command::PromptSearch => {
            let (subset_size, space) = match &runner.config().prompt {
                conflict_harness::config::PromptConfig::Search { subset_size, space } => {
                    (*subset_size, space.clone())
                }
                _ => (3000, None),
            };
            let artifact = runner.prompt_search_stage(subset_size, space.as_ref())?;
            println!(
                "prompt-search: winner [{}] {:?}",
                artifact.winner_index, artifact.winner_instruction
            );
        }
        Command::Report => {
            runner.emit_reports()?;
            println!(
                "reports written to {}",
                runner.out_dir().join("reports").display()
            );
        }
    }
    Ok(())
}
