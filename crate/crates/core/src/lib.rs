//! Harness for studying context-memory knowledge conflicts in
//! retrieval-augmented question answering.
//!
//! The pipeline has three stages. Stage 1 probes a model closed-book to
//! collect its parametric answers. Stage 2 filters to the examples where the
//! parametric answer is wrong *and* contradicts the gold context, yielding a
//! knowledge-conflict dataset. Stage 3 re-runs the model open-book on that
//! dataset and buckets each answer as a correct update, an incorrect update,
//! or a retained parametric answer.
//!
//! On top of the pipeline sit a containment analysis with a Beta-binomial
//! significance test (does the wrong answer appearing verbatim in the context
//! make retention likelier?) and two causal interventions: masking the
//! parametric answer out of the context, and injecting it behind an
//! "Unrelated text:" marker.
//!
//! Model backends, equivalence scorers, entailment filters and mask
//! tokenizers are all strategies registered by name and selected from the
//! run configuration; see [`registry`].

pub mod config;
pub mod dataset;
pub mod equivalence;
pub mod error;
pub mod gateway;
pub mod intervention;
pub mod pipeline;
pub mod prompt;
pub mod registry;
pub mod report;
pub mod run;
pub mod stats;
pub mod stub;

pub use error::{Error, Result};
