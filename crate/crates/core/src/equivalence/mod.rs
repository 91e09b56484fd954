//! Answer-equivalence decisions: normalized exact match plus a pluggable
//! learned scorer behind a remote classifier endpoint.
//!
//! Exact match follows the extractive-QA convention: lowercase, strip
//! punctuation, drop articles, collapse whitespace. That is deliberately
//! strict — "three" and "3" still differ — which is why the learned scorer
//! exists as a drop-in strategy.

pub mod nli;

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::RetryPolicy;
use crate::registry::{options, BuildContext, Registry};

/// Normalize an answer string: lowercase, remove punctuation and symbols,
/// drop the articles a/an/the as whole words, collapse whitespace.
pub fn normalize(answer: &str) -> String {
    let lowered = answer.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Normalized string equality.
pub fn exact_match(a1: &str, a2: &str) -> bool {
    normalize(a1) == normalize(a2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExactNormalized,
    LearnedRemote,
}

/// Outcome of an equivalence check against a gold alias list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceVerdict {
    pub equivalent: bool,
    pub method: Method,
    /// Classifier probability for learned scorers; absent for exact match.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// The gold alias that matched, when one did.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_alias: Option<String>,
}

/// Decides whether a candidate answer and one reference are the same answer.
pub trait Scorer: Send + Sync {
    fn method(&self) -> Method;

    /// Returns the equivalence decision and, for learned scorers, the
    /// probability behind it.
    fn judge(
        &self,
        question: &str,
        reference: &str,
        candidate: &str,
    ) -> Result<(bool, Option<f64>)>;
}

pub static SCORERS: Lazy<Registry<dyn Scorer>> = Lazy::new(|| {
    Registry::new("scorer")
        .register("exact", |_, _| Ok(Box::new(ExactScorer) as Box<dyn Scorer>))
        .register("remote", |v, ctx| {
            let opts: RemoteScorerOptions = options(v, "remote scorer")?;
            let scorer: Box<dyn Scorer> = Box::new(RemoteScorer::new(opts, ctx));
            Ok(scorer)
        })
});

/// Normalized exact match as a scorer strategy.
pub struct ExactScorer;

impl Scorer for ExactScorer {
    fn method(&self) -> Method {
        Method::ExactNormalized
    }

    fn judge(&self, _q: &str, reference: &str, candidate: &str) -> Result<(bool, Option<f64>)> {
        Ok((exact_match(candidate, reference), None))
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct RemoteScorerOptions {
    pub url: String,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.5
}

/// Learned equivalence via a remote classifier: POST {question, reference,
/// candidate}, read back {probability}, threshold it. Calls are retried and
/// cached in their own namespace. Unreachable endpoints are hard errors —
/// equivalence is load-bearing, there is no silent fallback.
pub struct RemoteScorer {
    url: String,
    threshold: f64,
    retry: RetryPolicy,
    cache: Option<crate::gateway::DiskCache>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ProbabilityResponse {
    probability: f64,
}

impl RemoteScorer {
    pub fn new(opts: RemoteScorerOptions, ctx: &BuildContext) -> RemoteScorer {
        RemoteScorer {
            url: opts.url,
            threshold: opts.threshold,
            retry: ctx.retry.clone(),
            cache: ctx.cache.clone(),
            client: reqwest::blocking::Client::new(),
        }
    }

    fn probability(&self, question: &str, reference: &str, candidate: &str) -> Result<f64> {
        let payload = serde_json::json!({
            "question": question,
            "reference": reference,
            "candidate": candidate,
        });
        let key = serde_json::json!({"url": self.url, "payload": payload});
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get("equivalence", &key)) {
            if let Ok(p) = hit.parse::<f64>() {
                return Ok(p);
            }
        }
        let parsed: ProbabilityResponse = self.retry.run(&self.url, || {
            let response = self
                .client
                .post(&self.url)
                .json(&payload)
                .send()
                .map_err(|e| e.to_string())?;
            let status = response.status();
            let text = response.text().map_err(|e| e.to_string())?;
            if !status.is_success() {
                return Err(format!("HTTP {status}"));
            }
            serde_json::from_str(&text).map_err(|e| format!("bad response body: {e}"))
        })?;
        if let Some(cache) = &self.cache {
            cache.put("equivalence", &key, &format!("{:?}", parsed.probability))?;
        }
        Ok(parsed.probability)
    }
}

impl Scorer for RemoteScorer {
    fn method(&self) -> Method {
        Method::LearnedRemote
    }

    fn judge(
        &self,
        question: &str,
        reference: &str,
        candidate: &str,
    ) -> Result<(bool, Option<f64>)> {
        let p = self.probability(question, reference, candidate)?;
        Ok((p >= self.threshold, Some(p)))
    }
}

/// Is the candidate equivalent to ANY gold alias? Records which alias
/// matched; for learned scorers the reported score is the matched alias's
/// probability, or the maximum seen when nothing matched.
pub fn is_equivalent(
    candidate: &str,
    golds: &[String],
    question: &str,
    scorer: &dyn Scorer,
) -> Result<EquivalenceVerdict> {
    if golds.is_empty() {
        return Err(Error::domain("is_equivalent needs a non-empty gold list"));
    }
    let mut best_score: Option<f64> = None;
    for gold in golds {
        let (equivalent, score) = scorer.judge(question, gold, candidate)?;
        if let Some(s) = score {
            if best_score.is_none_or(|b| s > b) {
                best_score = Some(s);
            }
        }
        if equivalent {
            return Ok(EquivalenceVerdict {
                equivalent: true,
                method: scorer.method(),
                score,
                matched_alias: Some(gold.clone()),
            });
        }
    }
    Ok(EquivalenceVerdict {
        equivalent: false,
        method: scorer.method(),
        score: best_score,
        matched_alias: None,
    })
}
