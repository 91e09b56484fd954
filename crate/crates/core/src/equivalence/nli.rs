//! Entailment filtering. A parametric answer that the context already
//! entails is not in conflict with it, so Stage 2 drops those examples.
//!
//! The answer is rendered into a declarative hypothesis and checked against
//! the context as premise. The classifier itself is remote; a scripted
//! variant exists for tests and offline fixtures.

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::RetryPolicy;
use crate::registry::{options, BuildContext, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

/// Three-way natural language inference over (premise, hypothesis).
pub trait Nli: Send + Sync {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel>;
}

pub static NLIS: Lazy<Registry<dyn Nli>> = Lazy::new(|| {
    Registry::new("nli")
        .register("remote", |v, ctx| {
            let opts: RemoteNliOptions = options(v, "remote nli")?;
            let nli: Box<dyn Nli> = Box::new(RemoteNli::new(opts, ctx));
            Ok(nli)
        })
        .register("scripted", |v, ctx| {
            let opts: ScriptedNliOptions = options(v, "scripted nli")?;
            let path = ctx.resolve(&opts.path);
            let nli: Box<dyn Nli> = Box::new(ScriptedNli::load(&path)?);
            Ok(nli)
        })
});

/// Render the declarative hypothesis used for the entailment check.
pub fn hypothesis_for(question: &str, answer: &str) -> String {
    format!("The answer to the question \"{question}\" is {answer}.")
}

/// Does the context entail the answer? Empty answers short-circuit to false
/// without calling the classifier.
pub fn entails(context: &str, question: &str, answer: &str, nli: &dyn Nli) -> Result<bool> {
    if answer.trim().is_empty() {
        return Ok(false);
    }
    let hypothesis = hypothesis_for(question, answer);
    Ok(nli.classify(context, &hypothesis)? == NliLabel::Entailment)
}

#[derive(Debug, Clone, Deserialize)]
pub struct RemoteNliOptions {
    pub url: String,
}

/// Remote classifier: POST {premise, hypothesis}, read {label}. Retried and
/// cached like the equivalence scorer; unreachable is a hard error.
pub struct RemoteNli {
    url: String,
    retry: RetryPolicy,
    cache: Option<crate::gateway::DiskCache>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct LabelResponse {
    label: NliLabel,
}

impl RemoteNli {
    pub fn new(opts: RemoteNliOptions, ctx: &BuildContext) -> RemoteNli {
        RemoteNli {
            url: opts.url,
            retry: ctx.retry.clone(),
            cache: ctx.cache.clone(),
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Nli for RemoteNli {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliLabel> {
        let payload = serde_json::json!({"premise": premise, "hypothesis": hypothesis});
        let key = serde_json::json!({"url": self.url, "payload": payload});
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get("nli", &key)) {
            if let Ok(label) = serde_json::from_str::<NliLabel>(&hit) {
                return Ok(label);
            }
        }
        let parsed: LabelResponse = self.retry.run(&self.url, || {
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
            cache.put("nli", &key, &serde_json::to_string(&parsed.label)?)?;
        }
        Ok(parsed.label)
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ScriptedNliOptions {
    pub path: String,
}

/// Rule-based stand-in for the classifier: the first rule whose `contains`
/// string appears in the hypothesis decides the label; otherwise the default
/// applies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NliScript {
    #[serde(default)]
    pub rules: Vec<NliRule>,
    pub default: NliLabel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NliRule {
    pub contains: String,
    pub label: NliLabel,
}

pub struct ScriptedNli {
    script: NliScript,
}

impl ScriptedNli {
    pub fn load(path: &std::path::PathBuf) -> Result<ScriptedNli> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let script: NliScript = serde_json::from_slice(&bytes)
            .map_err(|e| Error::config(format!("scripted nli {}: {e}", path.display())))?;
        Ok(ScriptedNli { script })
    }

    pub fn from_script(script: NliScript) -> ScriptedNli {
        ScriptedNli { script }
    }
}

impl Nli for ScriptedNli {
    fn classify(&self, _premise: &str, hypothesis: &str) -> Result<NliLabel> {
        for rule in &self.script.rules {
            if hypothesis.contains(&rule.contains) {
                return Ok(rule.label);
            }
        }
        Ok(self.script.default)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contradiction_default() -> ScriptedNli {
        ScriptedNli::from_script(NliScript {
            rules: vec![NliRule {
                contains: "Coldplay".into(),
                label: NliLabel::Entailment,
            }],
            default: NliLabel::Contradiction,
        })
    }

    #[test]
    fn entailed_answer_detected() {
        let nli = contradiction_default();
        let context =
            "The Super Bowl 50 halftime show was headlined by the British rock group Coldplay.";
        assert!(entails(context, "Who headlined?", "Coldplay", &nli).unwrap());
        assert!(!entails(context, "Who headlined?", "Beyoncé", &nli).unwrap());
    }

    #[test]
    fn empty_answer_short_circuits() {
        // A panicking classifier proves the endpoint is not consulted.
        struct Panics;
        impl Nli for Panics {
            fn classify(&self, _: &str, _: &str) -> Result<NliLabel> {
                panic!("should not be called for empty answers")
            }
        }
        assert!(!entails("ctx", "q", "   ", &Panics).unwrap());
    }

    #[test]
    fn hypothesis_template() {
        assert_eq!(
            hypothesis_for("What disease did Tesla contract in 1873?", "Malaria"),
            "The answer to the question \"What disease did Tesla contract in 1873?\" is Malaria."
        );
    }

    #[test]
    fn registry_kinds() {
        assert_eq!(NLIS.kinds(), vec!["remote", "scripted"]);
    }
}
