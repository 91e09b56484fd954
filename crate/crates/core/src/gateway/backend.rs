//! Generation backends: the remote OpenAI-compatible HTTP client and the
//! scripted backend used for tests and offline fixtures.

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GenerationRequest, RetryPolicy};
use crate::dataset::hex;
use crate::error::{Error, Result};
use crate::registry::{options, Registry};

/// A model that can answer prompts. Implementations must be safe to share
/// across worker threads.
pub trait Backend: Send + Sync {
    /// Stable identifier used in logs and manifests.
    fn id(&self) -> String;

    /// Produce the raw completion text for one request.
    fn complete(&self, request: &GenerationRequest) -> Result<String>;

    /// Whether responses should go through the persistent cache. Remote
    /// calls are cached; scripted lookups are already instant and
    /// re-reading a cache would mask edits to the script file.
    fn cacheable(&self) -> bool {
        true
    }
}

pub static BACKENDS: Lazy<Registry<dyn Backend>> = Lazy::new(|| {
    Registry::new("backend")
        .register("http", |v, ctx| {
            let opts: HttpOptions = options(v, "http backend")?;
            let backend: Box<dyn Backend> = Box::new(HttpBackend::new(opts, ctx.retry.clone())?);
            Ok(backend)
        })
        .register("scripted", |v, ctx| {
            let opts: ScriptedOptions = options(v, "scripted backend")?;
            let path = ctx.resolve(&opts.path);
            let backend: Box<dyn Backend> = Box::new(ScriptedBackend::load(&path)?);
            Ok(backend)
        })
});

#[derive(Debug, Clone, Deserialize)]
pub struct HttpOptions {
    pub base_url: String,
    pub model_id: String,
    /// Environment variable holding the bearer token, if the server wants one.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

fn default_timeout_secs() -> u64 {
    120
}

/// Chat-completions client. The full prompt goes into a single user message
/// so prompt bytes stay identical across backends.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    model_id: String,
    token: Option<String>,
    retry: RetryPolicy,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stop: Vec<&'a str>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatText,
}

#[derive(Deserialize)]
struct ChatText {
    content: String,
}

impl HttpBackend {
    pub fn new(opts: HttpOptions, retry: RetryPolicy) -> Result<HttpBackend> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(opts.timeout_secs))
            .build()
            .map_err(|e| Error::config(format!("http client: {e}")))?;
        let url = format!(
            "{}/v1/chat/completions",
            opts.base_url.trim_end_matches('/')
        );
        Ok(HttpBackend {
            client,
            url,
            model_id: opts.model_id,
            token: std::env::var(&opts.api_key_env).ok(),
            retry,
        })
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}:{}", self.url, self.model_id)
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String> {
        let stop: Vec<&str> = request.stop_sequences.iter().map(String::as_str).collect();
        let body = ChatRequest {
            model: &request.model_id,
            messages: [ChatMessage {
                role: "user",
                content: &request.prompt_text,
            }],
            temperature: request.temperature,
            max_tokens: request.max_new_tokens,
            stop,
        };
        let parsed: ChatResponse = self.retry.run(&self.url, || {
            let mut builder = self.client.post(&self.url).json(&body);
            if let Some(token) = &self.token {
                builder = builder.bearer_auth(token);
            }
            let response = builder.send().map_err(|e| e.to_string())?;
            let status = response.status();
            let text = response.text().map_err(|e| e.to_string())?;
            if !status.is_success() {
                return Err(format!("HTTP {status}: {}", truncate(&text, 200)));
            }
            serde_json::from_str(&text).map_err(|e| format!("bad response body: {e}"))
        })?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::Generation("response had no choices".into()))?;
        Ok(choice.message.content)
    }

    fn cacheable(&self) -> bool {
        true
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ScriptedOptions {
    pub path: String,
}

/// Deterministic backend answering from a JSON script. Prompts can be keyed
/// literally or by sha256 hex of the prompt bytes; a default answer is
/// optional. Used for tests and synthetic end-to-end runs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub by_prompt: HashMap<String, String>,
    #[serde(default)]
    pub by_hash: HashMap<String, String>,
    #[serde(default)]
    pub default: Option<String>,
}

pub struct ScriptedBackend {
    script: Script,
    source: String,
}

impl ScriptedBackend {
    pub fn load(path: &PathBuf) -> Result<ScriptedBackend> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let script: Script = serde_json::from_slice(&bytes)
            .map_err(|e| Error::config(format!("scripted backend {}: {e}", path.display())))?;
        Ok(ScriptedBackend {
            script,
            source: path.display().to_string(),
        })
    }

    pub fn from_script(script: Script, source: &str) -> ScriptedBackend {
        ScriptedBackend {
            script,
            source: source.to_string(),
        }
    }

    pub fn prompt_hash(prompt: &str) -> String {
        hex(&Sha256::digest(prompt.as_bytes()))
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> String {
        format!("scripted:{}", self.source)
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String> {
        if let Some(answer) = self.script.by_prompt.get(&request.prompt_text) {
            return Ok(answer.clone());
        }
        let digest = Self::prompt_hash(&request.prompt_text);
        if let Some(answer) = self.script.by_hash.get(&digest) {
            return Ok(answer.clone());
        }
        if let Some(answer) = &self.script.default {
            return Ok(answer.clone());
        }
        Err(Error::Generation(format!(
            "scripted backend has no entry for prompt hash {digest}"
        )))
    }

    fn cacheable(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_lookup_by_literal_and_hash() {
        let mut script = Script::default();
        script
            .by_prompt
            .insert("Question: who?\nAnswer:".into(), "Beyoncé".into());
        script.by_hash.insert(
            ScriptedBackend::prompt_hash("other prompt"),
            "Coldplay".into(),
        );
        let backend = ScriptedBackend::from_script(script, "test");
        let req = |p: &str| GenerationRequest::new(p, "m", 64);
        assert_eq!(
            backend.complete(&req("Question: who?\nAnswer:")).unwrap(),
            "Beyoncé"
        );
        assert_eq!(backend.complete(&req("other prompt")).unwrap(), "Coldplay");
        assert!(backend.complete(&req("unknown")).is_err());
    }

    #[test]
    fn registry_knows_both_kinds() {
        assert_eq!(BACKENDS.kinds(), vec!["http", "scripted"]);
    }
}
