//! In-process stub server for the three remote interfaces: chat
//! completions, answer equivalence, and NLI.
//!
//! Tests point the harness at `base_url()` and script the responses; the
//! server counts requests so determinism claims ("zero outbound calls on a
//! warm re-run") are checkable, and it can inject transient failures to
//! exercise the retry path. Failure injection is content-keyed: a doomed
//! request fails only on its first arrival, so retries always converge.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::equivalence::nli::{NliLabel, NliScript};
use crate::equivalence::normalize;
use crate::error::{Error, Result};
use crate::gateway::Script;

/// Equivalence stub behavior: explicit (reference, candidate) pairs win,
/// then normalized equality, then the default probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceScript {
    #[serde(default)]
    pub pairs: Vec<EquivalencePair>,
    /// Probability returned when the normalized strings are equal.
    #[serde(default = "one")]
    pub equal_normalized_probability: f64,
    #[serde(default)]
    pub default_probability: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for EquivalenceScript {
    fn default() -> Self {
        EquivalenceScript {
            pairs: Vec::new(),
            equal_normalized_probability: 1.0,
            default_probability: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalencePair {
    pub reference: String,
    pub candidate: String,
    pub probability: f64,
}

/// Fraction of requests that fail with HTTP 500 on first sight.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FaultSpec {
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StubConfig {
    #[serde(default)]
    pub chat: Script,
    #[serde(default)]
    pub equivalence: EquivalenceScript,
    #[serde(default)]
    pub nli: Option<NliScript>,
    #[serde(default)]
    pub fault: FaultSpec,
}

#[derive(Default)]
pub struct Counters {
    pub total: AtomicUsize,
    pub chat: AtomicUsize,
    pub equivalence: AtomicUsize,
    pub nli: AtomicUsize,
    pub injected_failures: AtomicUsize,
}

pub struct StubServer {
    addr: std::net::SocketAddr,
    counters: Arc<Counters>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(config: StubConfig) -> Result<StubServer> {
        let listener = TcpListener::bind("127.0.0.1:0")
            .map_err(|e| Error::domain(format!("stub server bind: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Error::domain(format!("stub server addr: {e}")))?;
        let counters = Arc::new(Counters::default());
        let shutdown = Arc::new(AtomicBool::new(false));
        let state = Arc::new(ServerState {
            config,
            counters: counters.clone(),
            seen: Mutex::new(HashSet::new()),
        });
        let stop = shutdown.clone();
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let state = state.clone();
                std::thread::spawn(move || state.handle(stream));
            }
        });
        Ok(StubServer {
            addr,
            counters,
            shutdown,
            handle: Some(handle),
        })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn chat_url(&self) -> String {
        self.base_url()
    }

    pub fn equivalence_url(&self) -> String {
        format!("{}/equivalence", self.base_url())
    }

    pub fn nli_url(&self) -> String {
        format!("{}/nli", self.base_url())
    }

    pub fn request_count(&self) -> usize {
        self.counters.total.load(Ordering::SeqCst)
    }

    pub fn chat_count(&self) -> usize {
        self.counters.chat.load(Ordering::SeqCst)
    }

    pub fn injected_failure_count(&self) -> usize {
        self.counters.injected_failures.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // Nudge the accept loop awake.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

struct ServerState {
    config: StubConfig,
    counters: Arc<Counters>,
    seen: Mutex<HashSet<u64>>,
}

impl ServerState {
    fn handle(&self, mut stream: TcpStream) {
        let Some((path, body)) = read_request(&mut stream) else {
            return;
        };
        self.counters.total.fetch_add(1, Ordering::SeqCst);

        if self.should_fail(&body) {
            self.counters
                .injected_failures
                .fetch_add(1, Ordering::SeqCst);
            respond(
                &mut stream,
                500,
                r#"{"error": "injected transient failure"}"#,
            );
            return;
        }

        match path.as_str() {
            "/v1/chat/completions" => {
                self.counters.chat.fetch_add(1, Ordering::SeqCst);
                match self.chat_answer(&body) {
                    Some(answer) => {
                        let payload = serde_json::json!({
                            "object": "chat.completion",
                            "choices": [{
                                "index": 0,
                                "message": {"role": "assistant", "content": answer},
                                "finish_reason": "stop",
                            }],
                        });
                        respond(&mut stream, 200, &payload.to_string());
                    }
                    None => respond(
                        &mut stream,
                        404,
                        r#"{"error": "no scripted answer for this prompt"}"#,
                    ),
                }
            }
            "/equivalence" => {
                self.counters.equivalence.fetch_add(1, Ordering::SeqCst);
                let probability = self.equivalence_probability(&body);
                respond(
                    &mut stream,
                    200,
                    &serde_json::json!({ "probability": probability }).to_string(),
                );
            }
            "/nli" => {
                self.counters.nli.fetch_add(1, Ordering::SeqCst);
                let label = self.nli_label(&body);
                let probs = match label {
                    NliLabel::Entailment => {
                        serde_json::json!({"entailment": 1.0, "neutral": 0.0, "contradiction": 0.0})
                    }
                    NliLabel::Neutral => {
                        serde_json::json!({"entailment": 0.0, "neutral": 1.0, "contradiction": 0.0})
                    }
                    NliLabel::Contradiction => {
                        serde_json::json!({"entailment": 0.0, "neutral": 0.0, "contradiction": 1.0})
                    }
                };
                respond(
                    &mut stream,
                    200,
                    &serde_json::json!({ "label": label, "probabilities": probs }).to_string(),
                );
            }
            _ => respond(&mut stream, 404, r#"{"error": "unknown path"}"#),
        }
    }

    fn should_fail(&self, body: &str) -> bool {
        if self.config.fault.rate <= 0.0 {
            return false;
        }
        let mut hasher = Sha256::new();
        hasher.update(self.config.fault.seed.to_le_bytes());
        hasher.update(body.as_bytes());
        let digest = hasher.finalize();
        let token = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let doomed = (token as f64 / u64::MAX as f64) < self.config.fault.rate;
        if !doomed {
            return false;
        }
        // Fail only the first time we see this exact body.
        self.seen.lock().expect("seen set").insert(token)
    }

    fn chat_answer(&self, body: &str) -> Option<String> {
        let parsed: serde_json::Value = serde_json::from_str(body).ok()?;
        let prompt = parsed.get("messages")?.get(0)?.get("content")?.as_str()?;
        if let Some(answer) = self.config.chat.by_prompt.get(prompt) {
            return Some(answer.clone());
        }
        let digest = crate::gateway::ScriptedBackend::prompt_hash(prompt);
        if let Some(answer) = self.config.chat.by_hash.get(&digest) {
            return Some(answer.clone());
        }
        self.config.chat.default.clone()
    }

    fn equivalence_probability(&self, body: &str) -> f64 {
        let Ok(parsed) = serde_json::from_str::<serde_json::Value>(body) else {
            return self.config.equivalence.default_probability;
        };
        let reference = parsed
            .get("reference")
            .and_then(|v| v.as_str())
            .unwrap_or("");
        let candidate = parsed
            .get("candidate")
            .and_then(|v| v.as_str())
            .unwrap_or("");
        for pair in &self.config.equivalence.pairs {
            if pair.reference == reference && pair.candidate == candidate {
                return pair.probability;
            }
        }
        if !reference.is_empty() && normalize(reference) == normalize(candidate) {
            return self.config.equivalence.equal_normalized_probability;
        }
        self.config.equivalence.default_probability
    }

    fn nli_label(&self, body: &str) -> NliLabel {
        let script = match &self.config.nli {
            Some(script) => script,
            None => return NliLabel::Contradiction,
        };
        let hypothesis = serde_json::from_str::<serde_json::Value>(body)
            .ok()
            .and_then(|v| {
                v.get("hypothesis")
                    .and_then(|h| h.as_str())
                    .map(String::from)
            })
            .unwrap_or_default();
        for rule in &script.rules {
            if hypothesis.contains(&rule.contains) {
                return rule.label;
            }
        }
        script.default
    }
}

/// Minimal HTTP/1.1 request reader: request line, headers, sized body.
fn read_request(stream: &mut TcpStream) -> Option<(String, String)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line).ok()?;
    let path = request_line.split_whitespace().nth(1)?.to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(value) = line
            .to_ascii_lowercase()
            .strip_prefix("content-length:")
            .map(str::trim)
            .and_then(|v| v.parse::<usize>().ok())
        {
            content_length = value;
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body).ok()?;
    Some((path, String::from_utf8_lossy(&body).into_owned()))
}

fn respond(stream: &mut TcpStream, status: u16, body: &str) {
    let reason = match status {
        200 => "OK",
        404 => "Not Found",
        500 => "Internal Server Error",
        _ => "Unknown",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(response.as_bytes());
}
