//! Uniform completion interface over pluggable language-model providers.
//!
//! [`LmGateway::complete`] adds retry with jittered exponential backoff on
//! transient failures and appends every call to a completion log keyed by
//! the SHA-256 of the rendered prompt.

mod http;
mod scripted;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use http::HttpProvider;
pub use scripted::{load_script, ScriptedProvider};

use crate::program_store::persist::sha256_hex;
use crate::prompt_engine::{PromptBundle, PromptKind};

/// Prefix every credential variable must carry.
pub const CREDENTIAL_ENV_PREFIX: &str = "EVOFORGE_API_KEY_";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("model configuration error: {0}")]
    Config(String),
    #[error("transport failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("provider returned an empty completion")]
    EmptyCompletion,
    #[error("provider refused the request: {0}")]
    Refused(String),
    #[error("completion log I/O error: {0}")]
    Log(#[from] std::io::Error),
}

/// Failure of a single provider attempt.
#[derive(Debug)]
pub enum ProviderError {
    Transient(String),
    Refused(String),
    Empty,
}

#[derive(Debug, Clone, Default)]
pub struct ProviderResponse {
    pub text: String,
    pub token_counts: Option<(u64, u64)>,
    pub meta: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HttpOpenaiStyle,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub provider: ProviderKind,
    #[serde(default)]
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_request_timeout")]
    pub request_timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key. The key itself
    /// never appears in configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_path: Option<PathBuf>,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap_ms")]
    pub backoff_cap_ms: u64,
    /// Concurrent requests; defaults to the branching factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_in_flight: Option<usize>,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_max_output_tokens() -> u32 {
    8192
}
fn default_request_timeout() -> f64 {
    600.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_base_ms() -> u64 {
    1_000
}
fn default_backoff_cap_ms() -> u64 {
    30_000
}

impl ModelConfig {
    pub fn scripted(script_path: impl Into<PathBuf>) -> Self {
        Self {
            provider: ProviderKind::Scripted,
            model_name: "scripted".into(),
            temperature: default_temperature(),
            max_output_tokens: default_max_output_tokens(),
            request_timeout_secs: default_request_timeout(),
            max_retries: default_max_retries(),
            endpoint: None,
            credential_env: None,
            script_path: Some(script_path.into()),
            backoff_base_ms: default_backoff_base_ms(),
            backoff_cap_ms: default_backoff_cap_ms(),
            max_in_flight: None,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let fail = |m: &str| Err(LmError::Config(m.to_string()));
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be a finite value >= 0");
        }
        if self.max_output_tokens == 0 {
            return fail("max_output_tokens must be positive");
        }
        if !(self.request_timeout_secs > 0.0 && self.request_timeout_secs.is_finite()) {
            return fail("request_timeout_secs must be positive");
        }
        if self.max_in_flight == Some(0) {
            return fail("max_in_flight must be positive");
        }
        match self.provider {
            ProviderKind::Scripted => {
                if self.script_path.is_none() {
                    return fail("scripted provider requires script_path");
                }
            }
            ProviderKind::HttpOpenaiStyle => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return fail("http provider requires endpoint");
                }
                match self.credential_env.as_deref() {
                    None => return fail("http provider requires credential_env"),
                    Some(name) if !is_credential_var_name(name) => {
                        return Err(LmError::Config(format!(
                            "credential_env must name an environment variable {CREDENTIAL_ENV_PREFIX}<PROVIDER>, got `{name}`"
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }
}

fn is_credential_var_name(name: &str) -> bool {
    name.strip_prefix(CREDENTIAL_ENV_PREFIX).is_some_and(|rest| {
        !rest.is_empty() && rest.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt_hash: String,
    pub response_text: String,
    pub latency_secs: f64,
    pub token_counts: Option<(u64, u64)>,
    pub provider_meta: BTreeMap<String, Value>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    prompt_hash: &'a str,
    kind: PromptKind,
    template_id: &'a str,
    attempts: u32,
    latency_secs: f64,
    response_text: Option<&'a str>,
    token_counts: Option<(u64, u64)>,
    provider_meta: Option<&'a BTreeMap<String, Value>>,
    error: Option<String>,
}

#[derive(Debug)]
enum Provider {
    Scripted(ScriptedProvider),
    Http(HttpProvider),
}

impl Provider {
    fn call(&self, prompt: &str, hash: &str) -> Result<ProviderResponse, ProviderError> {
        let r = match self {
            Provider::Scripted(p) => p.respond(hash),
            Provider::Http(p) => p.request(prompt),
        }?;
        if r.text.trim().is_empty() {
            return Err(ProviderError::Empty);
        }
        Ok(r)
    }
}

#[derive(Debug)]
pub struct LmGateway {
    provider: Provider,
    max_retries: u32,
    backoff_base: Duration,
    backoff_cap: Duration,
    log: Mutex<Option<File>>,
    calls: AtomicU64,
}

pub fn prompt_hash(rendered: &str) -> String {
    sha256_hex(rendered.as_bytes())
}

impl LmGateway {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self, LmError> {
        cfg.validate()?;
        let provider = match cfg.provider {
            ProviderKind::Scripted => Provider::Scripted(load_script(cfg.script_path.as_deref().unwrap())?),
            ProviderKind::HttpOpenaiStyle => Provider::Http(HttpProvider::new(cfg)),
        };
        Ok(Self::with_provider(provider, cfg))
    }

    /// Gateway around an in-memory scripted provider.
    pub fn scripted(provider: ScriptedProvider) -> Self {
        let cfg = ModelConfig::scripted("<memory>");
        Self::with_provider(Provider::Scripted(provider), &cfg)
    }

    fn with_provider(provider: Provider, cfg: &ModelConfig) -> Self {
        Self {
            provider,
            max_retries: cfg.max_retries,
            backoff_base: Duration::from_millis(cfg.backoff_base_ms),
            backoff_cap: Duration::from_millis(cfg.backoff_cap_ms),
            log: Mutex::new(None),
            calls: AtomicU64::new(0),
        }
    }

    /// Appends completion records to `path` from now on.
    pub fn with_log(self, path: &Path) -> Result<Self, LmError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        *self.log.lock().unwrap() = Some(file);
        Ok(self)
    }

    /// Number of `complete` calls made so far.
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let exp = self.backoff_base.saturating_mul(1u32 << attempt.min(16));
        let capped = exp.min(self.backoff_cap);
        capped.mul_f64(rand::rng().random_range(0.5..=1.0))
    }

    pub fn complete(&self, bundle: &PromptBundle) -> Result<CompletionRecord, LmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let hash = prompt_hash(&bundle.rendered);
        let started = Instant::now();
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            match self.provider.call(&bundle.rendered, &hash) {
                Ok(r) => break Ok(r),
                Err(ProviderError::Empty) => break Err(LmError::EmptyCompletion),
                Err(ProviderError::Refused(m)) => break Err(LmError::Refused(m)),
                Err(ProviderError::Transient(m)) => {
                    if attempts > self.max_retries {
                        break Err(LmError::Transport { attempts, last: m });
                    }
                    log::warn!("transient LM failure (attempt {attempts}): {m}");
                    std::thread::sleep(self.backoff(attempts - 1));
                }
            }
        };
        let latency_secs = started.elapsed().as_secs_f64();
        self.write_log(bundle, &hash, attempts, latency_secs, &result)?;
        let r = result?;
        Ok(CompletionRecord {
            prompt_hash: hash,
            response_text: r.text,
            latency_secs,
            token_counts: r.token_counts,
            provider_meta: r.meta,
        })
    }

    fn write_log(
        &self,
        bundle: &PromptBundle,
        hash: &str,
        attempts: u32,
        latency_secs: f64,
        result: &Result<ProviderResponse, LmError>,
    ) -> Result<(), LmError> {
        let mut guard = self.log.lock().unwrap();
        let Some(file) = guard.as_mut() else {
            return Ok(());
        };
        let (ok, err) = match result {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let line = LogLine {
            prompt_hash: hash,
            kind: bundle.kind,
            template_id: &bundle.template_id,
            attempts,
            latency_secs,
            response_text: ok.map(|r| r.text.as_str()),
            token_counts: ok.and_then(|r| r.token_counts),
            provider_meta: ok.map(|r| &r.meta),
            error: err,
        };
        let mut text = serde_json::to_string(&line).expect("log line serializes");
        text.push('\n');
        file.write_all(text.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read};
    use std::net::TcpListener;

    fn bundle(text: &str) -> PromptBundle {
        PromptBundle {
            kind: PromptKind::Direct,
            template_id: "t".into(),
            parent_source: String::new(),
            top_snippets: vec![],
            diverse_snippets: vec![],
            idea_text: None,
            error_text: None,
            rendered: text.into(),
        }
    }

    #[test]
    fn scripted_replays_queue_head() {
        let gw = LmGateway::scripted(ScriptedProvider::from_responses(["RESP1"]));
        assert_eq!(gw.complete(&bundle("p")).unwrap().response_text, "RESP1");
        assert!(matches!(gw.complete(&bundle("p")), Err(LmError::Refused(_))));
        assert_eq!(gw.call_count(), 2);
    }

    #[test]
    fn replay_by_hash_is_deterministic() {
        let h = prompt_hash("the prompt");
        let script = format!(
            "{{\"match\":\"{}\",\"response\":\"same\"}}\n{{\"response\":\"queued\"}}\n",
            &h[..12]
        );
        let gw = LmGateway::scripted(ScriptedProvider::parse(&script).unwrap());
        let a = gw.complete(&bundle("the prompt")).unwrap();
        let b = gw.complete(&bundle("the prompt")).unwrap();
        assert_eq!(a.response_text, "same");
        assert_eq!(a.response_text, b.response_text);
        assert_eq!(a.prompt_hash, h);
        assert_eq!(gw.complete(&bundle("other")).unwrap().response_text, "queued");
    }

    #[test]
    fn load_script_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ndjson");
        std::fs::write(&path, "{\"response\":\"1\"}\n{\"response\":\"2\"}\n{\"response\":\"3\"}\n").unwrap();
        let gw = LmGateway::from_config(&ModelConfig::scripted(&path)).unwrap();
        for expected in ["1", "2", "3"] {
            assert_eq!(gw.complete(&bundle("x")).unwrap().response_text, expected);
        }
        assert!(matches!(gw.complete(&bundle("x")), Err(LmError::Refused(_))));
        std::fs::write(&path, "").unwrap();
        assert!(matches!(LmGateway::from_config(&ModelConfig::scripted(&path)), Err(LmError::Config(_))));
    }

    fn http_config(endpoint: String, var: &str) -> ModelConfig {
        ModelConfig {
            provider: ProviderKind::HttpOpenaiStyle,
            model_name: "m".into(),
            endpoint: Some(endpoint),
            credential_env: Some(var.into()),
            backoff_base_ms: 1,
            backoff_cap_ms: 2,
            max_retries: 2,
            script_path: None,
            ..ModelConfig::scripted("")
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = http_config("http://x".into(), "EVOFORGE_API_KEY_OPENAI");
        assert!(cfg.validate().is_ok());
        cfg.credential_env = Some("sk-literal-secret".into());
        assert!(cfg.validate().is_err());
        cfg.credential_env = None;
        assert!(cfg.validate().is_err());
        let mut s = ModelConfig::scripted("x");
        s.script_path = None;
        assert!(s.validate().is_err());
        let mut t = ModelConfig::scripted("x");
        t.temperature = -0.1;
        assert!(t.validate().is_err());
    }

    /// Serves canned HTTP responses in order and records request heads.
    fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut head = String::new();
                let mut content_length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                    head.push_str(&line);
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body_in = vec![0; content_length];
                reader.read_exact(&mut body_in).unwrap();
                head.push_str(&String::from_utf8_lossy(&body_in));
                seen.push(head);
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            seen
        });
        (url, handle)
    }

    #[test]
    fn http_retries_transient_then_succeeds_without_leaking_key() {
        let var = "EVOFORGE_API_KEY_TESTRETRY";
        let secret = "sk-test-7f3a91-secret";
        std::env::set_var(var, secret);
        let ok = r#"{"choices":[{"message":{"content":"edited"}}],"usage":{"prompt_tokens":3,"completion_tokens":2}}"#;
        let (url, server) = serve(vec![(503, "{}".into()), (200, ok.into())]);
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("completions.ndjson");
        let gw = LmGateway::from_config(&http_config(url, var)).unwrap().with_log(&log_path).unwrap();
        let rec = gw.complete(&bundle("hello")).unwrap();
        assert_eq!(rec.response_text, "edited");
        assert_eq!(rec.token_counts, Some((3, 2)));
        let requests = server.join().unwrap();
        assert_eq!(requests.len(), 2);
        assert!(requests[0].contains(&format!("Bearer {secret}")));
        assert!(requests[1].contains("\"model\":\"m\""));
        let log = std::fs::read_to_string(&log_path).unwrap();
        assert!(log.contains(&rec.prompt_hash));
        assert!(log.contains("\"attempts\":2"));
        assert!(!log.contains(secret));
    }

    #[test]
    fn http_exhausts_retries() {
        let var = "EVOFORGE_API_KEY_TESTEXHAUST";
        std::env::set_var(var, "k");
        let (url, server) = serve(vec![(500, "{}".into()), (502, "{}".into()), (429, "{}".into())]);
        let gw = LmGateway::from_config(&http_config(url, var)).unwrap();
        let err = gw.complete(&bundle("p")).unwrap_err();
        assert!(matches!(err, LmError::Transport { attempts: 3, .. }), "{err:?}");
        server.join().unwrap();
    }

    #[test]
    fn http_client_error_is_refusal() {
        let var = "EVOFORGE_API_KEY_TESTREFUSE";
        std::env::set_var(var, "k");
        let (url, server) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        let gw = LmGateway::from_config(&http_config(url, var)).unwrap();
        assert!(matches!(gw.complete(&bundle("p")), Err(LmError::Refused(_))));
        server.join().unwrap();
    }
}
