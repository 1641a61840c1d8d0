//! Chat-completions provider for OpenAI-compatible endpoints.

use std::collections::BTreeMap;
use std::time::Duration;

use serde_json::{json, Value};

use super::{ModelConfig, ProviderError, ProviderResponse};

#[derive(Debug)]
pub struct HttpProvider {
    agent: ureq::Agent,
    endpoint: String,
    credential_env: String,
    model: String,
    temperature: f64,
    max_output_tokens: u32,
}

impl HttpProvider {
    pub fn new(cfg: &ModelConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.request_timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: cfg.endpoint.clone().unwrap_or_default(),
            credential_env: cfg.credential_env.clone().unwrap_or_default(),
            model: cfg.model_name.clone(),
            temperature: cfg.temperature,
            max_output_tokens: cfg.max_output_tokens,
        }
    }

    pub(super) fn request(&self, prompt: &str) -> Result<ProviderResponse, ProviderError> {
        let key = std::env::var(&self.credential_env).map_err(|_| {
            ProviderError::Refused(format!("credential variable {} is not set", self.credential_env))
        })?;
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
        });
        let mut response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .content_type("application/json")
            .send(body.to_string())
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        match status {
            200..=299 => parse_chat_response(&text),
            408 | 409 | 429 | 500..=599 => Err(ProviderError::Transient(format!("HTTP {status}"))),
            _ => Err(ProviderError::Refused(format!("HTTP {status}: {}", snippet(&text)))),
        }
    }
}

fn snippet(text: &str) -> &str {
    let end = text.char_indices().nth(200).map_or(text.len(), |(i, _)| i);
    &text[..end]
}

pub(super) fn parse_chat_response(text: &str) -> Result<ProviderResponse, ProviderError> {
    let v: Value = serde_json::from_str(text)
        .map_err(|e| ProviderError::Transient(format!("unparseable response body: {e}")))?;
    let choice = &v["choices"][0];
    let content = choice["message"]["content"].as_str().unwrap_or_default().to_string();
    if content.trim().is_empty() {
        return Err(ProviderError::Empty);
    }
    let usage = &v["usage"];
    let token_counts = match (usage["prompt_tokens"].as_u64(), usage["completion_tokens"].as_u64()) {
        (Some(p), Some(c)) => Some((p, c)),
        _ => None,
    };
    let mut meta = BTreeMap::new();
    for key in ["id", "model"] {
        if let Some(s) = v[key].as_str() {
            meta.insert(key.to_string(), Value::from(s));
        }
    }
    if let Some(reason) = choice["finish_reason"].as_str() {
        meta.insert("finish_reason".into(), Value::from(reason));
    }
    Ok(ProviderResponse {
        text: content,
        token_counts,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_standard_shape() {
        let body = r#"{"id":"c1","model":"m","choices":[{"message":{"role":"assistant","content":"hi"},"finish_reason":"stop"}],"usage":{"prompt_tokens":5,"completion_tokens":1}}"#;
        let r = parse_chat_response(body).unwrap();
        assert_eq!(r.text, "hi");
        assert_eq!(r.token_counts, Some((5, 1)));
        assert_eq!(r.meta["finish_reason"], "stop");
    }

    #[test]
    fn empty_content_is_empty_completion() {
        let body = r#"{"choices":[{"message":{"content":"  "}}]}"#;
        assert!(matches!(parse_chat_response(body), Err(ProviderError::Empty)));
    }
}
