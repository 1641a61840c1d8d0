//! Deterministic provider that replays canned responses from a file.
//!
//! The file is newline-delimited JSON, one entry per line:
//!
//! ```text
//! {"response": "..."}                      served in file order
//! {"match": "3fa9", "response": "..."}     served whenever the prompt hash starts with "3fa9"
//! ```
//!
//! Keyed entries are reusable; unkeyed entries are consumed once each.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use serde::Deserialize;

use super::{LmError, ProviderError, ProviderResponse};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptEntry {
    #[serde(rename = "match", default)]
    match_prefix: Option<String>,
    response: String,
}

#[derive(Debug)]
pub struct ScriptedProvider {
    keyed: Vec<(String, String)>,
    queue: Mutex<VecDeque<String>>,
}

/// Parses a script file into a provider.
pub fn load_script(path: &Path) -> Result<ScriptedProvider, LmError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LmError::Config(format!("cannot read script {}: {e}", path.display())))?;
    ScriptedProvider::parse(&text)
        .map_err(|e| LmError::Config(format!("script {}: {e}", path.display())))
}

impl ScriptedProvider {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut keyed = Vec::new();
        let mut queue = VecDeque::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry =
                serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            match entry.match_prefix {
                Some(prefix) => {
                    let prefix = prefix.to_ascii_lowercase();
                    if prefix.is_empty() || !prefix.chars().all(|c| c.is_ascii_hexdigit()) {
                        return Err(format!("line {}: `match` must be a non-empty hex prefix", i + 1));
                    }
                    keyed.push((prefix, entry.response));
                }
                None => queue.push_back(entry.response),
            }
        }
        if keyed.is_empty() && queue.is_empty() {
            return Err("script contains no responses".into());
        }
        Ok(Self {
            keyed,
            queue: Mutex::new(queue),
        })
    }

    /// Builds a provider that serves `responses` in order.
    pub fn from_responses<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            keyed: Vec::new(),
            queue: Mutex::new(responses.into_iter().map(Into::into).collect()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    pub(super) fn respond(&self, prompt_hash: &str) -> Result<ProviderResponse, ProviderError> {
        let text = match self.keyed.iter().find(|(prefix, _)| prompt_hash.starts_with(prefix.as_str())) {
            Some((_, response)) => response.clone(),
            None => self
                .queue
                .lock()
                .unwrap()
                .pop_front()
                .ok_or_else(|| ProviderError::Refused("script exhausted".into()))?,
        };
        if text.trim().is_empty() {
            return Err(ProviderError::Empty);
        }
        Ok(ProviderResponse {
            text,
            token_counts: None,
            meta: Default::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counted_queue() {
        let p = ScriptedProvider::parse("{\"response\":\"a\"}\n{\"response\":\"b\"}\n\n{\"response\":\"c\"}\n").unwrap();
        let got: Vec<_> = (0..3).map(|_| p.respond("00").unwrap().text).collect();
        assert_eq!(got, ["a", "b", "c"]);
        assert!(matches!(p.respond("00"), Err(ProviderError::Refused(_))));
    }

    #[test]
    fn blank_response_is_empty_completion() {
        let p = ScriptedProvider::from_responses(["  \n"]);
        assert!(matches!(p.respond("00"), Err(ProviderError::Empty)));
    }

    #[test]
    fn keyed_entries_match_out_of_order() {
        let p = ScriptedProvider::parse("{\"response\":\"queued\"}\n{\"match\":\"ABC\",\"response\":\"keyed\"}\n").unwrap();
        assert_eq!(p.respond("abc123").unwrap().text, "keyed");
        assert_eq!(p.respond("abc999").unwrap().text, "keyed");
        assert_eq!(p.respond("fff").unwrap().text, "queued");
        assert_eq!(p.remaining(), 0);
    }

    #[test]
    fn empty_or_malformed_rejected() {
        assert!(ScriptedProvider::parse("").is_err());
        assert!(ScriptedProvider::parse("\n  \n").is_err());
        assert!(ScriptedProvider::parse("not json").unwrap_err().contains("line 1"));
        assert!(ScriptedProvider::parse("{\"response\":\"x\",\"other\":1}").is_err());
        assert!(ScriptedProvider::parse("{\"match\":\"zz\",\"response\":\"x\"}").is_err());
    }
}
