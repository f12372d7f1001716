//! Scripted mock backend.
//!
//! A script is JSONL, one entry per line; the first entry whose matcher
//! accepts a request answers it:
//!
//! ```text
//! {"match": {"prompt_substring": "Which drug"}, "response": "The answer is (B)."}
//! {"match": {"continuation": "A"}, "token_logprobs": [-0.1]}
//! {"match": {"hash": "<sha256 of prompt>"}, "response": "...", "fail_times": 2}
//! ```
//!
//! Matcher fields are ANDed; an empty matcher accepts everything. `hash` is
//! the SHA-256 of the prompt text (for scoring, of the prefix),
//! `prompt_substring` is searched in the prompt (for scoring, in prefix plus
//! continuation) and `continuation` only matches scoring requests with exactly
//! that continuation. `fail_times` makes each distinct request fail
//! transiently that many times before succeeding. `token_logprobs` entries are
//! plain numbers or `{"token": ..., "logprob": ...}` objects.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AttemptError, BackendError, Completion, CompletionRequest, TokenLogprob, Transport};
use crate::hashing::sha256_hex;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_substring: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation: Option<String>,
}

impl MockMatch {
    pub fn any() -> Self {
        MockMatch::default()
    }

    pub fn hash(hash: &str) -> Self {
        MockMatch {
            hash: Some(hash.into()),
            ..Default::default()
        }
    }

    pub fn substring(s: &str) -> Self {
        MockMatch {
            prompt_substring: Some(s.into()),
            ..Default::default()
        }
    }

    pub fn continuation(c: &str) -> Self {
        MockMatch {
            continuation: Some(c.into()),
            ..Default::default()
        }
    }

    pub fn and_continuation(mut self, c: &str) -> Self {
        self.continuation = Some(c.into());
        self
    }

    fn accepts(&self, prompt: &str, continuation: Option<&str>) -> bool {
        if let Some(h) = &self.hash {
            if *h != sha256_hex(prompt) {
                return false;
            }
        }
        if let Some(want) = &self.continuation {
            if continuation != Some(want.as_str()) {
                return false;
            }
        }
        if let Some(s) = &self.prompt_substring {
            let found = match continuation {
                Some(c) => format!("{prompt}{c}").contains(s.as_str()),
                None => prompt.contains(s.as_str()),
            };
            if !found {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedLogprob {
    Value(f64),
    Token { token: String, logprob: f64 },
}

impl ScriptedLogprob {
    fn logprob(&self) -> f64 {
        match self {
            ScriptedLogprob::Value(v) => *v,
            ScriptedLogprob::Token { logprob, .. } => *logprob,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockEntry {
    #[serde(rename = "match")]
    pub matcher: MockMatch,
    #[serde(default)]
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<ScriptedLogprob>>,
    #[serde(default)]
    pub fail_times: u32,
    #[serde(default)]
    pub delay_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct MockScript {
    entries: Vec<MockEntry>,
    failures: Arc<Mutex<HashMap<(usize, String), u32>>>,
}

impl MockScript {
    pub fn new(entries: Vec<MockEntry>) -> Self {
        MockScript {
            entries,
            failures: Arc::default(),
        }
    }

    pub fn entries(&self) -> &[MockEntry] {
        &self.entries
    }

    pub fn parse(text: &str) -> Result<Self, BackendError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: MockEntry = serde_json::from_str(line)
                .map_err(|e| BackendError::Script(format!("line {}: {e}", i + 1)))?;
            if let Some(bad) = entry
                .token_logprobs
                .iter()
                .flatten()
                .map(ScriptedLogprob::logprob)
                .find(|lp| lp.is_nan() || *lp > 0.0)
            {
                return Err(BackendError::Script(format!(
                    "line {}: logprob {bad} is not <= 0",
                    i + 1
                )));
            }
            entries.push(entry);
        }
        Ok(MockScript::new(entries))
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entries serialize") + "\n")
            .collect()
    }

    fn find(&self, prompt: &str, continuation: Option<&str>) -> Option<(usize, &MockEntry)> {
        self.entries
            .iter()
            .enumerate()
            .find(|(_, e)| e.matcher.accepts(prompt, continuation))
    }

    /// Consumes one scripted failure for this (entry, request), if any remain.
    fn scripted_failure(&self, index: usize, request_id: String) -> Option<String> {
        let entry = &self.entries[index];
        if entry.fail_times == 0 {
            return None;
        }
        let mut failures = self.failures.lock().expect("failure table");
        let served = failures.entry((index, request_id)).or_default();
        if *served < entry.fail_times {
            *served += 1;
            Some(format!("scripted failure {}/{}", served, entry.fail_times))
        } else {
            None
        }
    }
}

fn describe(prompt: &str) -> String {
    let head: String = prompt.chars().take(60).collect();
    format!("{} ({head:?}...)", &sha256_hex(prompt)[..12])
}

impl Transport for MockScript {
    fn complete(
        &self,
        request: &CompletionRequest,
        _model: &str,
    ) -> Result<Completion, AttemptError> {
        let prompt = &request.prompt.text;
        let (index, entry) = self.find(prompt, None).ok_or_else(|| {
            AttemptError::Fatal(BackendError::Script(format!(
                "no entry matches prompt {}",
                describe(prompt)
            )))
        })?;
        if entry.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(entry.delay_ms));
        }
        if let Some(msg) = self.scripted_failure(index, request.prompt.content_hash.clone()) {
            return Err(AttemptError::Transient(msg));
        }
        let mut text = entry.response.clone();
        for stop in request.stop.iter().flatten() {
            if let Some(pos) = text.find(stop.as_str()) {
                text.truncate(pos);
            }
        }
        let token_logprobs = match (&entry.token_logprobs, request.want_logprobs) {
            (Some(tokens), true) => {
                let tokens: Option<Vec<TokenLogprob>> = tokens
                    .iter()
                    .map(|t| match t {
                        ScriptedLogprob::Token { token, logprob } => Some(TokenLogprob {
                            token: token.clone(),
                            logprob: *logprob,
                        }),
                        ScriptedLogprob::Value(_) => None,
                    })
                    .collect();
                tokens.filter(|ts| ts.iter().map(|t| t.token.as_str()).collect::<String>() == text)
            }
            _ => None,
        };
        Ok(Completion {
            text,
            token_logprobs,
            finish_reason: entry.finish_reason.clone().unwrap_or_else(|| "stop".into()),
            cached: false,
        })
    }

    fn score(
        &self,
        prompt: &str,
        continuation: &str,
        _model: &str,
    ) -> Result<Vec<TokenLogprob>, AttemptError> {
        let (index, entry) = self.find(prompt, Some(continuation)).ok_or_else(|| {
            AttemptError::Fatal(BackendError::Script(format!(
                "no entry matches scoring request {} + {continuation:?}",
                describe(prompt)
            )))
        })?;
        if entry.delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(entry.delay_ms));
        }
        let request_id = sha256_hex(format!("{prompt}\u{0}{continuation}"));
        if let Some(msg) = self.scripted_failure(index, request_id) {
            return Err(AttemptError::Transient(msg));
        }
        let tokens = entry.token_logprobs.as_ref().ok_or_else(|| {
            AttemptError::Fatal(BackendError::Capability(
                "matching mock entry has no token_logprobs".into(),
            ))
        })?;
        let single = tokens.len() == 1;
        Ok(tokens
            .iter()
            .map(|t| match t {
                ScriptedLogprob::Token { token, logprob } => TokenLogprob {
                    token: token.clone(),
                    logprob: *logprob,
                },
                ScriptedLogprob::Value(v) => TokenLogprob {
                    token: if single {
                        continuation.to_string()
                    } else {
                        String::new()
                    },
                    logprob: *v,
                },
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_script_lines() {
        let text = r#"{"match": {"prompt_substring": "Which"}, "response": "The answer is (B)."}

{"match": {"continuation": "A"}, "token_logprobs": [-0.1, {"token": "x", "logprob": -0.2}]}
"#;
        let script = MockScript::parse(text).unwrap();
        assert_eq!(script.entries().len(), 2);
        let again = MockScript::parse(&script.to_jsonl()).unwrap();
        assert_eq!(again.entries(), script.entries());
    }

    #[test]
    fn rejects_positive_logprobs_and_unknown_fields() {
        assert!(MockScript::parse(r#"{"match": {}, "token_logprobs": [0.5]}"#).is_err());
        let err =
            MockScript::parse("{\"match\": {}}\n{\"match\": {\"regex\": \"x\"}}").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn matchers_combine() {
        let m = MockMatch::substring("Answer: (").and_continuation("B");
        assert!(m.accepts("x Answer: (", Some("B")));
        assert!(!m.accepts("x Answer: (", Some("A")));
        assert!(!m.accepts("x Answer: (", None));
        assert!(MockMatch::any().accepts("anything", None));
        assert!(MockMatch::substring("(B").accepts("Answer: (", Some("B")));
    }
}
