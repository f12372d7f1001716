//! OpenAI-compatible HTTP transport.
//!
//! Generation goes through `POST {base}/v1/chat/completions`; scoring goes
//! through `POST {base}/v1/completions` with `echo` and `logprobs`, keeping
//! only the echoed tokens that overlap the continuation.

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{AttemptError, BackendError, Completion, CompletionRequest, TokenLogprob, Transport};

pub(crate) struct HttpTransport {
    agent: ureq::Agent,
    base: String,
    api_key: String,
}

impl HttpTransport {
    pub(crate) fn new(
        base_url: &str,
        api_key: String,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let base = base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base).to_string();
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(BackendError::Config(format!(
                "base_url must start with http:// or https://, got `{base_url}`"
            )));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Ok(HttpTransport {
            agent,
            base,
            api_key,
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<(u16, String), AttemptError> {
        let mut request = self
            .agent
            .post(format!("{}{path}", self.base))
            .header("Content-Type", "application/json");
        if !self.api_key.is_empty() {
            request = request.header("Authorization", format!("Bearer {}", self.api_key));
        }
        let mut response = request.send_json(body).map_err(classify)?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| AttemptError::Transient(format!("reading response body: {e}")))?;
        Ok((status, text))
    }

    /// Applies the retry classification to a status code and decodes 2xx
    /// bodies as JSON.
    fn decode<T: for<'de> Deserialize<'de>>(status: u16, body: String) -> Result<T, AttemptError> {
        match status {
            200..=299 => serde_json::from_str(&body).map_err(|e| {
                AttemptError::Fatal(BackendError::Protocol {
                    status,
                    body: format!("unparseable response ({e}): {body}"),
                })
            }),
            429 | 500..=599 => Err(AttemptError::Transient(format!("status {status}: {body}"))),
            _ => Err(AttemptError::Fatal(BackendError::Protocol { status, body })),
        }
    }
}

fn classify(error: ureq::Error) -> AttemptError {
    use ureq::Error as E;
    match error {
        E::Io(_) | E::Timeout(_) | E::HostNotFound | E::ConnectionFailed | E::Protocol(_) => {
            AttemptError::Transient(error.to_string())
        }
        other => AttemptError::Fatal(BackendError::Config(other.to_string())),
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    finish_reason: Option<String>,
    logprobs: Option<ChatLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatLogprobs {
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Deserialize)]
struct CompletionsResponse {
    choices: Vec<CompletionsChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionsChoice {
    logprobs: Option<EchoLogprobs>,
}

#[derive(Debug, Deserialize)]
struct EchoLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

impl Transport for HttpTransport {
    fn complete(
        &self,
        request: &CompletionRequest,
        model: &str,
    ) -> Result<Completion, AttemptError> {
        let mut body = json!({
            "model": model,
            "messages": [{"role": "user", "content": request.prompt.text}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(stop) = &request.stop {
            body["stop"] = json!(stop);
        }
        if request.want_logprobs {
            body["logprobs"] = json!(true);
        }
        let (status, text) = self.post("/v1/chat/completions", &body)?;
        let response: ChatResponse = Self::decode(status, text)?;
        let choice = response.choices.into_iter().next().ok_or_else(|| {
            AttemptError::Fatal(BackendError::Protocol {
                status,
                body: "response has no choices".into(),
            })
        })?;
        let text = choice.message.content.unwrap_or_default();
        let token_logprobs = choice
            .logprobs
            .and_then(|l| l.content)
            .filter(|tokens| tokens.iter().map(|t| t.token.as_str()).collect::<String>() == text);
        Ok(Completion {
            text,
            token_logprobs,
            finish_reason: choice.finish_reason.unwrap_or_else(|| "unknown".into()),
            cached: false,
        })
    }

    fn score(
        &self,
        prompt: &str,
        continuation: &str,
        model: &str,
    ) -> Result<Vec<TokenLogprob>, AttemptError> {
        let full = format!("{prompt}{continuation}");
        let body = json!({
            "model": model,
            "prompt": full,
            "max_tokens": 1,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let (status, text) = self.post("/v1/completions", &body)?;
        if status == 404 {
            return Err(AttemptError::Fatal(BackendError::Capability(format!(
                "completions endpoint unavailable for `{model}`: {text}"
            ))));
        }
        let response: CompletionsResponse = Self::decode(status, text)?;
        let logprobs = response
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .ok_or_else(|| {
                AttemptError::Fatal(BackendError::Capability(
                    "response carries no echoed logprobs".into(),
                ))
            })?;
        continuation_tokens(&logprobs, prompt.chars().count(), full.chars().count())
            .map_err(AttemptError::Fatal)
    }
}

/// Echoed tokens overlapping the character range `[start, end)`.
fn continuation_tokens(
    echo: &EchoLogprobs,
    start: usize,
    end: usize,
) -> Result<Vec<TokenLogprob>, BackendError> {
    let mut out = Vec::new();
    for ((token, logprob), &offset) in echo
        .tokens
        .iter()
        .zip(&echo.token_logprobs)
        .zip(&echo.text_offset)
    {
        let token_end = offset + token.chars().count();
        if offset >= end || token_end <= start {
            continue;
        }
        let logprob = logprob.ok_or_else(|| BackendError::Protocol {
            status: 200,
            body: format!("missing logprob for echoed token {token:?} at offset {offset}"),
        })?;
        out.push(TokenLogprob {
            token: token.clone(),
            logprob,
        });
    }
    Ok(out)
}
