//! OpenAI-compatible HTTP backend.
//!
//! Greedy/sampled answers go through `/v1/chat/completions` with logprobs
//! requested; option scoring goes through legacy `/v1/completions` with
//! `echo` + `max_tokens: 0`, summing the logprobs of the tokens that cover
//! the continuation. Transient failures retry with exponential backoff.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    BackendError, Completion, GenerationRequest, GenerationResult, HttpEndpointConfig, ModelBackend,
};

pub struct HttpBackend {
    backend_id: String,
    config: HttpEndpointConfig,
    auth_token: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChatLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

#[derive(Debug, Deserialize)]
struct CompletionsResponse {
    choices: Vec<CompletionsChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionsChoice {
    #[serde(default)]
    logprobs: Option<CompletionsLogprobs>,
}

#[derive(Debug, Deserialize)]
struct CompletionsLogprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

enum Attempt<T> {
    Done(T),
    Retry(String),
    Fail(BackendError),
}

impl HttpBackend {
    pub fn new(backend_id: String, config: HttpEndpointConfig) -> Result<Self, BackendError> {
        let auth_token = match &config.auth_token_env {
            Some(env_var) => {
                Some(
                    std::env::var(env_var).map_err(|_| BackendError::MissingAuthToken {
                        backend_id: backend_id.clone(),
                        env_var: env_var.clone(),
                    })?,
                )
            }
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Unavailable {
                backend_id: backend_id.clone(),
                message: e.to_string(),
            })?;
        Ok(Self {
            backend_id,
            config,
            auth_token,
            client,
        })
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}{path}", self.config.url.trim_end_matches('/'))
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Attempt<serde_json::Value> {
        let mut builder = self.client.post(self.endpoint(path)).json(body);
        if let Some(token) = &self.auth_token {
            builder = builder.bearer_auth(token);
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = response.status();
        if status.is_success() {
            match response.json::<serde_json::Value>() {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fail(BackendError::MalformedResponse {
                    backend_id: self.backend_id.clone(),
                    message: format!("invalid JSON: {e}"),
                }),
            }
        } else if status.as_u16() == 429 || status.is_server_error() {
            Attempt::Retry(format!("status {status}"))
        } else {
            let body = response.text().unwrap_or_default();
            Attempt::Fail(BackendError::Unavailable {
                backend_id: self.backend_id.clone(),
                message: format!("status {status}: {body}"),
            })
        }
    }

    /// Retries only idempotent requests (all of ours are) with exponential
    /// backoff, giving up after `max_retries` attempts.
    fn post_with_retry(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, BackendError> {
        let attempts = self.config.max_retries.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100u64 << (attempt - 1).min(5)));
            }
            match self.post(path, body) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(message) => last = message,
            }
        }
        Err(BackendError::Unavailable {
            backend_id: self.backend_id.clone(),
            message: format!("gave up after {attempts} attempts: {last}"),
        })
    }

    fn chat_generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "n": request.n_samples,
            "logprobs": request.want_logprobs,
        });
        let value = self.post_with_retry("/v1/chat/completions", &body)?;
        let parsed: ChatResponse =
            serde_json::from_value(value).map_err(|e| BackendError::MalformedResponse {
                backend_id: self.backend_id.clone(),
                message: e.to_string(),
            })?;
        let mut completions = Vec::with_capacity(parsed.choices.len());
        for choice in parsed.choices {
            let text = choice.message.content.unwrap_or_default();
            let token_logprobs: Vec<f64> = choice
                .logprobs
                .and_then(|lp| lp.content)
                .map(|tokens| {
                    tokens
                        .iter()
                        .map(|t| {
                            if t.logprob > 0.0 {
                                log::warn!(
                                    "backend {} returned positive logprob {}, clamping to 0",
                                    self.backend_id,
                                    t.logprob
                                );
                                0.0
                            } else {
                                t.logprob
                            }
                        })
                        .collect()
                })
                .unwrap_or_default();
            if request.want_logprobs && token_logprobs.is_empty() {
                return Err(BackendError::Capability {
                    backend_id: self.backend_id.clone(),
                    message: "endpoint returned no logprobs".into(),
                });
            }
            let token_count = if token_logprobs.is_empty() {
                text.split_whitespace().count().max(1) as u32
            } else {
                token_logprobs.len() as u32
            };
            completions.push(Completion {
                text,
                token_logprobs,
                token_count,
            });
        }
        Ok(GenerationResult {
            completions,
            continuation_scores: None,
            backend_id: self.backend_id.clone(),
            cached: false,
        })
    }

    /// Length-normalized continuation score: echo the prompt + option with
    /// zero new tokens, then average the logprobs of tokens whose text
    /// offset falls inside the option.
    fn score_one(&self, prompt: &str, continuation: &str) -> Result<f64, BackendError> {
        // a boundary space keeps the option from fusing into the prompt's
        // last token; the space token counts toward the continuation
        let separator = if prompt.ends_with(char::is_whitespace)
            || continuation.starts_with(char::is_whitespace)
        {
            ""
        } else {
            " "
        };
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{prompt}{separator}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let value = self.post_with_retry("/v1/completions", &body)?;
        let parsed: CompletionsResponse =
            serde_json::from_value(value).map_err(|e| BackendError::MalformedResponse {
                backend_id: self.backend_id.clone(),
                message: e.to_string(),
            })?;
        let logprobs = parsed
            .choices
            .first()
            .and_then(|c| c.logprobs.as_ref())
            .ok_or_else(|| BackendError::Capability {
                backend_id: self.backend_id.clone(),
                message: "endpoint returned no echo logprobs".into(),
            })?;
        let boundary = prompt.len();
        let mut sum = 0.0;
        let mut count = 0usize;
        for (offset, lp) in logprobs.text_offset.iter().zip(&logprobs.token_logprobs) {
            if *offset >= boundary {
                if let Some(lp) = lp {
                    sum += lp.min(0.0);
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(BackendError::Capability {
                backend_id: self.backend_id.clone(),
                message: format!("no scored tokens cover continuation {continuation:?}"),
            });
        }
        Ok(sum / count as f64)
    }
}

impl ModelBackend for HttpBackend {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn model_ident(&self) -> String {
        self.config.model.clone()
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        request.validate()?;
        let result = if let Some(continuations) = &request.scoring_continuations {
            let scores = continuations
                .iter()
                .map(|c| self.score_one(&request.prompt, c))
                .collect::<Result<Vec<f64>, BackendError>>()?;
            GenerationResult {
                completions: Vec::new(),
                continuation_scores: Some(scores),
                backend_id: self.backend_id.clone(),
                cached: false,
            }
        } else {
            self.chat_generate(request)?
        };
        result.validate_against(request)?;
        Ok(result)
    }
}
