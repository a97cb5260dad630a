//! Completion-provider boundary.
//!
//! Every generation step goes through [`CompletionProvider`]. Two
//! implementations ship: [`HttpProvider`] talks to an OpenAI-style endpoint,
//! and [`ScriptedProvider`] replays a fixed script for tests and offline runs.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::types::GenerationConfig;

pub const ENV_ENDPOINT: &str = "MIMIR_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "MIMIR_LLM_API_KEY";
pub const ENV_MODEL: &str = "MIMIR_LLM_MODEL";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("provider timed out")]
    Timeout,
    #[error("provider rate limited the request")]
    RateLimited { retry_after: Option<Duration> },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("provider rejected credentials: {0}")]
    AuthFailure(String),
    #[error("provider transport failure: {0}")]
    Transport(String),
}

impl ProviderError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, ProviderError::RateLimited { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl CompletionRequest {
    /// Request carrying the sampling parameters of `config` unchanged.
    pub fn new(prompt: impl Into<String>, config: &GenerationConfig) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            stop_sequences: Vec::new(),
        }
    }

    pub fn with_stop(mut self, stop: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.stop_sequences = stop.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub provider_name: String,
    pub latency: Duration,
}

#[async_trait]
pub trait CompletionProvider: Send + Sync {
    /// Model or provider identifier recorded in sample metadata.
    fn name(&self) -> &str;

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ProviderError>;
}

#[async_trait]
impl<P: CompletionProvider + ?Sized> CompletionProvider for Arc<P> {
    fn name(&self) -> &str {
        (**self).name()
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        (**self).complete(request).await
    }
}

/// Exponential backoff for rate-limited calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }

    /// Delay before retry number `attempt` (0-based); a provider hint wins.
    pub fn delay(&self, attempt: u32, hint: Option<Duration>) -> Duration {
        if let Some(hint) = hint {
            return hint.min(self.max_delay);
        }
        let factor = 2u32.saturating_pow(attempt);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Runs `call`, retrying only rate-limit errors, at most `max_retries` times.
    pub async fn run<T, F, Fut>(&self, mut call: F) -> Result<T, ProviderError>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Result<T, ProviderError>>,
    {
        let mut attempt = 0;
        loop {
            match call().await {
                Err(ProviderError::RateLimited { retry_after }) if attempt < self.max_retries => {
                    let wait = self.delay(attempt, retry_after);
                    tracing::debug!(attempt, ?wait, "rate limited, backing off");
                    tokio::time::sleep(wait).await;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Body layout sent to the endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadShape {
    /// `{"model", "prompt", "temperature", "max_tokens", "stop"}`
    Completion,
    /// Same keys, with `prompt` wrapped as a single user message.
    Chat,
}

impl PayloadShape {
    /// Chat endpoints are recognised by their `/chat/completions` path.
    pub fn for_endpoint(endpoint: &str) -> Self {
        if endpoint.trim_end_matches('/').ends_with("/chat/completions") {
            PayloadShape::Chat
        } else {
            PayloadShape::Completion
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub shape: PayloadShape,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpProviderConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        let endpoint = endpoint.into();
        Self {
            shape: PayloadShape::for_endpoint(&endpoint),
            endpoint,
            api_key: None,
            model: model.into(),
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads `MIMIR_LLM_ENDPOINT`, `MIMIR_LLM_API_KEY` and `MIMIR_LLM_MODEL`.
    pub fn from_env() -> Result<Self, ProviderError> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| ProviderError::Transport(format!("{ENV_ENDPOINT} is not set")))?;
        let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-4".to_owned());
        let mut config = Self::new(endpoint, model);
        config.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(config)
    }
}

/// Live client for an OpenAI-compatible completion or chat endpoint.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    client: reqwest::Client,
    config: HttpProviderConfig,
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, ProviderError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self { client, config })
    }

    pub fn from_env() -> Result<Self, ProviderError> {
        Self::new(HttpProviderConfig::from_env()?)
    }

    pub fn shape(&self) -> PayloadShape {
        self.config.shape
    }

    /// The exact JSON body sent for `request`.
    pub fn payload(&self, request: &CompletionRequest) -> Value {
        match self.config.shape {
            PayloadShape::Completion => json!({
                "model": self.config.model,
                "prompt": request.prompt,
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
                "stop": request.stop_sequences,
            }),
            PayloadShape::Chat => json!({
                "model": self.config.model,
                "messages": [{"role": "user", "content": request.prompt}],
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
                "stop": request.stop_sequences,
            }),
        }
    }

    async fn send_once(&self, body: &Value) -> Result<String, ProviderError> {
        let mut builder = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(map_reqwest)?;
        let status = response.status();
        if status.as_u16() == 429 {
            let retry_after = response
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|s| s.is_finite() && *s >= 0.0)
                .map(Duration::from_secs_f64);
            return Err(ProviderError::RateLimited { retry_after });
        }
        if status.as_u16() == 401 || status.as_u16() == 403 {
            let text = response.text().await.unwrap_or_default();
            return Err(ProviderError::AuthFailure(format!("{status}: {text}")));
        }
        if status.as_u16() == 408 || status.as_u16() == 504 {
            return Err(ProviderError::Timeout);
        }
        if !status.is_success() {
            let text = response.text().await.unwrap_or_default();
            return Err(ProviderError::Transport(format!("{status}: {text}")));
        }
        let value: Value = response
            .json()
            .await
            .map_err(|e| ProviderError::MalformedResponse(e.to_string()))?;
        extract_text(&value, self.config.shape)
    }
}

fn map_reqwest(err: reqwest::Error) -> ProviderError {
    if err.is_timeout() {
        ProviderError::Timeout
    } else {
        ProviderError::Transport(err.to_string())
    }
}

/// Pulls the generated text out of a response body.
pub fn extract_text(value: &Value, shape: PayloadShape) -> Result<String, ProviderError> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| ProviderError::MalformedResponse("missing choices[0]".into()))?;
    let text = match shape {
        PayloadShape::Chat => choice.pointer("/message/content"),
        PayloadShape::Completion => choice.get("text"),
    };
    text.and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| ProviderError::MalformedResponse("choice carries no text".into()))
}

#[async_trait]
impl CompletionProvider for HttpProvider {
    fn name(&self) -> &str {
        &self.config.model
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        let body = self.payload(request);
        let started = Instant::now();
        let text = self.config.retry.run(|| self.send_once(&body)).await?;
        Ok(CompletionResult {
            text,
            provider_name: self.config.model.clone(),
            latency: started.elapsed(),
        })
    }
}

/// One scripted reply: answered when `matcher` occurs in the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub matcher: String,
    pub text: String,
}

impl<M: Into<String>, T: Into<String>> From<(M, T)> for ScriptEntry {
    fn from((matcher, text): (M, T)) -> Self {
        Self {
            matcher: matcher.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Default)]
struct ScriptState {
    entries: Vec<(ScriptEntry, bool)>,
    requests: Vec<CompletionRequest>,
}

/// Deterministic provider answering from an ordered script.
///
/// Each request consumes the first unused entry whose matcher is a substring
/// of the prompt; an empty matcher matches anything. Consumption is
/// serialized, so concurrent callers observe one total order.
#[derive(Debug, Clone)]
pub struct ScriptedProvider {
    name: String,
    state: Arc<Mutex<ScriptState>>,
}

/// Builds a [`ScriptedProvider`] from `(matcher, text)` pairs.
pub fn script_mock<E: Into<ScriptEntry>>(responses: impl IntoIterator<Item = E>) -> ScriptedProvider {
    ScriptedProvider::new(responses)
}

impl ScriptedProvider {
    pub fn new<E: Into<ScriptEntry>>(responses: impl IntoIterator<Item = E>) -> Self {
        let entries = responses.into_iter().map(|e| (e.into(), false)).collect();
        Self {
            name: "mock".to_owned(),
            state: Arc::new(Mutex::new(ScriptState {
                entries,
                requests: Vec::new(),
            })),
        }
    }

    /// Script that answers every prompt with the next text, in order.
    pub fn sequence<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        Self::new(texts.into_iter().map(|t| ScriptEntry {
            matcher: String::new(),
            text: t.into(),
        }))
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.state.lock().expect("script lock poisoned").requests.clone()
    }

    pub fn call_count(&self) -> usize {
        self.state.lock().expect("script lock poisoned").requests.len()
    }

    pub fn remaining(&self) -> usize {
        let state = self.state.lock().expect("script lock poisoned");
        state.entries.iter().filter(|(_, used)| !used).count()
    }
}

#[async_trait]
impl CompletionProvider for ScriptedProvider {
    fn name(&self) -> &str {
        &self.name
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        let mut state = self.state.lock().expect("script lock poisoned");
        state.requests.push(request.clone());
        let hit = state
            .entries
            .iter_mut()
            .find(|(entry, used)| !*used && request.prompt.contains(&entry.matcher));
        match hit {
            Some((entry, used)) => {
                *used = true;
                Ok(CompletionResult {
                    text: entry.text.clone(),
                    provider_name: self.name.clone(),
                    latency: Duration::ZERO,
                })
            }
            None => Err(ProviderError::MalformedResponse(
                "script has no unconsumed entry matching this prompt".into(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn request(prompt: &str) -> CompletionRequest {
        CompletionRequest::new(prompt, &GenerationConfig::default())
    }

    #[tokio::test]
    async fn scripted_echo() {
        let mock = ScriptedProvider::sequence(["hello"]);
        let result = mock.complete(&request("anything")).await.unwrap();
        assert_eq!(result.text, "hello");
        assert_eq!(result.provider_name, "mock");
    }

    #[tokio::test]
    async fn empty_script_is_malformed() {
        let mock = script_mock(Vec::<ScriptEntry>::new());
        assert!(matches!(
            mock.complete(&request("x")).await,
            Err(ProviderError::MalformedResponse(_))
        ));
    }

    #[tokio::test]
    async fn matcher_hit_and_miss() {
        let mock = script_mock([("main point", "I support early screening.")]);
        assert!(matches!(
            mock.complete(&request("unrelated")).await,
            Err(ProviderError::MalformedResponse(_))
        ));
        let hit = mock.complete(&request("What is your main point?")).await.unwrap();
        assert_eq!(hit.text, "I support early screening.");
        assert_eq!(mock.call_count(), 2);
    }

    #[tokio::test]
    async fn identical_matchers_consume_in_order() {
        let mock = script_mock([("q", "first"), ("q", "second")]);
        assert_eq!(mock.complete(&request("q")).await.unwrap().text, "first");
        assert_eq!(mock.complete(&request("q")).await.unwrap().text, "second");
        assert!(mock.complete(&request("q")).await.is_err());
    }

    #[tokio::test]
    async fn mock_replays_identically() {
        let script = [("a", "1"), ("b", "2"), ("", "3")];
        let prompts = ["xb", "a", "zzz", "b"];
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mock = script_mock(script);
            let mut out = Vec::new();
            for p in prompts {
                out.push(mock.complete(&request(p)).await.map(|r| r.text));
            }
            runs.push(out);
        }
        assert_eq!(runs[0], runs[1]);
        assert_eq!(runs[0][0].as_deref(), Ok("2"));
    }

    #[test]
    fn request_copies_config() {
        let config = GenerationConfig {
            temperature: 0.7,
            max_tokens: 64,
            ..Default::default()
        };
        let req = CompletionRequest::new("p", &config);
        assert_eq!(req.temperature, 0.7);
        assert_eq!(req.max_tokens, 64);
        assert!(req.stop_sequences.is_empty());
    }

    #[test]
    fn payload_shapes() {
        let completion =
            HttpProvider::new(HttpProviderConfig::new("http://h/v1/completions", "m")).unwrap();
        let body = completion.payload(&request("hi"));
        assert_eq!(body["prompt"], "hi");
        assert_eq!(body["temperature"], 0.1);
        assert_eq!(body["max_tokens"], 1000);
        assert_eq!(body["stop"], json!([]));
        assert_eq!(completion.shape(), PayloadShape::Completion);

        let chat =
            HttpProvider::new(HttpProviderConfig::new("http://h/v1/chat/completions", "m")).unwrap();
        let body = chat.payload(&request("hi"));
        assert_eq!(body["messages"][0]["content"], "hi");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(chat.shape(), PayloadShape::Chat);
    }

    #[test]
    fn response_text_extraction() {
        let completion = json!({"choices": [{"text": "out"}]});
        assert_eq!(extract_text(&completion, PayloadShape::Completion).unwrap(), "out");
        let chat = json!({"choices": [{"message": {"role": "assistant", "content": "out"}}]});
        assert_eq!(extract_text(&chat, PayloadShape::Chat).unwrap(), "out");
        assert!(extract_text(&json!({}), PayloadShape::Chat).is_err());
    }

    #[tokio::test]
    async fn retry_surfaces_after_limit() {
        let policy = RetryPolicy {
            max_retries: 3,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        };
        let calls = AtomicU32::new(0);
        let result: Result<(), _> = policy
            .run(|| async {
                calls.fetch_add(1, Ordering::SeqCst);
                Err(ProviderError::RateLimited { retry_after: None })
            })
            .await;
        assert!(matches!(result, Err(ProviderError::RateLimited { .. })));
        assert_eq!(calls.load(Ordering::SeqCst), 4);
    }

    #[tokio::test]
    async fn retry_recovers_and_skips_fatal_errors() {
        let policy = RetryPolicy {
            max_retries: 3,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        };
        let calls = AtomicU32::new(0);
        let result = policy
            .run(|| async {
                let n = calls.fetch_add(1, Ordering::SeqCst);
                if n < 2 {
                    Err(ProviderError::RateLimited { retry_after: Some(Duration::ZERO) })
                } else {
                    Ok(n)
                }
            })
            .await;
        assert_eq!(result, Ok(2));

        let calls = AtomicU32::new(0);
        let result: Result<(), _> = policy
            .run(|| async {
                calls.fetch_add(1, Ordering::SeqCst);
                Err(ProviderError::Timeout)
            })
            .await;
        assert_eq!(result, Err(ProviderError::Timeout));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let policy = RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(policy.delay(0, None), Duration::from_millis(100));
        assert_eq!(policy.delay(1, None), Duration::from_millis(200));
        assert_eq!(policy.delay(2, None), Duration::from_millis(350));
        assert_eq!(policy.delay(0, Some(Duration::from_millis(7))), Duration::from_millis(7));
    }
}
