//! Text generation backends.
//!
//! Mock kinds, selected by spec string:
//!
//! | spec               | output                                              |
//! |--------------------|-----------------------------------------------------|
//! | `fixed:<text>`     | `<text>`                                            |
//! | `echo-nn`          | the prompt's nearest-neighbour reference report     |
//! | `echo-prompt-hash` | hex SHA-256 of the prompt text (see [`Prompt::text_hash`]) |
//!
//! `http` and `http:<base-url>` select [`HttpBackend`], which posts to
//! `{base_url}/chat/completions`. The base URL, key and model fall back to
//! `GEN_BASE_URL`, `GEN_API_KEY` and `GEN_MODEL`.
//!
//! Chat APIs carry text only, so the HTTP backend drops token payloads and
//! logs a warning the first time it does.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::context::Prompt;
use crate::error::{Error, Result};

pub const DEFAULT_BUDGET: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: Prompt,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Overrides the backend's configured model when non-empty.
    pub model: String,
    pub timeout: Duration,
    pub retries: u32,
}

/// Transport knobs shared by every request of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequestSettings {
    pub max_tokens: u32,
    pub temperature: f64,
    pub model: String,
    pub timeout_secs: f64,
    pub retries: u32,
}

impl Default for RequestSettings {
    fn default() -> Self {
        Self {
            max_tokens: 512,
            temperature: 0.0,
            model: String::new(),
            timeout_secs: 120.0,
            retries: 3,
        }
    }
}

impl RequestSettings {
    pub fn request(&self, prompt: Prompt) -> GenerationRequest {
        GenerationRequest {
            prompt,
            max_tokens: self.max_tokens,
            temperature: self.temperature,
            model: self.model.clone(),
            timeout: Duration::from_secs_f64(self.timeout_secs.max(0.0)),
            retries: self.retries,
        }
    }
}

impl GenerationRequest {
    pub fn new(prompt: Prompt) -> Self {
        RequestSettings::default().request(prompt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::InvalidArgument("max_tokens must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedReport {
    pub text: String,
    pub backend_id: String,
    pub latency: Duration,
    pub token_count: usize,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> String;

    fn generate(&self, req: &GenerationRequest) -> Result<GeneratedReport>;

    /// Whether the backend consumes `image_payload` token sets.
    fn accepts_token_payload(&self) -> bool {
        false
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GeneratedReport> {
        (**self).generate(req)
    }

    fn accepts_token_payload(&self) -> bool {
        (**self).accepts_token_payload()
    }
}

/// Validates `req` and runs it on `backend`.
pub fn generate(req: &GenerationRequest, backend: &dyn Backend) -> Result<GeneratedReport> {
    req.validate()?;
    backend.generate(req)
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockBackend {
    Fixed(String),
    EchoNn,
    EchoPromptHash,
}

impl MockBackend {
    fn output(&self, prompt: &Prompt) -> Result<String> {
        match self {
            MockBackend::Fixed(text) => Ok(text.clone()),
            MockBackend::EchoNn => prompt.reference.clone().ok_or(Error::NoNnContext),
            MockBackend::EchoPromptHash => Ok(prompt.text_hash()),
        }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        match self {
            MockBackend::Fixed(text) => format!("mock:fixed:{text}"),
            MockBackend::EchoNn => "mock:echo-nn".into(),
            MockBackend::EchoPromptHash => "mock:echo-prompt-hash".into(),
        }
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GeneratedReport> {
        let text = self.output(&req.prompt)?;
        Ok(GeneratedReport {
            token_count: word_count(&text),
            text,
            backend_id: self.id(),
            latency: Duration::ZERO,
        })
    }

    fn accepts_token_payload(&self) -> bool {
        true
    }
}

pub fn mock_backend(kind: &str) -> Result<MockBackend> {
    match kind {
        "echo-nn" => Ok(MockBackend::EchoNn),
        "echo-prompt-hash" => Ok(MockBackend::EchoPromptHash),
        _ => match kind.strip_prefix("fixed:") {
            Some(text) => Ok(MockBackend::Fixed(text.to_string())),
            None => Err(Error::UnknownKind(kind.to_string())),
        },
    }
}

/// Wraps a backend and counts `generate` calls.
pub struct Counted<B> {
    inner: B,
    calls: AtomicUsize,
}

impl<B: Backend> Counted<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: Backend> Backend for Counted<B> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GeneratedReport> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(req)
    }

    fn accepts_token_payload(&self) -> bool {
        self.inner.accepts_token_payload()
    }
}

/// OpenAI-compatible chat completion wire types.
pub mod wire {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Message {
        pub role: String,
        pub content: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ChatRequest {
        pub model: String,
        pub messages: Vec<Message>,
        pub temperature: f64,
        pub max_tokens: u32,
    }

    #[derive(Debug, Clone, Deserialize)]
    pub struct ChatResponse {
        pub choices: Vec<Choice>,
        #[serde(default)]
        pub usage: Option<Usage>,
    }

    #[derive(Debug, Clone, Deserialize)]
    pub struct Choice {
        pub message: ResponseMessage,
    }

    #[derive(Debug, Clone, Deserialize)]
    pub struct ResponseMessage {
        #[serde(default)]
        pub content: Option<String>,
    }

    #[derive(Debug, Clone, Deserialize)]
    pub struct Usage {
        #[serde(default)]
        pub completion_tokens: Option<usize>,
    }
}

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
    /// Relative jitter; 0.2 draws each delay from ±20% of its nominal value.
    pub jitter: f64,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base: Duration::from_millis(500),
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl Backoff {
    pub fn delay(&self, retry: u32, rng: &mut impl Rng) -> Duration {
        let nominal = self.base.as_secs_f64() * self.factor.powi(retry as i32);
        let scale = if self.jitter > 0.0 {
            rng.random_range(1.0 - self.jitter..=1.0 + self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64((nominal * scale).max(0.0))
    }
}

pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    model: String,
    backoff: Backoff,
    warned_payload: AtomicBool,
    client: Mutex<Option<(Duration, reqwest::blocking::Client)>>,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            model: model.into(),
            backoff: Backoff::default(),
            warned_payload: AtomicBool::new(false),
            client: Mutex::new(None),
        }
    }

    /// Reads `GEN_BASE_URL` (unless `base_url` is given), `GEN_API_KEY` and
    /// `GEN_MODEL`.
    pub fn from_env(base_url: Option<&str>) -> Result<Self> {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let base_url = match base_url {
            Some(url) => url.to_string(),
            None => var("GEN_BASE_URL")
                .ok_or_else(|| Error::InvalidArgument("GEN_BASE_URL is not set".into()))?,
        };
        let model = var("GEN_MODEL").unwrap_or_default();
        Ok(Self::new(base_url, var("GEN_API_KEY"), model))
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }

    pub fn chat_request(&self, req: &GenerationRequest) -> wire::ChatRequest {
        let mut messages = Vec::with_capacity(2);
        if !req.prompt.system_text.is_empty() {
            messages.push(wire::Message {
                role: "system".into(),
                content: req.prompt.system_text.clone(),
            });
        }
        messages.push(wire::Message {
            role: "user".into(),
            content: req.prompt.user_text.clone(),
        });
        wire::ChatRequest {
            model: if req.model.is_empty() {
                self.model.clone()
            } else {
                req.model.clone()
            },
            messages,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        }
    }

    fn client(&self, timeout: Duration) -> Result<reqwest::blocking::Client> {
        let mut slot = self.client.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((t, client)) = slot.as_ref() {
            if *t == timeout {
                return Ok(client.clone());
            }
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        *slot = Some((timeout, client.clone()));
        Ok(client)
    }

    fn attempt(&self, client: &reqwest::blocking::Client, body: &wire::ChatRequest) -> Result<(String, Option<usize>)> {
        let mut builder = client.post(self.endpoint()).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(transport_error)?;
        let status = response.status();
        let text = response.text().map_err(transport_error)?;
        if !status.is_success() {
            return Err(Error::HttpStatus {
                code: status.as_u16(),
                body: text,
            });
        }
        let parsed: wire::ChatResponse = serde_json::from_str(&text)
            .map_err(|e| Error::MalformedResponse(format!("{e}: {text}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| Error::MalformedResponse("no choices".into()))?;
        let content = choice
            .message
            .content
            .ok_or_else(|| Error::MalformedResponse("choice has no content".into()))?;
        Ok((content, parsed.usage.and_then(|u| u.completion_tokens)))
    }
}

fn transport_error(e: reqwest::Error) -> Error {
    if e.is_timeout() {
        Error::Timeout
    } else {
        Error::Transport(e.to_string())
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}#{}", self.base_url, self.model)
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GeneratedReport> {
        if !req.prompt.image_payload.is_empty() && !self.warned_payload.swap(true, Ordering::Relaxed) {
            warn!("http backend is text-only; token payloads are not sent");
        }
        let body = self.chat_request(req);
        let client = self.client(req.timeout)?;
        let start = Instant::now();
        let mut rng = rand::rng();
        let mut attempt = 0;
        loop {
            match self.attempt(&client, &body) {
                Ok((text, tokens)) => {
                    if text.is_empty() {
                        warn!("backend {} returned an empty completion", self.id());
                    }
                    return Ok(GeneratedReport {
                        token_count: tokens.unwrap_or_else(|| word_count(&text)),
                        text,
                        backend_id: self.id(),
                        latency: start.elapsed(),
                    });
                }
                Err(e) if e.is_transient() && attempt < req.retries => {
                    let delay = self.backoff.delay(attempt, &mut rng);
                    warn!("attempt {} failed ({e}); retrying in {delay:?}", attempt + 1);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) if e.is_transient() && req.retries > 0 => {
                    return Err(Error::ExhaustedRetries {
                        attempts: attempt + 1,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Builds a backend from a spec string: a mock kind, `http` or
/// `http:<base-url>`.
pub fn backend_from_spec(spec: &str) -> Result<Arc<dyn Backend>> {
    if spec == "http" {
        return Ok(Arc::new(HttpBackend::from_env(None)?));
    }
    if let Some(url) = spec.strip_prefix("http:") {
        let url = if url.starts_with("//") { format!("http:{url}") } else { url.to_string() };
        return Ok(Arc::new(HttpBackend::from_env(Some(&url))?));
    }
    if spec.starts_with("https://") {
        return Ok(Arc::new(HttpBackend::from_env(Some(spec))?));
    }
    Ok(Arc::new(mock_backend(spec)?))
}

/// Applies `f` to every item with at most `budget` calls in flight.
/// Results come back in input order.
pub fn run_bounded<T, R, F>(items: &[T], budget: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = budget.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut indexed: Vec<(usize, R)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= items.len() {
                            break out;
                        }
                        out.push((i, f(&items[i])));
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    indexed.sort_unstable_by_key(|(i, _)| *i);
    indexed.into_iter().map(|(_, r)| r).collect()
}
