use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{check_uniform_dim, Backend, EmbeddingVector, GatewayError, GenParams};

/// Client for Ollama-compatible `/api/chat` and `/api/embed` endpoints.
///
/// Transport failures and 5xx responses are retried with exponential backoff,
/// up to `retries` extra attempts. 4xx responses are never retried.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    api_key: Option<String>,
    backoff: Duration,
    embed_timeout: Duration,
    embed_retries: u32,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    stream: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    options: Option<Map<String, Value>>,
}

#[derive(Deserialize)]
struct ChatResponse {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

enum Failure {
    Retryable(GatewayError),
    Fatal(GatewayError),
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key: None,
            backoff: Duration::from_millis(500),
            embed_timeout: Duration::from_secs(120),
            embed_retries: 2,
            agent,
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    /// Delay before the first retry; doubled for each further retry.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_embed_policy(mut self, timeout: Duration, retries: u32) -> Self {
        self.embed_timeout = timeout;
        self.embed_retries = retries;
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// Request body for `/api/chat`. `options` is omitted when no sampling
    /// option is set.
    pub fn chat_body(params: &GenParams, prompt: &str) -> Value {
        let mut options = Map::new();
        if let Some(t) = params.temperature {
            options.insert("temperature".into(), Value::from(t));
        }
        if let Some(n) = params.max_tokens {
            options.insert("num_predict".into(), Value::from(n));
        }
        let req = ChatRequest {
            model: &params.model,
            messages: [ChatMessage { role: "user", content: prompt }],
            stream: false,
            options: (!options.is_empty()).then_some(options),
        };
        serde_json::to_value(req).expect("chat request serializes")
    }

    pub fn embed_body(model: &str, texts: &[String]) -> Value {
        serde_json::to_value(EmbedRequest { model, input: texts }).expect("embed request serializes")
    }

    fn post(
        &self,
        path: &str,
        body: &Value,
        model: &str,
        timeout: Duration,
        retries: u32,
    ) -> Result<Value, GatewayError> {
        let url = format!("{}{path}", self.base_url);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.post_once(&url, body, model, timeout, attempt) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(e)) if attempt > retries => return Err(e),
                Err(Failure::Retryable(e)) => {
                    log::warn!("{url}: attempt {attempt} failed: {e}");
                    thread::sleep(self.backoff.saturating_mul(1 << (attempt - 1).min(16)));
                }
            }
        }
    }

    fn post_once(
        &self,
        url: &str,
        body: &Value,
        model: &str,
        timeout: Duration,
        attempts: u32,
    ) -> Result<Value, Failure> {
        let mut req = self.agent.post(url).config().timeout_global(Some(timeout)).build();
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => {
                return Err(Failure::Retryable(GatewayError::Timeout { model: model.to_owned(), attempts }))
            }
            Err(e) => return Err(Failure::Retryable(GatewayError::Transport { attempts, message: e.to_string() })),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => {
                return Err(Failure::Retryable(GatewayError::Timeout { model: model.to_owned(), attempts }))
            }
            Err(e) => return Err(Failure::Retryable(GatewayError::Transport { attempts, message: e.to_string() })),
        };
        if !(200..300).contains(&status) {
            let message = serde_json::from_str::<Value>(&text)
                .ok()
                .and_then(|v| v.get("error").and_then(Value::as_str).map(str::to_owned))
                .unwrap_or(text);
            let err = GatewayError::Backend { model: model.to_owned(), status: Some(status), message };
            return Err(if status >= 500 { Failure::Retryable(err) } else { Failure::Fatal(err) });
        }
        serde_json::from_str(&text).map_err(|e| {
            Failure::Fatal(GatewayError::Backend {
                model: model.to_owned(),
                status: Some(status),
                message: format!("malformed response: {e}"),
            })
        })
    }
}

fn backend_payload_error(model: &str, v: &Value) -> Option<GatewayError> {
    v.get("error").and_then(Value::as_str).map(|m| GatewayError::Backend {
        model: model.to_owned(),
        status: None,
        message: m.to_owned(),
    })
}

impl Backend for HttpBackend {
    fn generate(&self, params: &GenParams, prompt: &str) -> Result<String, GatewayError> {
        let body = Self::chat_body(params, prompt);
        let v = self.post("/api/chat", &body, &params.model, params.request_timeout(), params.retries)?;
        if let Some(e) = backend_payload_error(&params.model, &v) {
            return Err(e);
        }
        let resp: ChatResponse = serde_json::from_value(v).map_err(|e| GatewayError::Backend {
            model: params.model.clone(),
            status: None,
            message: format!("response lacks message.content: {e}"),
        })?;
        Ok(resp.message.content)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        let body = Self::embed_body(model, texts);
        let v = self.post("/api/embed", &body, model, self.embed_timeout, self.embed_retries)?;
        if let Some(e) = backend_payload_error(model, &v) {
            return Err(e);
        }
        let resp: EmbedResponse = serde_json::from_value(v).map_err(|e| GatewayError::Backend {
            model: model.to_owned(),
            status: None,
            message: format!("response lacks embeddings: {e}"),
        })?;
        let vectors = resp.embeddings.into_iter().map(EmbeddingVector::new).collect::<Result<Vec<_>, _>>()?;
        check_uniform_dim(&vectors)?;
        Ok(vectors)
    }
}
