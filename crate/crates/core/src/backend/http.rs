use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE, RETRY_AFTER};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::debug;

use super::{Backend, BackendError, GenerationRequest, GenerationResult};

/// Environment variable holding the API key for the HTTP backend.
pub const API_KEY_ENV: &str = "LEXCON_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            initial_backoff_ms: 500,
            max_backoff_ms: 30_000,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(retry as i32);
        Duration::from_millis(ms.min(self.max_backoff_ms as f64) as u64)
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub supports_top_k: bool,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            timeout: Duration::from_secs(120),
            supports_top_k: false,
        }
    }
}

/// Counting semaphore bounding concurrent upstream requests.
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Client for an OpenAI-compatible `POST /v1/chat/completions` endpoint.
pub struct HttpBackend {
    client: Client,
    endpoint: String,
    config: HttpConfig,
    slots: Slots,
    id: String,
}

enum Attempt {
    Done(Result<GenerationResult, BackendError>),
    Retry {
        error: BackendError,
        wait: Option<Duration>,
    },
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let base = config.base_url.trim_end_matches('/');
        let endpoint = if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        };
        Ok(Self {
            client,
            id: format!("http:{base}"),
            endpoint,
            slots: Slots {
                free: Mutex::new(config.max_in_flight.max(1)),
                cv: Condvar::new(),
            },
            config,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// JSON body sent upstream. Unset parameters are omitted, and `top_k`
    /// is only sent to servers that accept it.
    pub fn request_body(&self, req: &GenerationRequest) -> Value {
        let mut body = json!({
            "model": req.model_id,
            "messages": req.messages,
            "max_tokens": req.params.max_tokens,
        });
        let obj = body.as_object_mut().unwrap();
        if let Some(t) = req.params.temperature {
            obj.insert("temperature".into(), json!(t));
        }
        if let Some(p) = req.params.top_p {
            obj.insert("top_p".into(), json!(p));
        }
        if let (Some(k), true) = (req.params.top_k, self.config.supports_top_k) {
            obj.insert("top_k".into(), json!(k));
        }
        if let Some(s) = req.params.seed {
            obj.insert("seed".into(), json!(s));
        }
        body
    }

    fn attempt(&self, body: &[u8], attempts: u32) -> Attempt {
        let _slot = self.slots.acquire();
        let started = Instant::now();
        let mut builder = self
            .client
            .post(&self.endpoint)
            .header(CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.config.api_key {
            builder = builder.header(AUTHORIZATION, format!("Bearer {key}"));
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    error: BackendError::Transport {
                        attempts,
                        message: e.to_string(),
                    },
                    wait: None,
                }
            }
        };
        let status = response.status().as_u16();
        let retry_after = response
            .headers()
            .get(RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(Duration::from_secs);
        let text = match response.text() {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry {
                    error: BackendError::Transport {
                        attempts,
                        message: e.to_string(),
                    },
                    wait: None,
                }
            }
        };
        let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        match status {
            200..=299 => Attempt::Done(parse_completion(&text, latency_ms, &self.id)),
            401 | 403 => Attempt::Done(Err(BackendError::Auth { status, body: text })),
            429 => Attempt::Retry {
                error: BackendError::RateLimited { attempts, body: text },
                wait: retry_after,
            },
            500..=599 => Attempt::Retry {
                error: BackendError::Upstream {
                    status,
                    attempts,
                    body: text,
                },
                wait: retry_after,
            },
            _ => Attempt::Done(Err(BackendError::Upstream {
                status,
                attempts,
                body: text,
            })),
        }
    }
}

fn parse_completion(body: &str, latency_ms: f64, backend_id: &str) -> Result<GenerationResult, BackendError> {
    let malformed = |reason: &str| BackendError::Malformed {
        reason: reason.to_string(),
        body: body.to_string(),
    };
    let value: Value = serde_json::from_str(body).map_err(|_| malformed("body is not JSON"))?;
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing choices[0].message.content"))?;
    let count = |ptr: &str| value.pointer(ptr).and_then(Value::as_u64).map(|n| n as u32);
    Ok(GenerationResult {
        text: text.to_string(),
        latency_ms,
        prompt_tokens: count("/usage/prompt_tokens"),
        completion_tokens: count("/usage/completion_tokens"),
        backend_id: backend_id.to_string(),
        cached: false,
    })
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let body = serde_json::to_vec(&self.request_body(req)).expect("request serializes");
        let policy = &self.config.retry;
        let mut retry = 0u32;
        loop {
            match self.attempt(&body, retry + 1) {
                Attempt::Done(result) => return result,
                Attempt::Retry { error, wait } => {
                    if retry >= policy.max_retries {
                        return Err(error);
                    }
                    let backoff = policy.backoff(retry);
                    let wait = wait
                        .map(|w| w.max(backoff).min(Duration::from_millis(policy.max_backoff_ms)))
                        .unwrap_or(backoff);
                    debug!(error = %error, ?wait, "retrying chat completion");
                    thread::sleep(wait);
                    retry += 1;
                }
            }
        }
    }

    fn supports_top_k(&self) -> bool {
        self.config.supports_top_k
    }
}
