//! Chat-completions backend speaking JSON over HTTP.
//!
//! The wire format is the widely used chat shape: the request carries
//! `{model, messages, temperature, top_p, max_tokens, n, seed?}` and the
//! response supplies `choices[].message.content` plus
//! `usage.completion_tokens`. Transient failures (transport errors,
//! HTTP 408/429/5xx) are retried per the configured policy; protocol
//! errors surface immediately.

use pasr_core::backend::{
    BackendCaps, BackendError, BackendIdentity, Generation, GenerationBackend, PromptInputs,
    RetryPolicy, SamplingParams,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    /// Sent as a bearer token when present.
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_max_concurrency() -> usize {
    8
}

impl HttpBackendConfig {
    pub fn new(endpoint: &str, model: &str) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: None,
            timeout_ms: default_timeout_ms(),
            max_concurrency: default_max_concurrency(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
    n: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    #[serde(default)]
    completion_tokens: Option<u32>,
}

pub struct HttpChatBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|err| BackendError::Transport(err.to_string()))?;
        Ok(Self { config, client })
    }

    fn attempt(
        &self,
        prompt: &PromptInputs,
        params: &SamplingParams,
    ) -> Result<Generation, BackendError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &prompt.system,
                },
                ChatMessage {
                    role: "user",
                    content: &prompt.user,
                },
            ],
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_tokens,
            n: 1,
            seed: params.seed,
        };
        let mut request = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.config.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|err| BackendError::Transport(err.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status });
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|err| BackendError::MalformedResponse(err.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::MalformedResponse("response has no choices".to_string()))?;
        let text = choice.message.content.ok_or_else(|| {
            BackendError::MalformedResponse("choice carries no message content".to_string())
        })?;
        log::debug!(
            "chat completion from {}: {} bytes",
            self.config.endpoint,
            text.len()
        );
        Ok(Generation {
            text,
            completion_tokens: parsed.usage.and_then(|u| u.completion_tokens),
            logprob: None,
        })
    }
}

impl GenerationBackend for HttpChatBackend {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            name: "http".to_string(),
            model: self.config.model.clone(),
        }
    }

    fn capabilities(&self) -> BackendCaps {
        BackendCaps {
            max_concurrency: self.config.max_concurrency,
            supports_logprobs: false,
        }
    }

    fn generate(
        &self,
        prompt: &PromptInputs,
        params: &SamplingParams,
    ) -> Result<Generation, BackendError> {
        self.config.retry.run(|| self.attempt(prompt, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    struct CapturedRequest {
        head: String,
        body: serde_json::Value,
    }

    /// Serve `responses` in order on a fresh local port, capturing each
    /// request. Returns the endpoint URL and the capture log.
    fn mock_server(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<CapturedRequest>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let endpoint = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let captured = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&captured);
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = match listener.accept() {
                    Ok(pair) => pair,
                    Err(_) => return,
                };
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let (head, body_start) = loop {
                    let n = stream.read(&mut chunk).expect("read request");
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        break (String::from_utf8_lossy(&buf[..pos]).to_string(), pos + 4);
                    }
                };
                let content_length: usize = head
                    .lines()
                    .find_map(|line| {
                        let (name, value) = line.split_once(':')?;
                        name.eq_ignore_ascii_case("content-length")
                            .then(|| value.trim().parse().ok())?
                    })
                    .unwrap_or(0);
                while buf.len() < body_start + content_length {
                    let n = stream.read(&mut chunk).expect("read body");
                    buf.extend_from_slice(&chunk[..n]);
                }
                let body_json: serde_json::Value =
                    serde_json::from_slice(&buf[body_start..body_start + content_length])
                        .unwrap_or(serde_json::Value::Null);
                log.lock().unwrap().push(CapturedRequest {
                    head,
                    body: body_json,
                });
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).expect("write response");
            }
        });
        (endpoint, captured)
    }

    fn success_body(content: &str, completion_tokens: u32) -> String {
        serde_json::json!({
            "id": "cmpl-1",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": 7, "completion_tokens": completion_tokens, "total_tokens": 7 + completion_tokens}
        })
        .to_string()
    }

    fn backend_for(endpoint: &str) -> HttpChatBackend {
        let mut config = HttpBackendConfig::new(endpoint, "test-model");
        config.retry = RetryPolicy::immediate(2);
        HttpChatBackend::new(config).unwrap()
    }

    fn prompt() -> PromptInputs {
        PromptInputs {
            system: "system rules".to_string(),
            user: "what is 2 + 2?".to_string(),
        }
    }

    #[test]
    fn sends_the_expected_wire_format_and_parses_the_reply() {
        let (endpoint, captured) =
            mock_server(vec![(200, success_body("<think>4</think><answer>4</answer>", 9))]);
        let backend = backend_for(&endpoint);
        let params = SamplingParams::default().with_seed(31);
        let generation = backend.generate(&prompt(), &params).unwrap();
        assert_eq!(generation.text, "<think>4</think><answer>4</answer>");
        assert_eq!(generation.completion_tokens, Some(9));
        assert_eq!(generation.logprob, None);

        let captured = captured.lock().unwrap();
        assert_eq!(captured.len(), 1);
        let body = &captured[0].body;
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][0]["content"], "system rules");
        assert_eq!(body["messages"][1]["role"], "user");
        assert_eq!(body["messages"][1]["content"], "what is 2 + 2?");
        assert_eq!(body["temperature"], 1.0);
        assert_eq!(body["top_p"], 1.0);
        assert_eq!(body["max_tokens"], 1024);
        assert_eq!(body["n"], 1);
        assert_eq!(body["seed"], 31);
    }

    #[test]
    fn omits_the_seed_field_when_unseeded() {
        let (endpoint, captured) = mock_server(vec![(200, success_body("ok", 1))]);
        let backend = backend_for(&endpoint);
        backend.generate(&prompt(), &SamplingParams::default()).unwrap();
        let captured = captured.lock().unwrap();
        assert!(captured[0].body.get("seed").is_none());
    }

    #[test]
    fn retries_transient_server_errors() {
        let (endpoint, captured) = mock_server(vec![
            (500, "{\"error\": \"overloaded\"}".to_string()),
            (200, success_body("recovered", 2)),
        ]);
        let backend = backend_for(&endpoint);
        let generation = backend.generate(&prompt(), &SamplingParams::default()).unwrap();
        assert_eq!(generation.text, "recovered");
        assert_eq!(captured.lock().unwrap().len(), 2);
    }

    #[test]
    fn does_not_retry_protocol_errors() {
        let (endpoint, captured) = mock_server(vec![(404, "{}".to_string())]);
        let backend = backend_for(&endpoint);
        let err = backend.generate(&prompt(), &SamplingParams::default());
        assert!(matches!(err, Err(BackendError::Status { status: 404 })));
        assert_eq!(captured.lock().unwrap().len(), 1);
    }

    #[test]
    fn exhausted_retries_carry_the_final_status() {
        let (endpoint, captured) = mock_server(vec![
            (503, "{}".to_string()),
            (503, "{}".to_string()),
        ]);
        let backend = backend_for(&endpoint);
        let err = backend.generate(&prompt(), &SamplingParams::default());
        match err {
            Err(BackendError::RetriesExhausted { attempts, source }) => {
                assert_eq!(attempts, 2);
                assert!(matches!(*source, BackendError::Status { status: 503 }));
            }
            other => panic!("expected retries-exhausted, got {other:?}"),
        }
        assert_eq!(captured.lock().unwrap().len(), 2);
    }

    #[test]
    fn rejects_bodies_without_choices() {
        let (endpoint, _) = mock_server(vec![(200, "{\"choices\": []}".to_string())]);
        let backend = backend_for(&endpoint);
        let err = backend.generate(&prompt(), &SamplingParams::default());
        assert!(matches!(err, Err(BackendError::MalformedResponse(_))));
    }

    #[test]
    fn rejects_unparseable_bodies() {
        let (endpoint, _) = mock_server(vec![(200, "not json".to_string())]);
        let backend = backend_for(&endpoint);
        let err = backend.generate(&prompt(), &SamplingParams::default());
        assert!(matches!(err, Err(BackendError::MalformedResponse(_))));
    }

    #[test]
    fn sends_a_bearer_token_when_configured() {
        let (endpoint, captured) = mock_server(vec![(200, success_body("ok", 1))]);
        let mut config = HttpBackendConfig::new(&endpoint, "m");
        config.api_key = Some("sk-secret".to_string());
        config.retry = RetryPolicy::immediate(1);
        let backend = HttpChatBackend::new(config).unwrap();
        backend.generate(&prompt(), &SamplingParams::default()).unwrap();
        let captured = captured.lock().unwrap();
        assert!(
            captured[0].head.lines().any(|line| {
                line.to_ascii_lowercase().starts_with("authorization:")
                    && line.contains("Bearer sk-secret")
            }),
            "missing bearer header in {:?}",
            captured[0].head
        );
    }
}
