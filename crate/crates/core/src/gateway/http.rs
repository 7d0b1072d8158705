use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, Completion, SamplingParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub credential_env: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

/// OpenAI-style chat-completions client: the whole prompt goes out as a
/// single user message.
pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpBackend {
    /// Reads the credential from `config.credential_env`; a missing variable
    /// is allowed for endpoints that need no key.
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.credential_env).ok().filter(|k| !k.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Fatal(format!("http client: {e}")))?;
        Ok(HttpBackend { config, api_key, client })
    }

    pub fn request_body(&self, prompt: &str, params: &SamplingParams) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "top_p": params.top_p,
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        })
    }
}

fn error_code(body: &Value) -> String {
    let err = &body["error"];
    [&err["code"], &err["type"]].iter().filter_map(|v| v.as_str()).collect::<Vec<_>>().join(" ")
}

/// Map a response to a completion or a classified error.
pub(crate) fn interpret(status: u16, body: &str) -> Result<Completion, BackendError> {
    let parsed: Value = serde_json::from_str(body).unwrap_or(Value::Null);
    if status == 429 || status >= 500 {
        return Err(BackendError::Transient(format!("HTTP {status}")));
    }
    if !(200..300).contains(&status) {
        let code = error_code(&parsed);
        let message = parsed["error"]["message"].as_str().unwrap_or_default();
        if code.contains("context_length_exceeded") || message.contains("maximum context length") {
            return Err(BackendError::PromptTooLong(message.to_string()));
        }
        if code.contains("content_filter") || code.contains("content_policy") {
            return Err(BackendError::Rejected { payload: body.to_string() });
        }
        return Err(BackendError::Fatal(format!("HTTP {status}: {code}")));
    }
    let choice = &parsed["choices"][0];
    let finish_reason = choice["finish_reason"].as_str().map(str::to_string);
    if finish_reason.as_deref() == Some("content_filter") {
        return Err(BackendError::Rejected { payload: body.to_string() });
    }
    let Some(text) = choice["message"]["content"].as_str() else {
        return Err(BackendError::Fatal("response has no message content".into()));
    };
    Ok(Completion {
        text: text.to_string(),
        finish_reason,
        prompt_tokens: parsed["usage"]["prompt_tokens"].as_u64(),
        completion_tokens: parsed["usage"]["completion_tokens"].as_u64(),
        model: parsed["model"].as_str().map(str::to_string),
    })
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<Completion, BackendError> {
        let mut req = self.client.post(&self.config.endpoint).json(&self.request_body(prompt, params));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            // reqwest errors carry the URL but never headers
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::Transient(e.without_url().to_string())
            } else {
                BackendError::Fatal(e.without_url().to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| BackendError::Transient(e.without_url().to_string()))?;
        interpret(status, &body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serve one canned response and hand back the raw request.
    fn one_shot(status: u16, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut body_buf = vec![0; len];
            reader.read_exact(&mut body_buf).unwrap();
            write!(stream, "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}", body.len())
                .unwrap();
            head + &String::from_utf8(body_buf).unwrap()
        });
        (format!("http://{addr}/v1/chat/completions"), handle)
    }

    fn backend(endpoint: String, env: &str) -> HttpBackend {
        HttpBackend::new(HttpBackendConfig {
            endpoint,
            model: "gpt-4".into(),
            credential_env: env.into(),
            timeout_secs: 10,
        })
        .unwrap()
    }

    #[test]
    fn sends_single_user_message_with_sampling_params() {
        let (url, server) = one_shot(
            200,
            r#"{"model":"gpt-4","choices":[{"message":{"role":"assistant","content":"Human: hi\nAssistant: hello"},"finish_reason":"stop"}],"usage":{"prompt_tokens":5,"completion_tokens":4}}"#,
        );
        std::env::set_var("MMDIALOG_TEST_KEY_A", "sk-secret-value");
        let b = backend(url, "MMDIALOG_TEST_KEY_A");
        assert!(!format!("{b:?}").contains("sk-secret-value"));
        let c = b.complete("PROMPT TEXT", &SamplingParams::default()).unwrap();
        let request = server.join().unwrap();
        assert_eq!(c.text, "Human: hi\nAssistant: hello");
        assert_eq!(c.completion_tokens, Some(4));
        let body: Value = serde_json::from_str(&request[request.find("\r\n\r\n").unwrap() + 4..]).unwrap();
        assert_eq!(body["messages"], json!([{"role": "user", "content": "PROMPT TEXT"}]));
        assert_eq!(body["top_p"], json!(1.0));
        assert_eq!(body["temperature"], json!(1.0));
        assert!(request.to_ascii_lowercase().contains("authorization: bearer sk-secret-value"));
    }

    #[test]
    fn server_errors_are_transient() {
        let (url, server) = one_shot(503, "{}");
        let err = backend(url, "MMDIALOG_UNSET_KEY").complete("p", &SamplingParams::default()).unwrap_err();
        server.join().unwrap();
        assert!(matches!(err, BackendError::Transient(_)));
    }

    #[test]
    fn classification() {
        assert!(matches!(interpret(429, ""), Err(BackendError::Transient(_))));
        assert!(matches!(
            interpret(400, r#"{"error":{"code":"context_length_exceeded","message":"This model's maximum context length is 8192 tokens"}}"#),
            Err(BackendError::PromptTooLong(_))
        ));
        let filtered = r#"{"choices":[{"message":{"content":""},"finish_reason":"content_filter"}]}"#;
        assert_eq!(interpret(200, filtered), Err(BackendError::Rejected { payload: filtered.into() }));
        let c = interpret(200, r#"{"choices":[{"message":{"content":"Human: a"},"finish_reason":"length"}]}"#).unwrap();
        assert_eq!(c.finish_reason.as_deref(), Some("length"));
        assert!(matches!(interpret(401, r#"{"error":{"code":"invalid_api_key"}}"#), Err(BackendError::Fatal(_))));
    }
}
