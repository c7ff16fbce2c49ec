use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{LlmError, Responder};

/// Where and how to reach a chat-completion endpoint. The auth token is
/// read from the environment variable named by `auth_env` at call time and
/// never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatEndpointConfig {
    pub base_url: String,
    pub path: String,
    pub model: String,
    /// s
    pub timeout: f64,
    pub max_retries: usize,
    /// ms between attempts
    pub retry_backoff: u64,
    pub auth_env: Option<String>,
    pub temperature: f64,
}

impl Default for ChatEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            path: "/v1/chat/completions".into(),
            model: "cps-llm".into(),
            timeout: 60.0,
            max_retries: 2,
            retry_backoff: 250,
            auth_env: None,
            temperature: 0.0,
        }
    }
}

impl ChatEndpointConfig {
    pub fn with_url(url: &str) -> Self {
        Self {
            base_url: url.trim_end_matches('/').to_string(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.timeout.is_finite() && self.timeout > 0.0) {
            return Err(LlmError::InvalidConfig(format!(
                "timeout must be > 0 (got {})",
                self.timeout
            )));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(LlmError::InvalidConfig(format!(
                "unsupported endpoint URL `{}`",
                self.base_url
            )));
        }
        Ok(())
    }

    pub fn url(&self) -> String {
        format!("{}{}", self.base_url.trim_end_matches('/'), self.path)
    }
}

/// Blocking chat-completion client with per-call timeout and bounded retries.
pub struct ChatClient {
    config: ChatEndpointConfig,
    agent: ureq::Agent,
}

impl ChatClient {
    pub fn new(config: ChatEndpointConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent })
    }

    pub fn config(&self) -> &ChatEndpointConfig {
        &self.config
    }

    fn token(&self) -> Result<Option<String>, LlmError> {
        match &self.config.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| LlmError::InvalidConfig(format!("auth variable `{var}` is not set"))),
        }
    }

    fn attempt(&self, body: &Value, token: Option<&str>) -> Result<String, LlmError> {
        let mut req = self.agent.post(&self.config.url());
        if let Some(t) = token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(body).map_err(classify)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(classify)?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Status {
                status,
                body: text.chars().take(500).collect(),
            });
        }
        extract_content(&text)
    }
}

fn classify(e: ureq::Error) -> LlmError {
    match e {
        ureq::Error::Timeout(_) => LlmError::Timeout { attempts: 1 },
        ureq::Error::Io(io)
            if matches!(
                io.kind(),
                std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock
            ) =>
        {
            LlmError::Timeout { attempts: 1 }
        }
        ureq::Error::Json(j) => LlmError::Malformed(j.to_string()),
        other => LlmError::Transport(other.to_string()),
    }
}

fn retryable(e: &LlmError) -> bool {
    match e {
        LlmError::Timeout { .. } | LlmError::Transport(_) => true,
        LlmError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

/// Message text from an OpenAI-style completion payload.
fn extract_content(text: &str) -> Result<String, LlmError> {
    let v: Value = serde_json::from_str(text).map_err(|e| LlmError::Malformed(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| LlmError::Malformed("no `choices[0]` in payload".into()))?;
    choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| LlmError::Malformed("choice has no message content".into()))
}

impl Responder for ChatClient {
    fn name(&self) -> String {
        format!("{} @ {}", self.config.model, self.config.base_url)
    }

    fn respond(&self, prompt: &str) -> Result<String, LlmError> {
        let token = self.token()?;
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        });
        let attempts = self.config.max_retries + 1;
        let mut last = None;
        for i in 0..attempts {
            if i > 0 && self.config.retry_backoff > 0 {
                std::thread::sleep(Duration::from_millis(self.config.retry_backoff * i as u64));
            }
            match self.attempt(&body, token.as_deref()) {
                Ok(text) => return Ok(text),
                Err(e) if retryable(&e) => {
                    log::warn!("chat request attempt {} of {attempts} failed: {e}", i + 1);
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(match last.expect("at least one attempt") {
            LlmError::Timeout { .. } => LlmError::Timeout { attempts },
            e => e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serve canned responses, one per connection, returning the port and a hit counter.
    fn serve(responses: Vec<(u16, String, u64)>) -> (u16, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for (status, body, delay_ms) in responses {
                let Ok((stream, _)) = listener.accept() else {
                    return;
                };
                counter.fetch_add(1, Ordering::SeqCst);
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut len = 0usize;
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                            break;
                        }
                        let lower = line.to_ascii_lowercase();
                        if let Some(v) = lower.strip_prefix("content-length:") {
                            len = v.trim().parse().unwrap_or(0);
                        }
                    }
                    let mut buf = vec![0; len];
                    let _ = reader.read_exact(&mut buf);
                    std::thread::sleep(Duration::from_millis(delay_ms));
                    let mut stream = stream;
                    let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                });
            }
        });
        (port, hits)
    }

    fn config(port: u16, retries: usize, timeout: f64) -> ChatEndpointConfig {
        ChatEndpointConfig {
            max_retries: retries,
            retry_backoff: 0,
            timeout,
            ..ChatEndpointConfig::with_url(&format!("http://127.0.0.1:{port}"))
        }
    }

    fn ok_body(text: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
    }

    #[test]
    fn successful_completion() {
        let (port, hits) = serve(vec![(200, ok_body("Your timeseries is 1.0, 0.9995"), 0)]);
        let client = ChatClient::new(config(port, 0, 5.0)).unwrap();
        assert_eq!(
            client.respond("hi").unwrap(),
            "Your timeseries is 1.0, 0.9995"
        );
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn server_errors_are_retried() {
        let (port, hits) = serve(vec![
            (503, "busy".into(), 0),
            (500, "oops".into(), 0),
            (200, ok_body("0.015"), 0),
        ]);
        let client = ChatClient::new(config(port, 2, 5.0)).unwrap();
        assert_eq!(client.respond("q").unwrap(), "0.015");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (port, hits) = serve(vec![(404, "missing".into(), 0), (200, ok_body("x"), 0)]);
        let client = ChatClient::new(config(port, 3, 5.0)).unwrap();
        assert!(matches!(
            client.respond("q"),
            Err(LlmError::Status { status: 404, .. })
        ));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn malformed_payload() {
        let (port, _) = serve(vec![(200, "{\"unexpected\": true}".into(), 0)]);
        let client = ChatClient::new(config(port, 0, 5.0)).unwrap();
        assert!(matches!(client.respond("q"), Err(LlmError::Malformed(_))));
        let (port, _) = serve(vec![(200, "not json".into(), 0)]);
        let client = ChatClient::new(config(port, 0, 5.0)).unwrap();
        assert!(matches!(client.respond("q"), Err(LlmError::Malformed(_))));
    }

    #[test]
    fn timeout_after_retries() {
        let (port, hits) = serve(vec![
            (200, ok_body("late"), 1500),
            (200, ok_body("late"), 1500),
        ]);
        let client = ChatClient::new(config(port, 1, 0.3)).unwrap();
        assert_eq!(client.respond("q"), Err(LlmError::Timeout { attempts: 2 }));
        assert_eq!(hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn refused_connection_is_transport() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let client = ChatClient::new(config(port, 0, 2.0)).unwrap();
        assert!(matches!(client.respond("q"), Err(LlmError::Transport(_))));
    }

    #[test]
    fn config_checks() {
        assert!(ChatClient::new(ChatEndpointConfig {
            timeout: 0.0,
            ..Default::default()
        })
        .is_err());
        assert!(ChatClient::new(ChatEndpointConfig::with_url("ftp://x")).is_err());
        let cfg = ChatEndpointConfig {
            auth_env: Some("AIDPLAN_TEST_UNSET_TOKEN_VAR".into()),
            ..Default::default()
        };
        let client = ChatClient::new(cfg).unwrap();
        assert!(matches!(
            client.respond("q"),
            Err(LlmError::InvalidConfig(_))
        ));
    }
}
