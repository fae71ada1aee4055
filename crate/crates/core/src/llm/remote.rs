use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::json;

use super::{LlmProvider, LlmRequest};
use crate::error::{Error, Result};
use crate::http::{HttpConfig, JsonClient};

/// OpenAI-compatible chat-completions client.
///
/// Request: `{"model", "messages": [{"role": "user", "content": prompt}],
/// "temperature", "top_p", "max_tokens"}` to `POST {base_url}/chat/completions`.
/// The reply text is `choices[0].message.content`.
pub struct RemoteLlm {
    client: JsonClient,
    calls: AtomicUsize,
}

impl RemoteLlm {
    pub fn new(http: HttpConfig) -> Self {
        Self {
            client: JsonClient::new(http),
            calls: AtomicUsize::new(0),
        }
    }
}

impl LlmProvider for RemoteLlm {
    fn complete(&self, request: &LlmRequest) -> Result<String> {
        request.validate()?;
        let body = json!({
            "model": request.model_id,
            "messages": [{ "role": "user", "content": request.prompt }],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        });
        let resp = self.client.post("/chat/completions", &body)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        resp.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::provider("response missing choices[0].message.content", false))
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread;
    use std::time::Duration;

    use super::*;
    use crate::llm::{LlmSettings, Stage};

    /// Serves the given (status, body) replies in order, one per connection,
    /// and captures request bodies.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        thread::spawn(move || {
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen2.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), seen)
    }

    fn config(base_url: String) -> HttpConfig {
        HttpConfig {
            base_url,
            api_key: Some("k".into()),
            timeout: Duration::from_secs(5),
            max_attempts: 3,
            backoff: Duration::from_millis(1),
            max_in_flight: 1,
        }
    }

    #[test]
    fn retries_transient_status_then_succeeds() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"1. a"}}]}"#.to_string();
        let (url, seen) = serve(vec![(503, "{}".into()), (200, ok)]);
        let llm = RemoteLlm::new(config(url));
        let out = llm
            .complete(&LlmSettings::default().request(Stage::Decompose, "Task: t".into()))
            .unwrap();
        assert_eq!(out, "1. a");
        let bodies = seen.lock().unwrap();
        assert_eq!(bodies.len(), 2);
        let body: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(body["model"], "gpt-3.5-turbo");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["top_p"], 1.0);
        assert_eq!(body["messages"][0]["content"], "Task: t");
        assert_eq!(llm.calls(), 1);
    }

    #[test]
    fn exhausts_attempts() {
        let (url, _) = serve(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
        let llm = RemoteLlm::new(config(url));
        let err = llm
            .complete(&LlmSettings::default().request(Stage::Other, "p".into()))
            .unwrap_err();
        assert!(err.is_transport());
    }

    #[test]
    fn client_error_not_retried() {
        let (url, seen) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        let llm = RemoteLlm::new(config(url));
        assert!(llm
            .complete(&LlmSettings::default().request(Stage::Other, "p".into()))
            .is_err());
        assert_eq!(seen.lock().unwrap().len(), 1);
    }
}
