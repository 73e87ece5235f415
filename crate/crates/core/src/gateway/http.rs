use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatMessage, ChatRequest};
use crate::model::Channel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL up to and including the API version, e.g.
    /// `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token. `None`
    /// for unauthenticated local servers.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
}

fn default_timeout() -> u64 {
    300
}

/// Chat-completions client speaking the widely implemented
/// `POST /chat/completions` JSON shape.
///
/// Media references travel as `audio_url` / `video_url` content parts
/// carrying the manifest uri, the convention used by omni-model servers.
pub struct HttpChatBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpChatBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| BackendError::Fatal(format!("http client: {e}")))?;
        Ok(Self { config, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn token(&self) -> Result<Option<String>, BackendError> {
        match &self.config.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::Auth(format!("environment variable {var} is not set"))),
        }
    }

    pub fn body(&self, req: &ChatRequest) -> Value {
        let messages: Vec<Value> = req.wire_messages().iter().map(wire_message).collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.decode.temperature,
            "max_tokens": req.decode.max_tokens,
        });
        if let Some(seed) = req.decode.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

fn wire_message(m: &ChatMessage) -> Value {
    let role = serde_json::to_value(m.role).expect("role serializes");
    match &m.media {
        None => json!({ "role": role, "content": m.content }),
        Some(media) => {
            let part = if media.has(Channel::Visual) {
                json!({ "type": "video_url", "video_url": { "url": media.uri } })
            } else {
                json!({ "type": "audio_url", "audio_url": { "url": media.uri } })
            };
            json!({ "role": role, "content": [part, { "type": "text", "text": m.content }] })
        }
    }
}

/// Extracts `choices[0].message.content` from a completion response body.
pub(crate) fn response_text(body: &Value) -> Option<String> {
    let content = body.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect::<Vec<_>>().join(""),
        ),
        _ => None,
    }
}

impl ChatBackend for HttpChatBackend {
    fn send(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let mut call = self.client.post(self.endpoint()).json(&self.body(req));
        if let Some(token) = self.token()? {
            call = call.bearer_auth(token);
        }
        let resp = call.send().map_err(|e| BackendError::Transient(format!("transport: {e}")))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transient(format!("reading body: {e}")))?;
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(BackendError::Auth(format!("{status}: {text}")));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("{status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::Fatal(format!("{status}: {text}")));
        }
        let body: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Fatal(format!("response is not JSON: {e}")))?;
        response_text(&body).ok_or_else(|| BackendError::Fatal("response has no choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MediaRef;

    #[test]
    fn body_shape() {
        let backend = HttpChatBackend::new(HttpConfig {
            base_url: "http://localhost:1/v1/".into(),
            model: "m".into(),
            api_key_env: None,
            timeout_s: 5,
        })
        .unwrap();
        assert_eq!(backend.endpoint(), "http://localhost:1/v1/chat/completions");
        let media = MediaRef::new("c", "file:///c.mp4", &[Channel::Audio, Channel::Visual], 3.0);
        let req = ChatRequest::new("b", "be precise", vec![ChatMessage::user("Question: what?").with_media(media)]);
        let body = backend.body(&req);
        assert_eq!(body["messages"][0], json!({"role": "system", "content": "be precise"}));
        assert_eq!(body["messages"][1]["content"][0]["video_url"]["url"], "file:///c.mp4");
        assert_eq!(body["messages"][1]["content"][1]["text"], "Question: what?");
        assert!(body.get("seed").is_none());
    }

    #[test]
    fn missing_credentials_is_auth_failure() {
        let backend = HttpChatBackend::new(HttpConfig {
            base_url: "http://localhost:1/v1".into(),
            model: "m".into(),
            api_key_env: Some("OMNICAP_TEST_SURELY_UNSET_KEY".into()),
            timeout_s: 5,
        })
        .unwrap();
        let req = ChatRequest::new("b", "", vec![ChatMessage::user("x")]);
        assert!(matches!(backend.send(&req), Err(BackendError::Auth(_))));
    }

    #[test]
    fn parses_string_and_part_content() {
        let a = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(response_text(&a).unwrap(), "hi");
        let b = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}}]});
        assert_eq!(response_text(&b).unwrap(), "ab");
        assert!(response_text(&json!({"choices": []})).is_none());
    }
}
