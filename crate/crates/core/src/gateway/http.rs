use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatProvider, ChatRequest, ProviderConfig, ProviderError};

/// Minimal chat-completions client: one POST with a system and a user
/// message, bearer auth read from the configured environment variable.
pub struct HttpProvider {
    config: ProviderConfig,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| ProviderError::fatal(format!("http client: {e}")))?;
        Ok(Self { config, client })
    }

    fn token(&self) -> Result<Option<String>, ProviderError> {
        if self.config.auth_env_var.is_empty() {
            return Ok(None);
        }
        std::env::var(&self.config.auth_env_var).map(Some).map_err(|_| {
            ProviderError::fatal(format!(
                "environment variable {} is not set",
                self.config.auth_env_var
            ))
        })
    }
}

pub(crate) fn request_body(model: &str, request: &ChatRequest) -> Value {
    json!({
        "model": model,
        "temperature": request.temperature,
        "max_tokens": request.max_output,
        "messages": [
            {"role": "system", "content": request.system_prompt},
            {"role": "user", "content": request.user_prompt},
        ],
    })
}

pub(crate) fn classify_status(status: u16) -> Option<bool> {
    match status {
        200..=299 => None,
        408 | 429 | 500..=599 => Some(true),
        _ => Some(false),
    }
}

pub(crate) fn extract_content(body: &Value) -> Option<String> {
    body.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
}

impl ChatProvider for HttpProvider {
    fn id(&self) -> &str {
        &self.config.model_name
    }

    fn send(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let mut builder = self
            .client
            .post(&self.config.endpoint)
            .json(&request_body(&self.config.model_name, request));
        if let Some(token) = self.token()? {
            builder = builder.bearer_auth(token);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                ProviderError::Transient(e.to_string())
            } else {
                ProviderError::fatal(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| ProviderError::Transient(format!("reading body: {e}")))?;
        match classify_status(status) {
            Some(true) => return Err(ProviderError::Transient(format!("status {status}: {text}"))),
            Some(false) => {
                return Err(ProviderError::Fatal {
                    status: Some(status),
                    message: text,
                })
            }
            None => {}
        }
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| ProviderError::fatal(format!("response is not JSON: {e}")))?;
        extract_content(&body)
            .ok_or_else(|| ProviderError::fatal("response has no choices[0].message.content"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::AgentRole;

    #[test]
    fn body_shape() {
        let req = ChatRequest::new(AgentRole::Planner, "sys", "usr");
        let body = request_body("m", &req);
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "usr");
    }

    #[test]
    fn status_classes() {
        assert_eq!(classify_status(200), None);
        assert_eq!(classify_status(429), Some(true));
        assert_eq!(classify_status(503), Some(true));
        assert_eq!(classify_status(401), Some(false));
        assert_eq!(classify_status(404), Some(false));
    }

    #[test]
    fn content_extraction() {
        let v: Value = serde_json::from_str(r#"{"choices":[{"message":{"content":"hi"}}]}"#).unwrap();
        assert_eq!(extract_content(&v).as_deref(), Some("hi"));
        assert_eq!(extract_content(&json!({})), None);
    }
}
