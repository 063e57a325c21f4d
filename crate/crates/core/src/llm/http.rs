//! Backend speaking the OpenAI-compatible chat-completions protocol.
//!
//! Endpoint and key come from the config or from `AD_AUDIT_BACKEND_URL` and
//! the environment variable named by `api_key_env` (default
//! `AD_AUDIT_BACKEND_KEY`). Local images are inlined as base64 data URLs.

use std::fs;
use std::path::Path;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, BackendRequest};
use crate::error::{Error, Result};

pub const URL_ENV: &str = "AD_AUDIT_BACKEND_URL";
pub const KEY_ENV: &str = "AD_AUDIT_BACKEND_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Full chat-completions URL; falls back to `AD_AUDIT_BACKEND_URL`.
    pub endpoint: Option<String>,
    pub api_key_env: String,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            endpoint: None,
            api_key_env: KEY_ENV.into(),
            model: "gemini-2.0-flash".into(),
            timeout_secs: 120,
        }
    }
}

pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

fn mime_for(path: &str) -> &'static str {
    let ext = Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/png",
    }
}

impl HttpBackend {
    pub fn from_config(cfg: &HttpConfig) -> Result<Self> {
        let endpoint = cfg
            .endpoint
            .clone()
            .or_else(|| std::env::var(URL_ENV).ok())
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| {
                Error::Config(format!(
                    "no backend endpoint: set backend.http.endpoint or {URL_ENV}, or use --mock-backend"
                ))
            })?;
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build();
        Ok(HttpBackend {
            endpoint,
            api_key,
            model: cfg.model.clone(),
            agent,
        })
    }

    fn image_part(r: &str) -> std::result::Result<Value, BackendError> {
        let url = if r.starts_with("http://") || r.starts_with("https://") || r.starts_with("data:") {
            r.to_string()
        } else {
            let bytes = fs::read(r)
                .map_err(|e| BackendError::fatal(format!("cannot read image {r}: {e}")))?;
            format!(
                "data:{};base64,{}",
                mime_for(r),
                base64::engine::general_purpose::STANDARD.encode(bytes)
            )
        };
        Ok(json!({"type": "image_url", "image_url": {"url": url}}))
    }

    pub fn request_body(&self, request: &BackendRequest) -> std::result::Result<Value, BackendError> {
        let mut content = vec![json!({"type": "text", "text": request.prompt})];
        for r in &request.image_refs {
            content.push(Self::image_part(r)?);
        }
        Ok(json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.settings.temperature,
            "max_tokens": request.settings.max_output_tokens,
        }))
    }
}

impl Backend for HttpBackend {
    fn tag(&self) -> String {
        format!("http-{}", self.model)
    }

    fn complete(&self, request: &BackendRequest) -> std::result::Result<String, BackendError> {
        let body = self.request_body(request)?;
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let text = r.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", text.chars().take(300).collect::<String>());
                return Err(if code == 429 || code >= 500 {
                    BackendError::retryable(msg)
                } else {
                    BackendError::fatal(msg)
                });
            }
            Err(e) => return Err(BackendError::retryable(e.to_string())),
        };
        let v: Value = resp
            .into_json()
            .map_err(|e| BackendError::retryable(format!("invalid JSON body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::retryable("response has no message content"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::SamplingSettings;

    #[test]
    fn body_inlines_local_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ad.jpg");
        fs::write(&p, b"abc").unwrap();
        let b = HttpBackend::from_config(&HttpConfig {
            endpoint: Some("http://127.0.0.1:9/v1/chat/completions".into()),
            ..Default::default()
        })
        .unwrap();
        let req = BackendRequest::new("features", "describe".into(), SamplingSettings::EXTRACTION)
            .with_images(vec![p.to_string_lossy().into_owned(), "https://x/y.png".into()]);
        let body = b.request_body(&req).unwrap();
        assert_eq!(body["temperature"], 0.3);
        let content = body["messages"][0]["content"].as_array().unwrap();
        assert_eq!(content.len(), 3);
        assert_eq!(content[1]["image_url"]["url"], "data:image/jpeg;base64,YWJj");
        assert_eq!(content[2]["image_url"]["url"], "https://x/y.png");
    }

    #[test]
    fn unreachable_endpoint_is_retryable() {
        let b = HttpBackend::from_config(&HttpConfig {
            endpoint: Some("http://127.0.0.1:9/v1/chat/completions".into()),
            timeout_secs: 2,
            ..Default::default()
        })
        .unwrap();
        let req = BackendRequest::new("t", "x".into(), SamplingSettings::EXTRACTION);
        assert!(b.complete(&req).unwrap_err().retryable);
    }
}
