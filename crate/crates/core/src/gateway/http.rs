use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;
use url::Url;

use super::{ChatProvider, ChatRequest, ProviderError, ProviderKind, ProviderProfile, ProviderReply, Secret, TokenUsage};

pub const DEFAULT_OPENAI_BASE: &str = "https://api.openai.com/v1/";
pub const DEFAULT_AZURE_API_VERSION: &str = "2024-10-21";

/// Chat-completions over HTTPS. OpenAI and Azure share the body shape and
/// differ only in URL and auth header.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    kind: ProviderKind,
    url: Url,
    api_key: Secret,
    client: reqwest::Client,
}

impl HttpProvider {
    pub fn from_profile(profile: &ProviderProfile, azure_api_version: &str, timeout: Duration) -> Result<Self, ProviderError> {
        let url = match profile.kind {
            ProviderKind::OpenAi => {
                let base = profile
                    .endpoint
                    .clone()
                    .unwrap_or_else(|| Url::parse(DEFAULT_OPENAI_BASE).expect("valid default url"));
                with_trailing_slash(base)
                    .join("chat/completions")
                    .map_err(|e| ProviderError::Malformed(e.to_string()))?
            }
            ProviderKind::Azure => {
                let endpoint = profile
                    .endpoint
                    .clone()
                    .ok_or_else(|| ProviderError::Malformed("azure profile without endpoint".into()))?;
                let deployment = profile
                    .deployment_name
                    .as_deref()
                    .ok_or_else(|| ProviderError::Malformed("azure profile without deployment".into()))?;
                azure_url(&endpoint, deployment, azure_api_version)?
            }
        };
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Unreachable(e.to_string()))?;
        Ok(Self {
            kind: profile.kind,
            url,
            api_key: profile.api_key.clone(),
            client,
        })
    }

    pub fn url(&self) -> &Url {
        &self.url
    }
}

fn with_trailing_slash(mut url: Url) -> Url {
    if !url.path().ends_with('/') {
        let path = format!("{}/", url.path());
        url.set_path(&path);
    }
    url
}

fn azure_url(endpoint: &Url, deployment: &str, api_version: &str) -> Result<Url, ProviderError> {
    let mut url = with_trailing_slash(endpoint.clone());
    url.path_segments_mut()
        .map_err(|_| ProviderError::Malformed("endpoint cannot be a base url".into()))?
        .pop_if_empty()
        .extend(["openai", "deployments", deployment, "chat", "completions"]);
    url.query_pairs_mut().clear().append_pair("api-version", api_version);
    Ok(url)
}

#[derive(Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct ErrorEnvelope {
    error: ErrorDetail,
}

#[derive(Deserialize)]
struct ErrorDetail {
    #[serde(default)]
    message: String,
    #[serde(default)]
    code: Option<serde_json::Value>,
}

fn classify_error(status: u16, body: &str) -> ProviderError {
    let (message, code) = match serde_json::from_str::<ErrorEnvelope>(body) {
        Ok(env) => (
            env.error.message,
            env.error.code.and_then(|c| c.as_str().map(str::to_string)),
        ),
        Err(_) => (body.chars().take(500).collect(), None),
    };
    let overflow = code.as_deref() == Some("context_length_exceeded")
        || message.contains("maximum context length")
        || message.contains("context_length_exceeded");
    if overflow {
        ProviderError::ContextTooLong(message)
    } else {
        ProviderError::Http { status, message }
    }
}

#[async_trait]
impl ChatProvider for HttpProvider {
    async fn send(&self, request: &ChatRequest) -> Result<ProviderReply, ProviderError> {
        let body = json!({
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_output_tokens,
        });
        let builder = self.client.post(self.url.clone()).json(&body);
        let builder = match self.kind {
            ProviderKind::OpenAi => builder.bearer_auth(self.api_key.expose()),
            ProviderKind::Azure => builder.header("api-key", self.api_key.expose()),
        };
        let response = builder.send().await.map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Unreachable(self.api_key.redact(&e.to_string()))
            }
        })?;
        let status = response.status().as_u16();
        let text = response.text().await.map_err(|e| {
            if e.is_timeout() {
                ProviderError::Timeout
            } else {
                ProviderError::Unreachable(self.api_key.redact(&e.to_string()))
            }
        })?;
        if !(200..300).contains(&status) {
            return Err(classify_error(status, &self.api_key.redact(&text)));
        }
        let parsed: CompletionBody =
            serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(format!("completion body: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Malformed("completion without message content".into()))?;
        let usage = parsed
            .usage
            .map(|u| TokenUsage {
                input: u.prompt_tokens,
                output: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(ProviderReply { text: content, usage })
    }

    fn secret(&self) -> Option<&Secret> {
        Some(&self.api_key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, GatewayError, GenerationSettings, RetryPolicy};
    use axum::extract::{Path, Query, State};
    use axum::http::{HeaderMap, StatusCode};
    use axum::routing::post;
    use axum::{Json, Router};
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex};

    #[derive(Default)]
    struct Seen {
        requests: Vec<(String, HeaderMap, serde_json::Value)>,
    }

    type Shared = Arc<Mutex<Seen>>;

    async fn spawn(router: Router) -> Url {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
        Url::parse(&format!("http://{addr}/")).unwrap()
    }

    fn ok_body(text: &str) -> serde_json::Value {
        json!({
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": 11, "completion_tokens": 3}
        })
    }

    #[tokio::test]
    async fn openai_wire_format() {
        let seen: Shared = Default::default();
        let router = Router::new()
            .route(
                "/v1/chat/completions",
                post(|State(seen): State<Shared>, headers: HeaderMap, Json(body): Json<serde_json::Value>| async move {
                    seen.lock().unwrap().requests.push(("/v1/chat/completions".into(), headers, body));
                    Json(ok_body("hello back"))
                }),
            )
            .with_state(seen.clone());
        let base = spawn(router).await.join("v1").unwrap();
        let mut profile = ProviderProfile::openai("work", "sk-test-secret-sU");
        profile.endpoint = Some(base);
        let provider = HttpProvider::from_profile(&profile, DEFAULT_AZURE_API_VERSION, Duration::from_secs(5)).unwrap();
        let settings = GenerationSettings {
            temperature: 0.19,
            top_p: 0.35,
            ..GenerationSettings::for_model("gpt-4o-mini")
        };
        let reply = provider.send(&ChatRequest::new(&settings, "sys", "usr")).await.unwrap();
        assert_eq!(reply.text, "hello back");
        assert_eq!(reply.usage, TokenUsage { input: 11, output: 3 });

        let seen = seen.lock().unwrap();
        let (_, headers, body) = &seen.requests[0];
        assert_eq!(headers["authorization"], "Bearer sk-test-secret-sU");
        assert_eq!(body["model"], "gpt-4o-mini");
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "usr");
        assert_eq!(body["temperature"], 0.19);
        assert_eq!(body["top_p"], 0.35);
        assert_eq!(body["max_tokens"], 4096);
    }

    #[tokio::test]
    async fn azure_wire_format() {
        let seen: Shared = Default::default();
        let router = Router::new()
            .route(
                "/openai/deployments/{deployment}/chat/completions",
                post(
                    |State(seen): State<Shared>,
                     Path(deployment): Path<String>,
                     Query(q): Query<HashMap<String, String>>,
                     headers: HeaderMap,
                     Json(body): Json<serde_json::Value>| async move {
                        let key = format!("{deployment}?{}", q.get("api-version").cloned().unwrap_or_default());
                        seen.lock().unwrap().requests.push((key, headers, body));
                        Json(ok_body("from azure"))
                    },
                ),
            )
            .with_state(seen.clone());
        let endpoint = spawn(router).await;
        let profile = ProviderProfile::azure("dept", "azure-key-42", endpoint, "dept-gpt4o");
        let provider = HttpProvider::from_profile(&profile, "2024-10-21", Duration::from_secs(5)).unwrap();
        assert!(provider.url().as_str().ends_with("/openai/deployments/dept-gpt4o/chat/completions?api-version=2024-10-21"));
        let reply = provider
            .send(&ChatRequest::new(&GenerationSettings::for_model("dept-gpt4o"), "s", "u"))
            .await
            .unwrap();
        assert_eq!(reply.text, "from azure");
        let seen = seen.lock().unwrap();
        let (key, headers, _) = &seen.requests[0];
        assert_eq!(key, "dept-gpt4o?2024-10-21");
        assert_eq!(headers["api-key"], "azure-key-42");
        assert!(headers.get("authorization").is_none());
    }

    #[tokio::test]
    async fn error_classification_and_redaction() {
        let router = Router::new()
            .route(
                "/v1/chat/completions",
                post(|headers: HeaderMap| async move {
                    let auth = headers["authorization"].to_str().unwrap().to_string();
                    if auth.ends_with("bad-key-XY") {
                        (
                            StatusCode::UNAUTHORIZED,
                            Json(json!({"error": {"message": format!("Incorrect API key provided: {auth}"), "code": "invalid_api_key"}})),
                        )
                    } else {
                        (
                            StatusCode::BAD_REQUEST,
                            Json(json!({"error": {"message": "This model's maximum context length is 8192 tokens", "code": "context_length_exceeded"}})),
                        )
                    }
                }),
            );
        let base = spawn(router).await.join("v1").unwrap();

        let mut profile = ProviderProfile::openai("bad", "bad-key-XY");
        profile.endpoint = Some(base.clone());
        let provider = Arc::new(HttpProvider::from_profile(&profile, DEFAULT_AZURE_API_VERSION, Duration::from_secs(5)).unwrap());
        let raw = provider
            .send(&ChatRequest::new(&GenerationSettings::default(), "s", "u"))
            .await
            .unwrap_err();
        assert!(matches!(raw, ProviderError::Http { status: 401, .. }));
        assert!(!raw.to_string().contains("bad-key-XY"), "{raw}");
        let gw = Gateway::new(provider).with_retry(RetryPolicy::immediate(5));
        let err = gw.complete_chat(&GenerationSettings::default(), "s", "u").await.unwrap_err();
        assert_eq!(err, GatewayError::AuthFailed { status: 401 });

        let mut profile = ProviderProfile::openai("ok", "good-key");
        profile.endpoint = Some(base);
        let provider = HttpProvider::from_profile(&profile, DEFAULT_AZURE_API_VERSION, Duration::from_secs(5)).unwrap();
        let err = provider
            .send(&ChatRequest::new(&GenerationSettings::default(), "s", "u"))
            .await
            .unwrap_err();
        assert!(matches!(err, ProviderError::ContextTooLong(_)));
    }

    #[tokio::test]
    async fn connection_refused_is_unreachable() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let mut profile = ProviderProfile::openai("x", "k-123");
        profile.endpoint = Some(Url::parse(&format!("http://{addr}/v1")).unwrap());
        let provider = HttpProvider::from_profile(&profile, DEFAULT_AZURE_API_VERSION, Duration::from_secs(2)).unwrap();
        let err = provider
            .send(&ChatRequest::new(&GenerationSettings::default(), "s", "u"))
            .await
            .unwrap_err();
        assert!(err.is_retryable());
        assert!(matches!(err, ProviderError::Unreachable(_) | ProviderError::Timeout));
    }
}
