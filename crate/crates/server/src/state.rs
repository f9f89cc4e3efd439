use std::sync::Arc;
use std::time::Duration;

use thematic_core::gateway::{ChatProvider, CredentialStore, Gateway, HttpProvider, RetryPolicy};
use thematic_core::jobs::JobManager;
use thematic_core::prompts::PromptLibrary;
use thematic_core::store::ProjectStore;

use crate::config::Config;
use crate::error::ApiError;

/// Resolves a model id to something that can answer chat requests.
pub trait ProviderFactory: Send + Sync {
    fn provider_for(&self, model_id: &str) -> Result<Arc<dyn ChatProvider>, ApiError>;
}

/// Looks the model up in the credential store and talks HTTP to it.
pub struct HttpProviderFactory {
    credentials: Arc<CredentialStore>,
    azure_api_version: String,
    timeout: Duration,
}

impl HttpProviderFactory {
    pub fn new(credentials: Arc<CredentialStore>, azure_api_version: String, timeout: Duration) -> Self {
        Self {
            credentials,
            azure_api_version,
            timeout,
        }
    }
}

impl ProviderFactory for HttpProviderFactory {
    fn provider_for(&self, model_id: &str) -> Result<Arc<dyn ChatProvider>, ApiError> {
        let profile = self.credentials.resolve_model(model_id)?;
        let provider = HttpProvider::from_profile(&profile, &self.azure_api_version, self.timeout).map_err(|e| {
            ApiError::new(
                axum::http::StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_provider",
                profile.api_key.redact(&e.to_string()),
            )
        })?;
        Ok(Arc::new(provider))
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<ProjectStore>,
    pub credentials: Arc<CredentialStore>,
    pub prompts: Arc<PromptLibrary>,
    pub jobs: Arc<JobManager>,
    pub providers: Arc<dyn ProviderFactory>,
    pub retry: RetryPolicy,
    pub max_concurrent_requests: Option<usize>,
    pub api_token: Option<Arc<str>>,
}

impl AppState {
    /// Opens every store named in `config` and talks to real providers.
    pub fn from_config(config: &Config) -> anyhow::Result<Self> {
        let credentials = Arc::new(CredentialStore::open(&config.credential_store)?);
        let providers = Arc::new(HttpProviderFactory::new(
            credentials.clone(),
            config.azure_api_version.clone(),
            Duration::from_secs(config.request_timeout_secs),
        ));
        Ok(Self {
            store: Arc::new(ProjectStore::open(&config.projects_root)?),
            prompts: Arc::new(PromptLibrary::open(&config.prompt_dir)?),
            jobs: Arc::new(JobManager::new(config.max_workers)),
            credentials,
            providers,
            retry: RetryPolicy {
                max_attempts: config.max_attempts,
                ..RetryPolicy::default()
            },
            max_concurrent_requests: config.max_concurrent_requests,
            api_token: config.api_token.as_deref().map(Arc::from),
        })
    }

    pub fn with_providers(mut self, providers: Arc<dyn ProviderFactory>) -> Self {
        self.providers = providers;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn gateway_for(&self, model_id: &str) -> Result<Gateway, ApiError> {
        let gateway = Gateway::new(self.providers.provider_for(model_id)?).with_retry(self.retry.clone());
        Ok(match self.max_concurrent_requests {
            Some(n) => gateway.with_concurrency_limit(n),
            None => gateway,
        })
    }
}

/// Serves the same provider for every model; lets tests and offline demos run
/// without credentials.
pub struct FixedProvider(pub Arc<dyn ChatProvider>);

impl ProviderFactory for FixedProvider {
    fn provider_for(&self, _model_id: &str) -> Result<Arc<dyn ChatProvider>, ApiError> {
        Ok(self.0.clone())
    }
}
