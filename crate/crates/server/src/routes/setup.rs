//! Credentials, models and prompt templates.

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use url::Url;

use thematic_core::gateway::{CredentialSummary, ProviderKind, ProviderProfile, Secret};
use thematic_core::prompts::{trailer, validate_body, PromptDefaults, PromptTemplate};
use thematic_core::Phase;

use super::blocking;
use crate::error::{ApiError, ApiJson, ApiPath};
use crate::state::AppState;

pub(super) fn routes() -> Router<AppState> {
    Router::new()
        .route("/credentials", get(list_credentials).post(add_credential))
        .route("/credentials/{label}", delete(delete_credential))
        .route("/models", get(list_models))
        .route("/prompts/{phase}", get(list_prompts).post(create_prompt))
        .route("/prompts/{phase}/validate", post(validate_prompt))
        .route("/prompts/{phase}/{name}", get(get_prompt).delete(delete_prompt))
        .route("/prompts/{phase}/{name}/copy", post(copy_prompt))
}

/// Body of `POST /credentials`. The key is accepted here and never
/// returned.
#[derive(Deserialize)]
struct NewCredential {
    kind: ProviderKind,
    label: String,
    api_key: String,
    #[serde(default)]
    endpoint: Option<Url>,
    #[serde(default)]
    deployment_name: Option<String>,
}

async fn list_credentials(State(state): State<AppState>) -> Result<Json<Vec<CredentialSummary>>, ApiError> {
    blocking(move || Ok(Json(state.credentials.list()?))).await
}

async fn add_credential(
    State(state): State<AppState>,
    ApiJson(body): ApiJson<NewCredential>,
) -> Result<(StatusCode, Json<CredentialSummary>), ApiError> {
    let profile = ProviderProfile {
        kind: body.kind,
        label: body.label,
        api_key: Secret::new(body.api_key),
        endpoint: body.endpoint,
        deployment_name: body.deployment_name.filter(|d| !d.trim().is_empty()),
    };
    blocking(move || Ok((StatusCode::CREATED, Json(state.credentials.add(profile)?)))).await
}

async fn delete_credential(
    State(state): State<AppState>,
    ApiPath(label): ApiPath<String>,
) -> Result<StatusCode, ApiError> {
    blocking(move || {
        state.credentials.remove(&label)?;
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

async fn list_models(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    blocking(move || Ok(Json(json!({ "models": state.credentials.models()? })))).await
}

#[derive(Debug, Serialize)]
struct PromptList {
    phase: Phase,
    /// Output-format section appended to every template of the phase; not
    /// editable.
    trailer: &'static str,
    templates: Vec<PromptTemplate>,
}

async fn list_prompts(State(state): State<AppState>, ApiPath(phase): ApiPath<Phase>) -> Result<Json<PromptList>, ApiError> {
    blocking(move || {
        Ok(Json(PromptList {
            phase,
            trailer: trailer(phase),
            templates: state.prompts.list(phase)?,
        }))
    })
    .await
}

async fn get_prompt(
    State(state): State<AppState>,
    ApiPath((phase, name)): ApiPath<(Phase, String)>,
) -> Result<Json<PromptTemplate>, ApiError> {
    blocking(move || Ok(Json(state.prompts.get(phase, &name)?))).await
}

#[derive(Debug, Deserialize)]
struct NewPrompt {
    name: String,
    body: String,
    #[serde(default)]
    defaults: Option<PromptDefaults>,
}

async fn create_prompt(
    State(state): State<AppState>,
    ApiPath(phase): ApiPath<Phase>,
    ApiJson(body): ApiJson<NewPrompt>,
) -> Result<(StatusCode, Json<PromptTemplate>), ApiError> {
    blocking(move || {
        let template = state.prompts.create_custom(phase, &body.name, &body.body, body.defaults)?;
        Ok((StatusCode::CREATED, Json(template)))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct PromptBody {
    body: String,
}

async fn validate_prompt(ApiPath(phase): ApiPath<Phase>, ApiJson(body): ApiJson<PromptBody>) -> Result<Json<Value>, ApiError> {
    validate_body(&body.body)?;
    Ok(Json(json!({ "phase": phase, "valid": true })))
}

#[derive(Debug, Deserialize)]
struct CopyPrompt {
    new_name: String,
}

async fn copy_prompt(
    State(state): State<AppState>,
    ApiPath((phase, name)): ApiPath<(Phase, String)>,
    ApiJson(body): ApiJson<CopyPrompt>,
) -> Result<(StatusCode, Json<PromptTemplate>), ApiError> {
    blocking(move || Ok((StatusCode::CREATED, Json(state.prompts.copy_preset(phase, &name, &body.new_name)?)))).await
}

async fn delete_prompt(
    State(state): State<AppState>,
    ApiPath((phase, name)): ApiPath<(Phase, String)>,
) -> Result<StatusCode, ApiError> {
    blocking(move || {
        state.prompts.delete_custom(phase, &name)?;
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}
