//! Problem documents: every error response is `{code, message, detail}`.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use serde_json::Value;

use thematic_core::analytics::AnalyticsError;
use thematic_core::gateway::{CredentialError, GatewayError};
use thematic_core::jobs::JobError;
use thematic_core::pipeline::PipelineError;
use thematic_core::prompts::PromptError;
use thematic_core::store::{ConvertError, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Problem {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub problem: Problem,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            problem: Problem {
                code: code.to_string(),
                message: message.into(),
                detail: None,
            },
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.problem.detail = Some(detail);
        self
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn unauthorized() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(code = %self.problem.code, "{}", self.problem.message);
        }
        (self.status, Json(self.problem)).into_response()
    }
}

fn err(status: StatusCode, code: &str, e: impl std::fmt::Display) -> ApiError {
    ApiError::new(status, code, e.to_string())
}

const UNPROCESSABLE: StatusCode = StatusCode::UNPROCESSABLE_ENTITY;

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        use StoreError::*;
        let (status, code) = match &e {
            DuplicateName(_) => (StatusCode::CONFLICT, "duplicate_name"),
            InvalidName { .. } => (UNPROCESSABLE, "invalid_name"),
            UnknownProject(_) => (StatusCode::NOT_FOUND, "unknown_project"),
            InvalidFilename { .. } => (UNPROCESSABLE, "invalid_filename"),
            DuplicateFilename(_) => (StatusCode::CONFLICT, "duplicate_filename"),
            EmptyDocument(_) => (UNPROCESSABLE, "empty_document"),
            NotUtf8Decodable(_) => (UNPROCESSABLE, "not_utf8_decodable"),
            UnknownDocument(_) => (StatusCode::NOT_FOUND, "unknown_document"),
            UnknownArtifact(_) => (StatusCode::NOT_FOUND, "unknown_artifact"),
            CorruptMetadata(_) => (StatusCode::INTERNAL_SERVER_ERROR, "corrupt_metadata"),
            Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io_failure"),
        };
        err(status, code, e)
    }
}

impl From<ConvertError> for ApiError {
    fn from(e: ConvertError) -> Self {
        match e {
            ConvertError::UnsupportedFormat(_) => err(StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_format", e),
            ConvertError::ExtractionFailed(_) => err(UNPROCESSABLE, "extraction_failed", e),
        }
    }
}

impl From<CredentialError> for ApiError {
    fn from(e: CredentialError) -> Self {
        use CredentialError::*;
        let (status, code) = match &e {
            MissingAzureFields => (UNPROCESSABLE, "missing_azure_fields"),
            DuplicateLabel(_) => (StatusCode::CONFLICT, "duplicate_label"),
            UnknownLabel(_) => (StatusCode::NOT_FOUND, "unknown_label"),
            NoCredentialForModel(_) => (UNPROCESSABLE, "no_credential_for_model"),
            InvalidProfile(_) => (UNPROCESSABLE, "invalid_profile"),
            Corrupt(_) => (StatusCode::INTERNAL_SERVER_ERROR, "credential_store_corrupt"),
            Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io_failure"),
        };
        err(status, code, e)
    }
}

impl From<PromptError> for ApiError {
    fn from(e: PromptError) -> Self {
        use PromptError::*;
        let (status, code) = match &e {
            DuplicateName { .. } => (StatusCode::CONFLICT, "duplicate_name"),
            EmptyBody => (UNPROCESSABLE, "empty_body"),
            TrailerTamper => (UNPROCESSABLE, "trailer_tamper"),
            InvalidName(_) => (UNPROCESSABLE, "invalid_name"),
            MissingPlaceholder(_) => (UNPROCESSABLE, "missing_placeholder"),
            UnknownPrompt { .. } => (StatusCode::NOT_FOUND, "unknown_prompt"),
            PresetImmutable => (StatusCode::CONFLICT, "preset_immutable"),
            Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io_failure"),
        };
        err(status, code, e)
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        match &e {
            JobError::Conflict { running, .. } => {
                let running = *running;
                err(StatusCode::CONFLICT, "job_conflict", e).with_detail(serde_json::json!({ "running_job_id": running }))
            }
            JobError::UnknownJob(_) => err(StatusCode::NOT_FOUND, "unknown_job", e),
            JobError::AlreadyTerminal(_) => err(StatusCode::CONFLICT, "already_terminal", e),
        }
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        match &e {
            GatewayError::InvalidSettings(_) => err(UNPROCESSABLE, "invalid_settings", e),
            GatewayError::InvalidRequest(_) => err(UNPROCESSABLE, "invalid_request", e),
            _ => err(StatusCode::BAD_GATEWAY, "provider_error", e),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        use PipelineError::*;
        match e {
            Store(e) => e.into(),
            Prompt(e) => e.into(),
            Gateway(e) => e.into(),
            EmptySelection => err(UNPROCESSABLE, "empty_selection", e),
            NoTables => err(UNPROCESSABLE, "no_tables", e),
            StaleSnapshot(_) => err(StatusCode::CONFLICT, "stale_snapshot", e),
            NoReductionYet => err(StatusCode::NOT_FOUND, "no_reduction_yet", e),
            UnknownSnapshot(_) => err(StatusCode::NOT_FOUND, "unknown_snapshot", e),
            UnknownCodeTable(_) => err(StatusCode::NOT_FOUND, "unknown_code_table", e),
            EmptyCodebook => err(UNPROCESSABLE, "empty_codebook", e),
            WrongPhase { .. } => err(UNPROCESSABLE, "wrong_phase", e),
            DocumentCodingFailed { .. } => err(StatusCode::BAD_GATEWAY, "document_coding_failed", e),
            Codec(_) => err(StatusCode::BAD_GATEWAY, "unparseable_response", e),
            Artifact(_) => err(StatusCode::INTERNAL_SERVER_ERROR, "corrupt_artifact", e),
            Cancelled => err(StatusCode::CONFLICT, "cancelled", e),
        }
    }
}

impl From<AnalyticsError> for ApiError {
    fn from(e: AnalyticsError) -> Self {
        use AnalyticsError::*;
        match e {
            Pipeline(e) => e.into(),
            EmptyCodebook => err(UNPROCESSABLE, "empty_codebook", e),
            NoReductionYet => err(StatusCode::NOT_FOUND, "no_reduction_yet", e),
            NoThemesYet => err(StatusCode::NOT_FOUND, "no_themes_yet", e),
            InvalidLevelOrder(_) => err(StatusCode::BAD_REQUEST, "invalid_level_order", e),
            FewerThanTwoThemes => err(UNPROCESSABLE, "fewer_than_two_themes", e),
        }
    }
}

macro_rules! rejection {
    ($($ty:ty),*) => {$(
        impl From<$ty> for ApiError {
            fn from(r: $ty) -> Self {
                let status = r.status();
                let status = if status.is_client_error() { status } else { StatusCode::BAD_REQUEST };
                ApiError::new(status, "invalid_request", r.body_text())
            }
        }
    )*};
}

rejection!(
    axum::extract::rejection::JsonRejection,
    axum::extract::rejection::PathRejection,
    axum::extract::rejection::QueryRejection,
    axum::extract::multipart::MultipartRejection,
    axum::extract::multipart::MultipartError
);

/// `Json` whose rejections are problem documents.
#[derive(Debug, axum::extract::FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
pub struct ApiJson<T>(pub T);

/// `Path` whose rejections are problem documents.
#[derive(Debug, axum::extract::FromRequestParts)]
#[from_request(via(axum::extract::Path), rejection(ApiError))]
pub struct ApiPath<T>(pub T);

/// `Query` whose rejections are problem documents.
#[derive(Debug, axum::extract::FromRequestParts)]
#[from_request(via(axum::extract::Query), rejection(ApiError))]
pub struct ApiQuery<T>(pub T);
