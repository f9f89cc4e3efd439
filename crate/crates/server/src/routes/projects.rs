//! Projects, documents, conversion and raw artifact downloads.

use std::collections::BTreeMap;

use axum::body::Bytes;
use axum::extract::{Multipart, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use thematic_core::store::{convert_to_plaintext, sniff_kind, DocId, DocumentInfo, DocumentKind, Project};
use thematic_core::Phase;

use super::blocking;
use crate::error::{ApiError, ApiJson, ApiPath, ApiQuery};
use crate::state::AppState;

pub(super) fn routes() -> Router<AppState> {
    Router::new()
        .route("/projects", get(list_projects).post(create_project))
        .route("/projects/{project}", get(get_project).delete(delete_project))
        .route("/projects/{project}/documents", get(list_documents).post(upload_documents))
        .route(
            "/projects/{project}/documents/{doc_id}",
            get(get_document).delete(delete_document).patch(select_document),
        )
        .route("/projects/{project}/selection", patch(set_selection))
        .route("/projects/{project}/artifacts/{phase}", get(list_artifacts))
        .route("/projects/{project}/artifacts/{phase}/{filename}", get(download_artifact))
        .route("/convert", post(convert))
}

#[derive(Debug, Deserialize)]
struct NewProject {
    name: String,
}

#[derive(Debug, Serialize)]
struct ArtifactEntry {
    filename: String,
    phase: Phase,
    produced_at: DateTime<Utc>,
    size_bytes: u64,
}

/// A project with its documents and the per-phase folder contents.
#[derive(Debug, Serialize)]
struct ProjectView {
    #[serde(flatten)]
    project: Project,
    documents: Vec<DocumentInfo>,
    folders: BTreeMap<&'static str, Vec<String>>,
}

async fn list_projects(State(state): State<AppState>) -> Result<Json<Vec<Project>>, ApiError> {
    blocking(move || Ok(Json(state.store.list_projects()?))).await
}

async fn create_project(
    State(state): State<AppState>,
    ApiJson(body): ApiJson<NewProject>,
) -> Result<(StatusCode, Json<Project>), ApiError> {
    blocking(move || Ok((StatusCode::CREATED, Json(state.store.create_project(&body.name)?)))).await
}

async fn get_project(State(state): State<AppState>, ApiPath(name): ApiPath<String>) -> Result<Json<ProjectView>, ApiError> {
    blocking(move || {
        let project = state.store.project(&name)?;
        let documents = state.store.documents(&name)?;
        let mut folders = BTreeMap::new();
        folders.insert("data", documents.iter().map(|d| d.filename.clone()).collect());
        for phase in Phase::ALL {
            let names = state
                .store
                .list_phase_artifacts(&name, phase)?
                .into_iter()
                .map(|a| a.source_label)
                .collect();
            folders.insert(phase.dir_name(), names);
        }
        Ok(Json(ProjectView {
            project,
            documents,
            folders,
        }))
    })
    .await
}

async fn delete_project(State(state): State<AppState>, ApiPath(name): ApiPath<String>) -> Result<StatusCode, ApiError> {
    blocking(move || {
        state.store.delete_project(&name)?;
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

async fn list_documents(
    State(state): State<AppState>,
    ApiPath(name): ApiPath<String>,
) -> Result<Json<Vec<DocumentInfo>>, ApiError> {
    blocking(move || Ok(Json(state.store.documents(&name)?))).await
}

#[derive(Debug, Deserialize)]
struct UploadQuery {
    /// Convert PDF and DOCX uploads to plain text; otherwise they are refused.
    #[serde(default = "yes")]
    convert: bool,
}

fn yes() -> bool {
    true
}

/// Turns an uploaded file into a `.txt` name and bytes ready for ingestion.
fn prepare_upload(filename: &str, bytes: &[u8], convert: bool) -> Result<(String, Vec<u8>), ApiError> {
    let extension = filename.rsplit_once('.').map(|(_, ext)| ext.to_ascii_lowercase());
    let kind = match extension.as_deref() {
        Some("pdf") => Some(DocumentKind::Pdf),
        Some("docx") => Some(DocumentKind::Docx),
        _ => None,
    };
    match kind {
        None => Ok((filename.to_string(), bytes.to_vec())),
        Some(_) if !convert => Err(ApiError::new(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "unsupported_format",
            format!("`{filename}` must be converted to plain text first"),
        )),
        Some(kind) => {
            let text = convert_to_plaintext(bytes, kind)?;
            let stem = filename.rsplit_once('.').map_or(filename, |(stem, _)| stem);
            Ok((format!("{stem}.txt"), text.into_bytes()))
        }
    }
}

/// Accepts one or more `file` parts. Ingestion stops at the first failure;
/// files ingested before it stay.
async fn upload_documents(
    State(state): State<AppState>,
    ApiPath(name): ApiPath<String>,
    ApiQuery(query): ApiQuery<UploadQuery>,
    mut multipart: Multipart,
) -> Result<(StatusCode, Json<Vec<DocumentInfo>>), ApiError> {
    let mut files = Vec::new();
    while let Some(field) = multipart.next_field().await? {
        let Some(filename) = field.file_name().map(str::to_string) else {
            continue;
        };
        let bytes = field.bytes().await?;
        files.push((filename, bytes));
    }
    if files.is_empty() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "no_files",
            "multipart body carries no file parts",
        ));
    }
    blocking(move || {
        let mut ingested = Vec::new();
        for (filename, bytes) in files {
            let (filename, bytes) = prepare_upload(&filename, &bytes, query.convert)?;
            ingested.push(state.store.ingest_document(&name, &filename, &bytes)?.info);
        }
        Ok((StatusCode::CREATED, Json(ingested)))
    })
    .await
}

#[derive(Debug, Serialize)]
struct DocumentView {
    #[serde(flatten)]
    info: DocumentInfo,
    text: String,
}

async fn get_document(
    State(state): State<AppState>,
    ApiPath((name, doc_id)): ApiPath<(String, u32)>,
) -> Result<Json<DocumentView>, ApiError> {
    blocking(move || {
        let doc = state.store.document(&name, DocId(doc_id))?;
        Ok(Json(DocumentView {
            info: doc.info,
            text: doc.text,
        }))
    })
    .await
}

async fn delete_document(
    State(state): State<AppState>,
    ApiPath((name, doc_id)): ApiPath<(String, u32)>,
) -> Result<StatusCode, ApiError> {
    blocking(move || {
        state.store.delete_document(&name, DocId(doc_id))?;
        Ok(StatusCode::NO_CONTENT)
    })
    .await
}

#[derive(Debug, Deserialize)]
struct Selected {
    selected: bool,
}

async fn select_document(
    State(state): State<AppState>,
    ApiPath((name, doc_id)): ApiPath<(String, u32)>,
    ApiJson(body): ApiJson<Selected>,
) -> Result<Json<DocumentInfo>, ApiError> {
    blocking(move || Ok(Json(state.store.set_selected(&name, DocId(doc_id), body.selected)?))).await
}

#[derive(Debug, Deserialize)]
struct Selection {
    /// Exactly these documents end up selected.
    documents: Vec<DocId>,
}

async fn set_selection(
    State(state): State<AppState>,
    ApiPath(name): ApiPath<String>,
    ApiJson(body): ApiJson<Selection>,
) -> Result<Json<Vec<DocumentInfo>>, ApiError> {
    blocking(move || {
        let docs = state.store.documents(&name)?;
        if let Some(missing) = body.documents.iter().find(|id| !docs.iter().any(|d| d.doc_id == **id)) {
            return Err(thematic_core::store::StoreError::UnknownDocument(*missing).into());
        }
        for doc in &docs {
            let wanted = body.documents.contains(&doc.doc_id);
            if doc.selected != wanted {
                state.store.set_selected(&name, doc.doc_id, wanted)?;
            }
        }
        Ok(Json(state.store.documents(&name)?))
    })
    .await
}

async fn list_artifacts(
    State(state): State<AppState>,
    ApiPath((name, phase)): ApiPath<(String, Phase)>,
) -> Result<Json<Vec<ArtifactEntry>>, ApiError> {
    blocking(move || {
        let entries = state
            .store
            .list_phase_artifacts(&name, phase)?
            .into_iter()
            .map(|a| ArtifactEntry {
                size_bytes: std::fs::metadata(&a.path).map(|m| m.len()).unwrap_or(0),
                filename: a.source_label,
                phase: a.phase,
                produced_at: a.produced_at,
            })
            .collect();
        Ok(Json(entries))
    })
    .await
}

fn content_type(filename: &str) -> &'static str {
    match filename.rsplit_once('.').map(|(_, ext)| ext) {
        Some("csv") => "text/csv; charset=utf-8",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    }
}

/// The persisted file, unmodified.
async fn download_artifact(
    State(state): State<AppState>,
    ApiPath((name, phase, filename)): ApiPath<(String, Phase, String)>,
) -> Result<Response, ApiError> {
    let bytes = {
        let filename = filename.clone();
        blocking(move || Ok(state.store.read_artifact(&name, phase, &filename)?)).await?
    };
    let disposition = format!("attachment; filename=\"{}\"", filename.replace('"', ""));
    Ok((
        [
            (header::CONTENT_TYPE, content_type(&filename).to_string()),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        bytes,
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
struct ConvertQuery {
    kind: Option<String>,
}

/// Extracts plain text from a PDF or DOCX body. The kind is sniffed when not
/// given.
async fn convert(ApiQuery(query): ApiQuery<ConvertQuery>, body: Bytes) -> Result<Response, ApiError> {
    let kind = match query.kind {
        Some(kind) => kind.parse::<DocumentKind>()?,
        None => sniff_kind(&body).ok_or_else(|| {
            ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "unsupported_format",
                "body is neither a PDF nor a DOCX file",
            )
        })?,
    };
    let text = blocking(move || Ok(convert_to_plaintext(&body, kind)?)).await?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
}
