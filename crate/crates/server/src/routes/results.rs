//! Phase results and the analytics behind the charts.

use std::collections::BTreeSet;

use axum::extract::{RawQuery, State};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::Serialize;

use thematic_core::analytics::{self, FlowEdge, HierarchyFilter, HierarchyNode, Level, OverlapMatrix, SeriesPoint, SpiderEntry};
use thematic_core::coding::{self, CodeTable};
use thematic_core::reduction::{self, SnapshotMeta};
use thematic_core::store::DocId;
use thematic_core::themes::{self, CandidateCodebook, ThemeBook};

use super::blocking;
use super::jobs::pending_tables;
use crate::error::{ApiError, ApiPath};
use crate::state::AppState;

pub(super) fn routes() -> Router<AppState> {
    Router::new()
        .route("/projects/{project}/code-tables", get(list_code_tables))
        .route("/projects/{project}/code-tables/{filename}", get(get_code_table))
        .route("/projects/{project}/codebooks", get(list_codebooks))
        .route("/projects/{project}/codebooks/{step}", get(get_codebook))
        .route("/projects/{project}/reduction/next", get(next_table))
        .route("/projects/{project}/themes", get(get_themes))
        .route("/projects/{project}/analytics/saturation", get(saturation))
        .route("/projects/{project}/analytics/hierarchy", get(hierarchy))
        .route("/projects/{project}/analytics/flows", get(flows))
        .route("/projects/{project}/analytics/overlap", get(overlap))
        .route("/projects/{project}/analytics/spider", get(spider))
}

#[derive(Debug, Serialize)]
struct CodeTableEntry {
    filename: String,
    source_doc: DocId,
    source_filename: String,
    code_count: usize,
    model_id: String,
    prompt_name: String,
    produced_at: DateTime<Utc>,
}

impl From<&CodeTable> for CodeTableEntry {
    fn from(t: &CodeTable) -> Self {
        Self {
            filename: t.artifact_name(),
            source_doc: t.source_doc,
            source_filename: t.source_filename.clone(),
            code_count: t.codes.len(),
            model_id: t.model_id.clone(),
            prompt_name: t.prompt_name.clone(),
            produced_at: t.produced_at,
        }
    }
}

async fn list_code_tables(
    State(state): State<AppState>,
    ApiPath(project): ApiPath<String>,
) -> Result<Json<Vec<CodeTableEntry>>, ApiError> {
    blocking(move || {
        let tables = coding::list_code_tables(&state.store, &project)?;
        Ok(Json(tables.iter().map(CodeTableEntry::from).collect()))
    })
    .await
}

async fn get_code_table(
    State(state): State<AppState>,
    ApiPath((project, filename)): ApiPath<(String, String)>,
) -> Result<Json<CodeTable>, ApiError> {
    blocking(move || Ok(Json(coding::load_code_table(&state.store, &project, &filename)?))).await
}

async fn list_codebooks(
    State(state): State<AppState>,
    ApiPath(project): ApiPath<String>,
) -> Result<Json<Vec<CandidateCodebook>>, ApiError> {
    blocking(move || Ok(Json(themes::list_candidate_codebooks(&state.store, &project)?))).await
}

#[derive(Debug, Serialize)]
struct CodebookView {
    #[serde(flatten)]
    meta: SnapshotMeta,
    unique_count: u64,
    /// `None` for a codebook with no codes.
    its: Option<f64>,
}

async fn get_codebook(
    State(state): State<AppState>,
    ApiPath((project, step)): ApiPath<(String, u32)>,
) -> Result<Json<CodebookView>, ApiError> {
    blocking(move || {
        let meta = reduction::load_snapshot(&state.store, &project, step)?;
        let its = analytics::compute_its(&meta.codebook).ok();
        Ok(Json(CodebookView {
            unique_count: meta.codebook.unique_count(),
            meta,
            its,
        }))
    })
    .await
}

#[derive(Debug, Serialize)]
struct NextTable {
    /// The table an incremental step would process next.
    next: Option<String>,
    pending: Vec<String>,
    folded: Vec<String>,
}

async fn next_table(State(state): State<AppState>, ApiPath(project): ApiPath<String>) -> Result<Json<NextTable>, ApiError> {
    blocking(move || {
        state.store.project(&project)?;
        let (folded, pending) = pending_tables(&state, &project)?;
        let pending: Vec<String> = pending.iter().map(CodeTable::artifact_name).collect();
        Ok(Json(NextTable {
            next: pending.first().cloned(),
            pending,
            folded,
        }))
    })
    .await
}

async fn get_themes(State(state): State<AppState>, ApiPath(project): ApiPath<String>) -> Result<Json<ThemeBook>, ApiError> {
    blocking(move || {
        themes::load_theme_book(&state.store, &project)?
            .map(Json)
            .ok_or_else(|| analytics::AnalyticsError::NoThemesYet.into())
    })
    .await
}

#[derive(Debug, Serialize)]
struct Saturation {
    /// Ratio after the last step.
    its: Option<f64>,
    series: Vec<SeriesPoint>,
}

async fn saturation(State(state): State<AppState>, ApiPath(project): ApiPath<String>) -> Result<Json<Saturation>, ApiError> {
    blocking(move || {
        let series = analytics::build_saturation_series(&state.store, &project)?;
        let its = series.last().and_then(|p| p.its);
        Ok(Json(Saturation { its, series }))
    })
    .await
}

/// `levels=theme,unique_code` plus any number of `theme=` and `code=`
/// filters.
#[derive(Debug, PartialEq)]
struct HierarchyQuery {
    levels: Vec<Level>,
    filter: HierarchyFilter,
}

fn parse_hierarchy_query(raw: Option<&str>) -> Result<HierarchyQuery, ApiError> {
    let mut levels = None;
    let mut themes = BTreeSet::new();
    let mut codes = BTreeSet::new();
    for (key, value) in url::form_urlencoded::parse(raw.unwrap_or("").as_bytes()) {
        match key.as_ref() {
            "levels" => levels = Some(analytics::parse_levels(&value)?),
            "theme" => {
                themes.insert(value.into_owned());
            }
            "code" => {
                codes.insert(value.into_owned());
            }
            other => return Err(ApiError::bad_request(format!("unknown query parameter `{other}`"))),
        }
    }
    Ok(HierarchyQuery {
        levels: levels.unwrap_or_else(|| Level::ALL.to_vec()),
        filter: HierarchyFilter {
            themes: (!themes.is_empty()).then_some(themes),
            codes: (!codes.is_empty()).then_some(codes),
        },
    })
}

async fn hierarchy(
    State(state): State<AppState>,
    ApiPath(project): ApiPath<String>,
    RawQuery(raw): RawQuery,
) -> Result<Json<HierarchyNode>, ApiError> {
    let query = parse_hierarchy_query(raw.as_deref())?;
    blocking(move || Ok(Json(analytics::build_hierarchy(&state.store, &project, &query.levels, &query.filter)?))).await
}

async fn flows(State(state): State<AppState>, ApiPath(project): ApiPath<String>) -> Result<Json<Vec<FlowEdge>>, ApiError> {
    blocking(move || Ok(Json(analytics::build_flows(&state.store, &project)?))).await
}

async fn overlap(State(state): State<AppState>, ApiPath(project): ApiPath<String>) -> Result<Json<OverlapMatrix>, ApiError> {
    blocking(move || Ok(Json(analytics::build_overlap(&state.store, &project)?))).await
}

async fn spider(State(state): State<AppState>, ApiPath(project): ApiPath<String>) -> Result<Json<Vec<SpiderEntry>>, ApiError> {
    blocking(move || Ok(Json(analytics::build_spider(&state.store, &project)?))).await
}
