//! Starting, polling and cancelling phase jobs.

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::Value;
use uuid::Uuid;

use thematic_core::coding::{self, CodeTable};
use thematic_core::gateway::GenerationSettings;
use thematic_core::jobs::Job;
use thematic_core::pipeline::PipelineError;
use thematic_core::prompts::{presets, PromptTemplate};
use thematic_core::reduction::{self, ReductionMode, ReductionOptions};
use thematic_core::store::DocId;
use thematic_core::themes::{self, ThemeOptions};
use thematic_core::Phase;

use super::blocking;
use crate::error::{ApiError, ApiJson, ApiPath};
use crate::state::AppState;

pub(super) fn routes() -> Router<AppState> {
    Router::new()
        .route("/projects/{project}/jobs", get(list_jobs))
        .route("/projects/{project}/jobs/{phase}", post(start_job))
        .route("/jobs/{job_id}", get(get_job))
        .route("/jobs/{job_id}/cancel", post(cancel_job))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SettingsBody {
    model_id: String,
    /// Falls back to the template's default, then 0.
    temperature: Option<f64>,
    top_p: Option<f64>,
    max_output_tokens: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptChoice {
    /// Template name; the phase's first preset when absent.
    name: Option<String>,
    /// Replaces the template body for this run only.
    body: Option<String>,
}

#[derive(Debug, Deserialize)]
struct StartJob {
    settings: SettingsBody,
    #[serde(default)]
    prompt: PromptChoice,
    #[serde(flatten)]
    work: WorkBody,
}

/// The phase-specific part of a job request.
#[derive(Debug, Default, Deserialize)]
struct WorkBody {
    /// Initial coding: documents to code; the project's selection when absent.
    documents: Option<Vec<DocId>>,
    /// Initial coding: documents coded concurrently.
    parallelism: Option<usize>,
    /// Reduction: code-table file names in processing order. Automatic mode
    /// defaults to all tables, incremental mode to the next unprocessed one.
    tables: Option<Vec<String>>,
    /// Reduction or theme options, depending on the phase.
    #[serde(default)]
    options: Option<Value>,
    /// Themes: codebook snapshot step; the latest when absent.
    step: Option<u32>,
}

fn parse_options<T: serde::de::DeserializeOwned + Default>(options: Option<Value>) -> Result<T, ApiError> {
    match options {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v).map_err(|e| {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_options", e.to_string())
        }),
    }
}

fn resolve_template(state: &AppState, phase: Phase, choice: PromptChoice) -> Result<PromptTemplate, ApiError> {
    let base = match choice.name {
        Some(name) => state.prompts.get(phase, &name)?,
        None => presets(phase).into_iter().next().expect("every phase has a preset"),
    };
    match choice.body {
        Some(body) => {
            let mut template = PromptTemplate::ephemeral(phase, base.name.clone(), body)?;
            template.defaults = base.defaults;
            Ok(template)
        }
        None => Ok(base),
    }
}

fn resolve_settings(body: SettingsBody, template: &PromptTemplate) -> Result<GenerationSettings, ApiError> {
    let mut settings = GenerationSettings::for_model(body.model_id);
    if let Some(d) = template.defaults {
        settings.temperature = d.temperature;
        settings.top_p = d.top_p;
    }
    settings.temperature = body.temperature.unwrap_or(settings.temperature);
    settings.top_p = body.top_p.unwrap_or(settings.top_p);
    settings.max_output_tokens = body.max_output_tokens.unwrap_or(settings.max_output_tokens);
    settings.validate()?;
    Ok(settings)
}

/// Code tables not yet folded into the current codebook, in file-name order.
pub(crate) fn pending_tables(state: &AppState, project: &str) -> Result<(Vec<String>, Vec<CodeTable>), PipelineError> {
    let folded = reduction::load_state(&state.store, project)?.map(|b| b.folded_tables).unwrap_or_default();
    let pending = coding::list_code_tables(&state.store, project)?
        .into_iter()
        .filter(|t| !folded.contains(&t.artifact_name()))
        .collect();
    Ok((folded, pending))
}

/// Everything a job needs, checked before the job is queued so that bad
/// requests fail synchronously.
enum Plan {
    Coding { documents: Vec<DocId>, parallelism: usize },
    Reduction { tables: Vec<CodeTable>, options: ReductionOptions },
    Themes { step: Option<u32>, options: ThemeOptions },
}

fn plan(state: &AppState, project: &str, phase: Phase, body: WorkBody) -> Result<Plan, ApiError> {
    state.store.project(project)?;
    match phase {
        Phase::InitialCoding => {
            let documents = match body.documents {
                Some(ids) => ids,
                None => state
                    .store
                    .documents(project)?
                    .into_iter()
                    .filter(|d| d.selected)
                    .map(|d| d.doc_id)
                    .collect(),
            };
            coding::resolve_selection(&state.store, project, &documents)?;
            let parallelism = body.parallelism.unwrap_or(1);
            if parallelism == 0 {
                return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_options", "parallelism must be at least 1"));
            }
            Ok(Plan::Coding { documents, parallelism })
        }
        Phase::Reduction => {
            let options: ReductionOptions = parse_options(body.options)?;
            let tables = match (body.tables, options.mode) {
                (Some(names), _) => names
                    .iter()
                    .map(|n| coding::load_code_table(&state.store, project, n))
                    .collect::<Result<Vec<_>, _>>()?,
                (None, ReductionMode::Automatic) => coding::list_code_tables(&state.store, project)?,
                (None, ReductionMode::Incremental) => pending_tables(state, project)?.1.into_iter().take(1).collect(),
            };
            if tables.is_empty() {
                return Err(PipelineError::NoTables.into());
            }
            if options.mode == ReductionMode::Incremental {
                let (folded, _) = pending_tables(state, project)?;
                if let Some(stale) = tables.iter().find(|t| folded.contains(&t.artifact_name())) {
                    return Err(PipelineError::StaleSnapshot(stale.artifact_name()).into());
                }
            }
            Ok(Plan::Reduction { tables, options })
        }
        Phase::Themes => {
            let options: ThemeOptions = parse_options(body.options)?;
            let candidates = themes::list_candidate_codebooks(&state.store, project)?;
            if let Some(step) = body.step {
                if !candidates.iter().any(|c| c.step == step) {
                    return Err(PipelineError::UnknownSnapshot(step).into());
                }
            }
            Ok(Plan::Themes { step: body.step, options })
        }
    }
}

async fn start_job(
    State(state): State<AppState>,
    ApiPath((project, phase)): ApiPath<(String, Phase)>,
    ApiJson(body): ApiJson<StartJob>,
) -> Result<(StatusCode, Json<Job>), ApiError> {
    let template = resolve_template(&state, phase, body.prompt)?;
    let settings = resolve_settings(body.settings, &template)?;
    let work = body.work;
    let (state, project, plan) = blocking(move || {
        let plan = plan(&state, &project, phase, work)?;
        Ok((state, project, plan))
    })
    .await?;
    let gateway = state.gateway_for(&settings.model_id)?;
    let store = state.store.clone();
    let name = project.clone();
    let job = state.jobs.start(&project, phase, move |ctx| async move {
        match plan {
            Plan::Coding { documents, parallelism } => PipelineError::into_job_end(
                coding::run_initial_coding(&store, &gateway, &ctx, &name, &documents, &template, &settings, parallelism).await,
            ),
            Plan::Reduction { tables, options } => PipelineError::into_job_end(
                reduction::run_reduction(&store, &gateway, &ctx, &name, &tables, &options, &template, &settings).await,
            ),
            Plan::Themes { step, options } => PipelineError::into_job_end(
                themes::run_themes(&store, &gateway, &ctx, &name, step, &options, &template, &settings).await,
            ),
        }
    })?;
    tracing::info!(job_id = %job.job_id, project = %project, phase = %phase, "job queued");
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn get_job(State(state): State<AppState>, ApiPath(job_id): ApiPath<Uuid>) -> Result<Json<Job>, ApiError> {
    Ok(Json(state.jobs.get(job_id)?))
}

async fn list_jobs(State(state): State<AppState>, ApiPath(project): ApiPath<String>) -> Result<Json<Vec<Job>>, ApiError> {
    Ok(Json(state.jobs.list(Some(&project))))
}

async fn cancel_job(State(state): State<AppState>, ApiPath(job_id): ApiPath<Uuid>) -> Result<Json<Job>, ApiError> {
    Ok(Json(state.jobs.cancel(job_id)?))
}
