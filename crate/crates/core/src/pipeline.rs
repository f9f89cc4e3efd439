//! Shared plumbing for the phase pipelines: the error type and the
//! call-parse-retry step.

use crate::artifacts::ArtifactError;
use crate::codec::CodecError;
use crate::gateway::{ChatExchange, Gateway, GatewayError, GenerationSettings};
use crate::jobs::{Cancelled, JobEnd, RunContext};
use crate::phase::Phase;
use crate::prompts::{PromptError, SYSTEM_MESSAGE};
use crate::store::{DocId, StoreError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("no documents selected")]
    EmptySelection,
    #[error("no code tables supplied")]
    NoTables,
    #[error("code table `{0}` was already folded into the codebook")]
    StaleSnapshot(String),
    #[error("no reduction has been run for this project")]
    NoReductionYet,
    #[error("no unique codebook snapshot for step {0}")]
    UnknownSnapshot(u32),
    #[error("no code table named `{0}`")]
    UnknownCodeTable(String),
    #[error("the codebook is empty")]
    EmptyCodebook,
    #[error("template `{name}` belongs to phase {actual}, expected {expected}")]
    WrongPhase { name: String, expected: Phase, actual: Phase },
    #[error("coding {doc_id} failed: {detail}")]
    DocumentCodingFailed { doc_id: DocId, detail: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("job cancelled")]
    Cancelled,
}

impl From<Cancelled> for PipelineError {
    fn from(_: Cancelled) -> Self {
        PipelineError::Cancelled
    }
}

impl PipelineError {
    /// Errors that make every further call pointless, so the whole job stops.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            PipelineError::Gateway(
                GatewayError::AuthFailed { .. } | GatewayError::ProviderUnreachable { .. } | GatewayError::InvalidSettings(_)
            ) | PipelineError::Cancelled
                | PipelineError::Store(_)
        )
    }

    /// Maps a pipeline result onto a job outcome.
    pub fn into_job_end<T: serde::Serialize>(result: Result<T, PipelineError>) -> JobEnd {
        match result {
            Ok(summary) => JobEnd::Finished(serde_json::to_value(summary).unwrap_or(serde_json::Value::Null)),
            Err(PipelineError::Cancelled) => JobEnd::Cancelled,
            Err(e) => JobEnd::Failed(e.to_string()),
        }
    }
}

pub(crate) fn expect_phase(template: &crate::prompts::PromptTemplate, phase: Phase) -> Result<(), PipelineError> {
    if template.phase == phase {
        Ok(())
    } else {
        Err(PipelineError::WrongPhase {
            name: template.name.clone(),
            expected: phase,
            actual: template.phase,
        })
    }
}

/// A parsed reply together with the exchanges that produced it.
#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub value: T,
    pub exchanges: Vec<ChatExchange>,
}

/// Sends `user_text`, parses the reply, and on a codec error re-sends once
/// with the problem appended. Cancellation is checked before every call.
pub async fn call_and_parse<T>(
    gateway: &Gateway,
    settings: &GenerationSettings,
    ctx: &RunContext,
    label: &str,
    user_text: &str,
    parse: impl Fn(&str) -> Result<T, CodecError>,
) -> Result<Parsed<T>, PipelineError> {
    ctx.check_cancelled()?;
    let first = gateway.complete_chat(settings, SYSTEM_MESSAGE, user_text).await?;
    log_exchange(ctx, label, &first);
    let problem = match parse(&first.raw_response) {
        Ok(value) => {
            return Ok(Parsed {
                value,
                exchanges: vec![first],
            })
        }
        Err(e) => e,
    };

    ctx.warn(format!("{label}: unusable reply ({problem}); retrying once with a correction"));
    ctx.check_cancelled()?;
    let corrected = format!("{user_text}\n\n{}", problem.corrective_instruction());
    let second = gateway.complete_chat(settings, SYSTEM_MESSAGE, &corrected).await?;
    log_exchange(ctx, label, &second);
    let value = parse(&second.raw_response)?;
    Ok(Parsed {
        value,
        exchanges: vec![first, second],
    })
}

fn log_exchange(ctx: &RunContext, label: &str, exchange: &ChatExchange) {
    ctx.info(format!(
        "{label}: {} replied in {} ms ({} in / {} out tokens, {} retries)",
        exchange.model_id,
        exchange.latency.as_millis(),
        exchange.token_usage.input,
        exchange.token_usage.output,
        exchange.retries(),
    ));
}
