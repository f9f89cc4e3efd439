//! Initial coding: one LLM pass per selected document, one code table each.

use std::sync::atomic::{AtomicBool, Ordering};

use chrono::{DateTime, Utc};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, CodeRow};
use crate::codec::{self, CodecError, ParsedInitialCodes};
use crate::gateway::{Gateway, GatewayError, GenerationSettings};
use crate::jobs::RunContext;
use crate::phase::Phase;
use crate::pipeline::{call_and_parse, expect_phase, PipelineError};
use crate::prompts::{render_prompt, PromptPayload, PromptTemplate, Slot};
use crate::store::{DocId, DocumentInfo, ProjectStore, SourceDocument};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialCode {
    pub code_name: String,
    pub description: String,
    pub quote: String,
    pub source_doc: DocId,
    pub row_index: usize,
    /// Whether the quote occurs in the source once whitespace is normalized.
    pub quote_verbatim: bool,
}

/// Codes extracted from one document, with the run that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeTable {
    pub source_doc: DocId,
    pub source_filename: String,
    pub codes: Vec<InitialCode>,
    pub model_id: String,
    pub prompt_name: String,
    pub temperature: f64,
    pub top_p: f64,
    pub produced_at: DateTime<Utc>,
    /// Number of chunks the document was split into (1 when coded whole).
    pub chunks: usize,
    pub raw_responses: Vec<String>,
}

impl CodeTable {
    pub fn artifact_name(&self) -> String {
        artifacts::code_table_filename(crate::store::file_stem(&self.source_filename))
    }

    pub fn rows(&self) -> Vec<CodeRow> {
        self.codes
            .iter()
            .map(|c| CodeRow {
                code_name: c.code_name.clone(),
                description: c.description.clone(),
                quote: c.quote.clone(),
            })
            .collect()
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn quote_is_verbatim(source: &str, quote: &str) -> bool {
    let quote = normalize_ws(quote);
    !quote.is_empty() && normalize_ws(source).contains(&quote)
}

/// Splits `text` at blank lines into at most `n` contiguous chunks of
/// similar length.
pub fn split_paragraphs(text: &str, n: usize) -> Vec<String> {
    let paragraphs: Vec<&str> = text
        .split("\n\n")
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect();
    if n <= 1 || paragraphs.len() <= 1 {
        return vec![paragraphs.join("\n\n")];
    }
    let total: usize = paragraphs.iter().map(|p| p.len()).sum();
    let target = total.div_ceil(n);
    let mut chunks: Vec<Vec<&str>> = vec![Vec::new()];
    let mut size = 0;
    for (i, p) in paragraphs.iter().enumerate() {
        let remaining_paragraphs = paragraphs.len() - i;
        let remaining_chunks = n - chunks.len();
        let current = chunks.last_mut().unwrap();
        let must_split = remaining_paragraphs <= remaining_chunks;
        if !current.is_empty() && remaining_chunks > 0 && (size + p.len() > target || must_split) {
            chunks.push(vec![p]);
            size = p.len();
        } else {
            current.push(p);
            size += p.len();
        }
    }
    chunks.into_iter().map(|c| c.join("\n\n")).collect()
}

/// Parses an initial-coding reply and additionally requires every field to
/// be non-empty.
fn parse_codes(raw: &str) -> Result<ParsedInitialCodes, CodecError> {
    let parsed = codec::parse_initial_codes(raw)?;
    for (i, code) in parsed.codes.iter().enumerate() {
        for (key, value) in [("description", &code.description), ("quote", &code.quote)] {
            if value.is_empty() {
                return Err(CodecError::SchemaViolation(format!("final_codes[{i}].{key}: must not be empty")));
            }
        }
    }
    Ok(parsed)
}

/// Codes one document and persists `<stem>_codes.csv` plus its metadata.
///
/// If the provider reports the prompt as too long, the document is split
/// at paragraph boundaries into the fewest chunks that fit and the chunk
/// tables are concatenated.
pub async fn code_document(
    store: &ProjectStore,
    gateway: &Gateway,
    ctx: &RunContext,
    project: &str,
    doc: &SourceDocument,
    template: &PromptTemplate,
    settings: &GenerationSettings,
) -> Result<CodeTable, PipelineError> {
    expect_phase(template, Phase::InitialCoding)?;
    let doc_id = doc.doc_id();
    let paragraph_count = doc.text.split("\n\n").filter(|p| !p.trim().is_empty()).count().max(1);

    let mut n = 1;
    let (codes, raw_responses) = loop {
        let chunks = if n == 1 { vec![doc.text.clone()] } else { split_paragraphs(&doc.text, n) };
        match code_chunks(gateway, settings, ctx, doc, template, &chunks).await {
            Ok(result) => break result,
            Err(PipelineError::Gateway(GatewayError::ContextTooLong(detail))) => {
                if n >= paragraph_count {
                    return Err(PipelineError::DocumentCodingFailed {
                        doc_id,
                        detail: format!("too long for the model even split into paragraphs: {detail}"),
                    });
                }
                n += 1;
                ctx.warn(format!("{}: too long for the model context; splitting into {n} chunks", doc.filename()));
            }
            Err(PipelineError::Codec(e)) => {
                return Err(PipelineError::DocumentCodingFailed {
                    doc_id,
                    detail: e.to_string(),
                })
            }
            Err(e) => return Err(e),
        }
    };

    let codes = codes
        .into_iter()
        .enumerate()
        .map(|(row_index, c)| InitialCode {
            quote_verbatim: quote_is_verbatim(&doc.text, &c.quote),
            code_name: c.code_name,
            description: c.description,
            quote: c.quote,
            source_doc: doc_id,
            row_index,
        })
        .collect::<Vec<_>>();
    let table = CodeTable {
        source_doc: doc_id,
        source_filename: doc.filename().to_string(),
        codes,
        model_id: settings.model_id.clone(),
        prompt_name: template.name.clone(),
        temperature: settings.temperature,
        top_p: settings.top_p,
        produced_at: Utc::now(),
        chunks: n,
        raw_responses,
    };

    let name = table.artifact_name();
    if store.artifact_exists(project, Phase::InitialCoding, &name)? {
        ctx.info(format!("rerun: overwriting {name}"));
    }
    if table.codes.is_empty() {
        ctx.warn(format!("{name}: the model returned no codes"));
    }
    let paraphrased = table.codes.iter().filter(|c| !c.quote_verbatim).count();
    if paraphrased > 0 {
        ctx.warn(format!("{name}: {paraphrased} quote(s) not found verbatim in the source"));
    }
    store.write_artifact(project, Phase::InitialCoding, &name, &artifacts::write_code_table(&table.rows()))?;
    store.write_meta(project, Phase::InitialCoding, &meta_name(&name), &serde_json::to_vec_pretty(&table).expect("serializable"))?;
    Ok(table)
}

async fn code_chunks(
    gateway: &Gateway,
    settings: &GenerationSettings,
    ctx: &RunContext,
    doc: &SourceDocument,
    template: &PromptTemplate,
    chunks: &[String],
) -> Result<(Vec<codec::CodeEntry>, Vec<String>), PipelineError> {
    let mut codes = Vec::new();
    let mut raw = Vec::new();
    for (i, chunk) in chunks.iter().enumerate() {
        let prompt = render_prompt(template, &PromptPayload::new().with(Slot::Document, chunk.as_str()))?;
        let label = if chunks.len() == 1 {
            doc.filename().to_string()
        } else {
            format!("{} (chunk {}/{})", doc.filename(), i + 1, chunks.len())
        };
        let parsed = call_and_parse(gateway, settings, ctx, &label, &prompt, parse_codes).await?;
        raw.extend(parsed.exchanges.into_iter().map(|e| e.raw_response));
        codes.extend(parsed.value.codes);
    }
    Ok((codes, raw))
}

fn meta_name(csv_name: &str) -> String {
    format!("{}.json", csv_name.trim_end_matches(".csv"))
}

/// Loads a persisted code table by its CSV file name.
pub fn load_code_table(store: &ProjectStore, project: &str, csv_name: &str) -> Result<CodeTable, PipelineError> {
    match store.read_meta(project, Phase::InitialCoding, &meta_name(csv_name))? {
        Some(bytes) if store.artifact_exists(project, Phase::InitialCoding, csv_name)? => Ok(serde_json::from_slice(&bytes)
            .map_err(|e| crate::store::StoreError::CorruptMetadata(e.to_string()))?),
        _ => Err(PipelineError::UnknownCodeTable(csv_name.to_string())),
    }
}

/// All code tables of a project in file-name order.
pub fn list_code_tables(store: &ProjectStore, project: &str) -> Result<Vec<CodeTable>, PipelineError> {
    let mut names: Vec<String> = store
        .list_phase_artifacts(project, Phase::InitialCoding)?
        .into_iter()
        .filter_map(|a| a.path.file_name().map(|n| n.to_string_lossy().into_owned()))
        .filter(|n| n.ends_with("_codes.csv"))
        .collect();
    names.sort();
    names.iter().map(|n| load_code_table(store, project, n)).collect()
}

/// Resolves a selection to documents in processing (file-name) order.
pub fn resolve_selection(store: &ProjectStore, project: &str, selection: &[DocId]) -> Result<Vec<DocumentInfo>, PipelineError> {
    if selection.is_empty() {
        return Err(PipelineError::EmptySelection);
    }
    let docs = store.documents(project)?;
    let mut chosen = Vec::new();
    for id in selection {
        match docs.iter().find(|d| d.doc_id == *id) {
            Some(d) if !chosen.iter().any(|c: &DocumentInfo| c.doc_id == *id) => chosen.push(d.clone()),
            Some(_) => {}
            None => return Err(crate::store::StoreError::UnknownDocument(*id).into()),
        }
    }
    chosen.sort_by(|a, b| a.filename.cmp(&b.filename));
    Ok(chosen)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CodingSummary {
    pub artifacts: Vec<String>,
    pub failed: Vec<FailedDocument>,
    pub total_codes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedDocument {
    pub doc_id: DocId,
    pub filename: String,
    pub detail: String,
}

/// Codes every selected document, in file-name order, `parallelism`
/// documents at a time. A failing document is logged and skipped; only
/// provider-wide failures and cancellation stop the run.
#[allow(clippy::too_many_arguments)]
pub async fn run_initial_coding(
    store: &ProjectStore,
    gateway: &Gateway,
    ctx: &RunContext,
    project: &str,
    selection: &[DocId],
    template: &PromptTemplate,
    settings: &GenerationSettings,
    parallelism: usize,
) -> Result<CodingSummary, PipelineError> {
    expect_phase(template, Phase::InitialCoding)?;
    settings.validate()?;
    let docs = resolve_selection(store, project, selection)?;
    ctx.set_total(docs.len() as u64);
    ctx.info(format!(
        "coding {} document(s) with {} using prompt `{}`",
        docs.len(),
        settings.model_id,
        template.name
    ));

    let abort = AtomicBool::new(false);
    let abort = &abort;
    let results: Vec<(DocumentInfo, Result<CodeTable, PipelineError>)> = stream::iter(docs)
        .map(|info| async move {
            if abort.load(Ordering::SeqCst) {
                return (info, Err(PipelineError::Cancelled));
            }
            let result = match store.document(project, info.doc_id) {
                Ok(doc) => code_document(store, gateway, ctx, project, &doc, template, settings).await,
                Err(e) => Err(e.into()),
            };
            match &result {
                Ok(table) => ctx.info(format!("{}: {} code(s) -> {}", info.filename, table.codes.len(), table.artifact_name())),
                Err(e) if !e.is_fatal() => ctx.error(format!("{}: {e}", info.filename)),
                Err(_) => abort.store(true, Ordering::SeqCst),
            }
            if !matches!(result, Err(PipelineError::Cancelled)) {
                ctx.advance();
            }
            (info, result)
        })
        .buffered(parallelism.max(1))
        .collect()
        .await;

    let mut summary = CodingSummary::default();
    let mut fatal = None;
    for (info, result) in results {
        match result {
            Ok(table) => {
                summary.total_codes += table.codes.len();
                summary.artifacts.push(table.artifact_name());
            }
            Err(PipelineError::Cancelled) => {
                fatal.get_or_insert(PipelineError::Cancelled);
            }
            Err(e) if e.is_fatal() => {
                // a provider-wide failure outranks the skips it caused
                if matches!(fatal, None | Some(PipelineError::Cancelled)) {
                    fatal = Some(e);
                }
            }
            Err(e) => summary.failed.push(FailedDocument {
                doc_id: info.doc_id,
                filename: info.filename,
                detail: e.to_string(),
            }),
        }
    }
    match fatal {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockOutcome, MockProvider, RetryPolicy};
    use crate::prompts;
    use std::sync::Arc;

    fn setup() -> (tempfile::TempDir, ProjectStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = ProjectStore::open(dir.path()).unwrap();
        store.create_project("p").unwrap();
        (dir, store)
    }

    fn codes_json(n: usize, quote: &str) -> String {
        let codes: Vec<_> = (0..n)
            .map(|i| serde_json::json!({"code_name": format!("code {i}"), "description": "desc", "quote": quote}))
            .collect();
        serde_json::json!({ "final_codes": codes }).to_string()
    }

    fn template() -> PromptTemplate {
        prompts::presets(Phase::InitialCoding).remove(0)
    }

    fn gw(mock: &Arc<MockProvider>) -> Gateway {
        Gateway::new(mock.clone()).with_retry(RetryPolicy::immediate(2))
    }

    #[test]
    fn verbatim_check_normalizes_whitespace() {
        assert!(quote_is_verbatim("I  trust\nthe nurses a lot", "trust the   nurses"));
        assert!(!quote_is_verbatim("I trust the nurses", "trusted the nurses"));
        assert!(!quote_is_verbatim("abc", "  "));
    }

    #[test]
    fn paragraph_split_is_balanced_and_lossless() {
        let text = "aaaa\n\nbbbb\n\ncccc\n\ndddd";
        assert_eq!(split_paragraphs(text, 2), vec!["aaaa\n\nbbbb", "cccc\n\ndddd"]);
        assert_eq!(split_paragraphs(text, 4).len(), 4);
        assert_eq!(split_paragraphs(text, 9).len(), 4);
        assert_eq!(split_paragraphs(text, 3).join("\n\n"), text);
    }

    #[tokio::test]
    async fn five_codes_persisted() {
        let (_d, store) = setup();
        let doc = store.ingest_document("p", "interview_01.txt", b"I trust the nurses.").unwrap();
        let mock = Arc::new(MockProvider::new());
        mock.push(MockOutcome::text(format!("```json\n{}\n```", codes_json(5, "trust the nurses"))));
        let ctx = RunContext::detached("p", Phase::InitialCoding);
        let table = code_document(&store, &gw(&mock), &ctx, "p", &doc, &template(), &GenerationSettings::default())
            .await
            .unwrap();
        assert_eq!(table.codes.len(), 5);
        assert!(table.codes.iter().all(|c| c.quote_verbatim));
        assert_eq!(table.codes[4].row_index, 4);
        let csv = store.read_artifact("p", Phase::InitialCoding, "interview_01_codes.csv").unwrap();
        assert!(csv.starts_with(b"code_name,description,quote\n"));
        assert_eq!(artifacts::read_code_table(&csv).unwrap().len(), 5);
        let reloaded = load_code_table(&store, "p", "interview_01_codes.csv").unwrap();
        assert_eq!(reloaded, table);
        let sent = &mock.calls()[0];
        assert!(sent.user.contains("I trust the nurses."));
        assert_eq!(sent.system, prompts::SYSTEM_MESSAGE);
    }

    #[tokio::test]
    async fn empty_code_list_is_persisted() {
        let (_d, store) = setup();
        let doc = store.ingest_document("p", "a.txt", b"text").unwrap();
        let mock = Arc::new(MockProvider::new().with_fallback(MockOutcome::text("{\"final_codes\":[]}")));
        let ctx = RunContext::detached("p", Phase::InitialCoding);
        let table = code_document(&store, &gw(&mock), &ctx, "p", &doc, &template(), &GenerationSettings::default())
            .await
            .unwrap();
        assert!(table.codes.is_empty());
        assert_eq!(store.read_artifact("p", Phase::InitialCoding, "a_codes.csv").unwrap(), b"code_name,description,quote\n");
        assert!(ctx.snapshot().messages.iter().any(|m| m.message.contains("no codes")));
    }

    #[tokio::test]
    async fn prose_twice_fails_the_document() {
        let (_d, store) = setup();
        let doc = store.ingest_document("p", "a.txt", b"text").unwrap();
        let mock = Arc::new(MockProvider::new().with_fallback(MockOutcome::text("Sorry, I cannot help.")));
        let ctx = RunContext::detached("p", Phase::InitialCoding);
        let err = code_document(&store, &gw(&mock), &ctx, "p", &doc, &template(), &GenerationSettings::default())
            .await
            .unwrap_err();
        assert!(matches!(err, PipelineError::DocumentCodingFailed { doc_id, .. } if doc_id == doc.doc_id()));
        assert_eq!(mock.call_count(), 2);
        assert!(!store.artifact_exists("p", Phase::InitialCoding, "a_codes.csv").unwrap());
    }

    #[tokio::test]
    async fn paraphrased_quote_is_flagged_not_altered() {
        let (_d, store) = setup();
        let doc = store.ingest_document("p", "a.txt", b"The wait was painful.").unwrap();
        let mock = Arc::new(MockProvider::new().with_fallback(MockOutcome::text(codes_json(1, "waiting hurt"))));
        let ctx = RunContext::detached("p", Phase::InitialCoding);
        let table = code_document(&store, &gw(&mock), &ctx, "p", &doc, &template(), &GenerationSettings::default())
            .await
            .unwrap();
        assert_eq!(table.codes[0].quote, "waiting hurt");
        assert!(!table.codes[0].quote_verbatim);
    }

    #[tokio::test]
    async fn context_overflow_splits_into_fewest_chunks() {
        let (_d, store) = setup();
        let text = "para one\n\npara two\n\npara three\n\npara four";
        let doc = store.ingest_document("p", "long.txt", text.as_bytes()).unwrap();
        // anything carrying more than two paragraphs is too long
        let mock = Arc::new(MockProvider::new().with_responder(|req| {
            if req.user.matches("para ").count() > 2 {
                MockOutcome::ContextTooLong
            } else {
                let first = req.user.split("para ").nth(1).unwrap().split_whitespace().next().unwrap().to_string();
                MockOutcome::text(codes_json(1, &format!("para {first}")))
            }
        }));
        let ctx = RunContext::detached("p", Phase::InitialCoding);
        let table = code_document(&store, &gw(&mock), &ctx, "p", &doc, &template(), &GenerationSettings::default())
            .await
            .unwrap();
        assert_eq!(table.chunks, 2);
        let quotes: Vec<_> = table.codes.iter().map(|c| c.quote.as_str()).collect();
        assert_eq!(quotes, ["para one", "para three"]);
        assert_eq!(table.codes[1].row_index, 1);
    }

    #[tokio::test]
    async fn run_orders_by_filename_and_reports_partial_failure() {
        let (_d, store) = setup();
        let c = store.ingest_document("p", "c.txt", b"gamma").unwrap();
        let a = store.ingest_document("p", "a.txt", b"alpha").unwrap();
        let b = store.ingest_document("p", "b.txt", b"beta broken").unwrap();
        let mock = Arc::new(MockProvider::new().with_responder(|req| {
            if req.user.contains("broken") {
                MockOutcome::text("not json")
            } else {
                MockOutcome::text(codes_json(2, "x"))
            }
        }));
        let ctx = RunContext::detached("p", Phase::InitialCoding);
        let summary = run_initial_coding(
            &store,
            &gw(&mock),
            &ctx,
            "p",
            &[c.doc_id(), b.doc_id(), a.doc_id()],
            &template(),
            &GenerationSettings::default(),
            1,
        )
        .await
        .unwrap();
        assert_eq!(summary.artifacts, ["a_codes.csv", "c_codes.csv"]);
        assert_eq!(summary.failed.len(), 1);
        assert_eq!(summary.failed[0].filename, "b.txt");
        assert_eq!(ctx.error_count(), 1);
        let snap = ctx.snapshot();
        assert_eq!((snap.progress.done, snap.progress.total), (3, 3));
        let order: Vec<_> = mock.calls().iter().map(|r| r.user.clone()).collect();
        assert!(order[0].contains("alpha") && order[1].contains("beta") && order[3].contains("gamma"));
    }

    #[tokio::test]
    async fn empty_selection_makes_no_call() {
        let (_d, store) = setup();
        let mock = Arc::new(MockProvider::new());
        let ctx = RunContext::detached("p", Phase::InitialCoding);
        let err = run_initial_coding(&store, &gw(&mock), &ctx, "p", &[], &template(), &GenerationSettings::default(), 1)
            .await
            .unwrap_err();
        assert_eq!(err, PipelineError::EmptySelection);
        assert_eq!(mock.call_count(), 0);
    }

    #[tokio::test]
    async fn rerun_overwrites_and_is_logged() {
        let (_d, store) = setup();
        let a = store.ingest_document("p", "a.txt", b"alpha").unwrap();
        let mock = Arc::new(MockProvider::new());
        mock.push(MockOutcome::text(codes_json(1, "alpha")));
        mock.push(MockOutcome::text(codes_json(3, "alpha")));
        for _ in 0..2 {
            let ctx = RunContext::detached("p", Phase::InitialCoding);
            run_initial_coding(&store, &gw(&mock), &ctx, "p", &[a.doc_id()], &template(), &GenerationSettings::default(), 1)
                .await
                .unwrap();
        }
        assert_eq!(store.list_phase_artifacts("p", Phase::InitialCoding).unwrap().len(), 1);
        assert_eq!(list_code_tables(&store, "p").unwrap()[0].codes.len(), 3);
    }

    #[tokio::test]
    async fn auth_failure_fails_the_run() {
        let (_d, store) = setup();
        let a = store.ingest_document("p", "a.txt", b"alpha").unwrap();
        let b = store.ingest_document("p", "b.txt", b"beta").unwrap();
        let mock = Arc::new(MockProvider::new().with_fallback(MockOutcome::status(401)));
        let ctx = RunContext::detached("p", Phase::InitialCoding);
        let err = run_initial_coding(&store, &gw(&mock), &ctx, "p", &[a.doc_id(), b.doc_id()], &template(), &GenerationSettings::default(), 1)
            .await
            .unwrap_err();
        assert!(matches!(err, PipelineError::Gateway(GatewayError::AuthFailed { status: 401 })));
    }
}
