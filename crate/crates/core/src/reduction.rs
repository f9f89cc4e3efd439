//! Codebook reduction: folding initial codes into a unique codebook.
//!
//! Each candidate is compared with the whole unique list in one LLM call.
//! A `true` decision merges the candidate into the named code (quote and
//! member appended, name and description replaced); `false` appends it as
//! a new unique code. The fold order is table order, then row order.

use std::collections::HashSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::analytics::SaturationPoint;
use crate::artifacts::{self, SnapshotRow, SATURATION_FILE};
use crate::codec::{self, ParsedReductionDecision};
use crate::coding::{CodeTable, InitialCode};
use crate::gateway::{Gateway, GatewayError, GenerationSettings};
use crate::jobs::RunContext;
use crate::phase::Phase;
use crate::pipeline::{call_and_parse, expect_phase, PipelineError};
use crate::prompts::{render_prompt, PromptPayload, PromptTemplate, Slot};
use crate::store::{DocId, ProjectStore, StoreError};

const STATE_FILE: &str = "codebook_state.json";
pub const DEFAULT_TOP_K: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionMode {
    #[default]
    Automatic,
    Incremental,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionOptions {
    #[serde(default)]
    pub include_quotes: bool,
    #[serde(default)]
    pub include_explanation: bool,
    #[serde(default)]
    pub mode: ReductionMode,
    /// Size of the shortlist used when the full codebook overflows the
    /// model context.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

impl Default for ReductionOptions {
    fn default() -> Self {
        Self {
            include_quotes: false,
            include_explanation: false,
            mode: ReductionMode::Automatic,
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// One initial code folded into a unique code.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Member {
    pub source_doc: DocId,
    pub row_index: usize,
    pub code_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuoteRef {
    pub quote: String,
    pub source_doc: DocId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniqueCode {
    pub uid: String,
    pub name: String,
    pub description: String,
    /// One entry per member, in member order.
    pub quotes: Vec<QuoteRef>,
    pub members: Vec<Member>,
    pub merge_explanations: Vec<String>,
    pub created_step: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Codebook {
    pub unique: Vec<UniqueCode>,
    pub total_count: u64,
    pub step_index: u32,
    next_uid: u64,
    /// Code tables already folded, by artifact name.
    pub folded_tables: Vec<String>,
    pub series: Vec<SaturationPoint>,
}

impl Codebook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn unique_count(&self) -> u64 {
        self.unique.len() as u64
    }

    pub fn get(&self, uid: &str) -> Option<&UniqueCode> {
        self.unique.iter().find(|c| c.uid == uid)
    }

    fn promote(&mut self, candidate: &InitialCode) -> String {
        self.next_uid += 1;
        let uid = format!("uc-{:04}", self.next_uid);
        self.unique.push(UniqueCode {
            uid: uid.clone(),
            name: candidate.code_name.clone(),
            description: candidate.description.clone(),
            quotes: vec![quote_of(candidate)],
            members: vec![member_of(candidate)],
            merge_explanations: Vec::new(),
            created_step: self.step_index + 1,
        });
        self.total_count += 1;
        uid
    }

    fn merge(&mut self, index: usize, candidate: &InitialCode, decision: &ParsedReductionDecision, opts: &ReductionOptions) {
        let code = &mut self.unique[index];
        code.quotes.push(quote_of(candidate));
        code.members.push(member_of(candidate));
        if let Some(name) = &decision.merged_name {
            code.name = name.clone();
        }
        if let Some(description) = &decision.merged_description {
            code.description = description.clone();
        }
        if opts.include_explanation {
            if let Some(explanation) = &decision.merge_explanation {
                code.merge_explanations.push(explanation.clone());
            }
        }
        self.total_count += 1;
    }

    /// Index of the unique code called `name`: exact match first, then
    /// ignoring case and whitespace differences.
    pub fn find_by_name(&self, name: &str) -> Option<usize> {
        self.unique.iter().position(|c| c.name == name).or_else(|| {
            let wanted = fold_name(name);
            self.unique.iter().position(|c| fold_name(&c.name) == wanted)
        })
    }

    pub fn snapshot_rows(&self) -> Vec<SnapshotRow> {
        self.unique
            .iter()
            .map(|c| SnapshotRow {
                name: c.name.clone(),
                description: c.description.clone(),
                quotes: c.quotes.iter().map(|q| q.quote.clone()).collect(),
                member_count: c.members.len(),
                merge_explanations: c.merge_explanations.clone(),
            })
            .collect()
    }

    /// Unique list as sent to the model.
    pub fn render(&self, include_quotes: bool) -> String {
        render_codes(self.unique.iter(), include_quotes)
    }
}

pub(crate) fn render_codes<'a>(codes: impl Iterator<Item = &'a UniqueCode>, include_quotes: bool) -> String {
    let mut out = String::new();
    for c in codes {
        out.push_str(&format!("- {}: {}\n", c.name, c.description));
        if include_quotes {
            for q in &c.quotes {
                out.push_str(&format!("  quote: \"{}\"\n", q.quote));
            }
        }
    }
    out.trim_end().to_string()
}

/// Lower-cased with runs of whitespace collapsed.
pub fn fold_name(name: &str) -> String {
    name.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

fn quote_of(c: &InitialCode) -> QuoteRef {
    QuoteRef {
        quote: c.quote.clone(),
        source_doc: c.source_doc,
    }
}

fn member_of(c: &InitialCode) -> Member {
    Member {
        source_doc: c.source_doc,
        row_index: c.row_index,
        code_name: c.code_name.clone(),
    }
}

fn render_candidate(c: &InitialCode, include_quotes: bool) -> String {
    let mut s = format!("Name: {}\nDescription: {}", c.code_name, c.description);
    if include_quotes {
        s.push_str(&format!("\nQuote: \"{}\"", c.quote));
    }
    s
}

fn tokens(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Indices of the `k` unique codes sharing the most name/description
/// tokens with the candidate; ties keep codebook order.
pub fn top_k_similar(book: &Codebook, candidate: &InitialCode, k: usize) -> Vec<usize> {
    let wanted = tokens(&format!("{} {}", candidate.code_name, candidate.description));
    let mut scored: Vec<(usize, usize)> = book
        .unique
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let have = tokens(&format!("{} {}", c.name, c.description));
            (i, wanted.intersection(&have).count())
        })
        .collect();
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut picked: Vec<usize> = scored.into_iter().take(k.max(1)).map(|(i, _)| i).collect();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum DecisionOutcome {
    /// First code of an empty book; no call made.
    Promoted { uid: String },
    NewUnique { uid: String },
    Merged { uid: String },
    /// `true` naming a code not in the book; appended as new.
    MatchedNameUnknown { uid: String, matched_code_name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub candidate: Member,
    pub outcome: DecisionOutcome,
    /// Compared against a shortlist because the full list overflowed.
    pub degraded: bool,
}

/// Folds one candidate into `book`. On error the book is left unchanged.
#[allow(clippy::too_many_arguments)]
pub async fn reduce_one(
    gateway: &Gateway,
    ctx: &RunContext,
    candidate: &InitialCode,
    book: &mut Codebook,
    opts: &ReductionOptions,
    template: &PromptTemplate,
    settings: &GenerationSettings,
) -> Result<DecisionRecord, PipelineError> {
    expect_phase(template, Phase::Reduction)?;
    let member = member_of(candidate);
    if book.unique.is_empty() {
        let uid = book.promote(candidate);
        return Ok(DecisionRecord {
            candidate: member,
            outcome: DecisionOutcome::Promoted { uid },
            degraded: false,
        });
    }

    let label = format!("{} row {} `{}`", candidate.source_doc, candidate.row_index, candidate.code_name);
    let candidate_text = render_candidate(candidate, opts.include_quotes);
    let full = book.render(opts.include_quotes);
    let prompt = render_prompt(
        template,
        &PromptPayload::new()
            .with(Slot::Candidate, candidate_text.as_str())
            .with(Slot::Codebook, full),
    )?;
    let mut degraded = false;
    let decision = match call_and_parse(gateway, settings, ctx, &label, &prompt, codec::parse_reduction_decision).await {
        Ok(parsed) => parsed.value,
        Err(PipelineError::Gateway(GatewayError::ContextTooLong(_))) if book.unique.len() > opts.top_k.max(1) => {
            let shortlist = top_k_similar(book, candidate, opts.top_k);
            ctx.warn(format!(
                "{label}: codebook too long for the model; comparing against the {} most similar codes",
                shortlist.len()
            ));
            degraded = true;
            let partial = render_codes(shortlist.iter().map(|&i| &book.unique[i]), opts.include_quotes);
            let prompt = render_prompt(
                template,
                &PromptPayload::new()
                    .with(Slot::Candidate, candidate_text.as_str())
                    .with(Slot::Codebook, partial),
            )?;
            call_and_parse(gateway, settings, ctx, &label, &prompt, codec::parse_reduction_decision)
                .await?
                .value
        }
        Err(e) => return Err(e),
    };

    let outcome = if decision.decision {
        let matched = decision.matched_code_name.clone().unwrap_or_default();
        match book.find_by_name(&matched) {
            Some(index) => {
                book.merge(index, candidate, &decision, opts);
                DecisionOutcome::Merged {
                    uid: book.unique[index].uid.clone(),
                }
            }
            None => {
                ctx.warn(format!("{label}: matched code `{matched}` is not in the codebook; kept as a new code"));
                DecisionOutcome::MatchedNameUnknown {
                    uid: book.promote(candidate),
                    matched_code_name: matched,
                }
            }
        }
    } else {
        DecisionOutcome::NewUnique {
            uid: book.promote(candidate),
        }
    };
    Ok(DecisionRecord {
        candidate: member,
        outcome,
        degraded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionSummary {
    pub snapshots: Vec<String>,
    pub total_count: u64,
    pub unique_count: u64,
    pub step_index: u32,
    pub failed_codes: usize,
}

/// Codebook metadata persisted next to each snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub step: u32,
    pub source_table: String,
    pub produced_at: DateTime<Utc>,
    pub options: ReductionOptions,
    pub model_id: String,
    pub prompt_name: String,
    pub codebook: Codebook,
}

fn snapshot_meta_name(step: u32) -> String {
    format!("unique_codebook_{step:03}.json")
}

/// Codebook state after the last completed step, if any.
pub fn load_state(store: &ProjectStore, project: &str) -> Result<Option<Codebook>, PipelineError> {
    match store.read_meta(project, Phase::Reduction, STATE_FILE)? {
        Some(bytes) => Ok(Some(
            serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptMetadata(e.to_string()))?,
        )),
        None => Ok(None),
    }
}

/// The codebook as of snapshot `step`.
pub fn load_snapshot(store: &ProjectStore, project: &str, step: u32) -> Result<SnapshotMeta, PipelineError> {
    let exists = store.artifact_exists(project, Phase::Reduction, &artifacts::snapshot_filename(step))?;
    match store.read_meta(project, Phase::Reduction, &snapshot_meta_name(step))? {
        Some(bytes) if exists => {
            Ok(serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptMetadata(e.to_string()))?)
        }
        _ => Err(PipelineError::UnknownSnapshot(step)),
    }
}

/// Removes all snapshots, the saturation series and the stored state.
pub fn reset(store: &ProjectStore, project: &str) -> Result<(), PipelineError> {
    for artifact in store.list_phase_artifacts(project, Phase::Reduction)? {
        if let Some(name) = artifact.path.file_name().and_then(|n| n.to_str()) {
            if artifacts::parse_snapshot_filename(name).is_some() || name == SATURATION_FILE {
                store.remove_artifact(project, Phase::Reduction, name)?;
            }
        }
    }
    store.clear_meta(project, Phase::Reduction)?;
    Ok(())
}

/// Folds `tables` into the project's codebook, persisting a snapshot and a
/// saturation point after each table.
///
/// Automatic mode starts from an empty codebook (discarding earlier
/// snapshots); incremental mode resumes from the last persisted step and
/// rejects tables already folded. A code whose comparison fails is logged
/// and left out; the job then ends with errors.
#[allow(clippy::too_many_arguments)]
pub async fn run_reduction(
    store: &ProjectStore,
    gateway: &Gateway,
    ctx: &RunContext,
    project: &str,
    tables: &[CodeTable],
    opts: &ReductionOptions,
    template: &PromptTemplate,
    settings: &GenerationSettings,
) -> Result<ReductionSummary, PipelineError> {
    expect_phase(template, Phase::Reduction)?;
    settings.validate()?;
    if tables.is_empty() {
        return Err(PipelineError::NoTables);
    }
    let mut book = match opts.mode {
        ReductionMode::Automatic => Codebook::new(),
        ReductionMode::Incremental => load_state(store, project)?.unwrap_or_default(),
    };
    let mut seen: HashSet<String> = book.folded_tables.iter().cloned().collect();
    for table in tables {
        if !seen.insert(table.artifact_name()) {
            return Err(PipelineError::StaleSnapshot(table.artifact_name()));
        }
    }
    if opts.mode == ReductionMode::Automatic {
        reset(store, project)?;
    }

    let total_codes: u64 = tables.iter().map(|t| t.codes.len() as u64).sum();
    ctx.set_total(total_codes);
    ctx.info(format!(
        "{} reduction of {} table(s), {} code(s), starting at step {}",
        match opts.mode {
            ReductionMode::Automatic => "automatic",
            ReductionMode::Incremental => "incremental",
        },
        tables.len(),
        total_codes,
        book.step_index + 1
    ));

    let mut summary = ReductionSummary {
        snapshots: Vec::new(),
        total_count: book.total_count,
        unique_count: book.unique_count(),
        step_index: book.step_index,
        failed_codes: 0,
    };
    for table in tables {
        // work on a copy so an interrupted table leaves the persisted state intact
        let mut working = book.clone();
        for code in &table.codes {
            match reduce_one(gateway, ctx, code, &mut working, opts, template, settings).await {
                Ok(record) => {
                    if let DecisionOutcome::Merged { uid } = &record.outcome {
                        ctx.info(format!("{} row {}: merged into {uid}", code.source_doc, code.row_index));
                    }
                }
                Err(e) if e.is_fatal() => return Err(e),
                Err(e) => {
                    summary.failed_codes += 1;
                    ctx.error(format!("{} row {} `{}`: {e}", code.source_doc, code.row_index, code.code_name));
                }
            }
            ctx.advance();
        }
        working.step_index += 1;
        working.folded_tables.push(table.artifact_name());
        working.series.push(SaturationPoint {
            step: working.step_index,
            cumulative_total: working.total_count,
            cumulative_unique: working.unique_count(),
        });
        book = working;
        let name = persist_step(store, project, &book, table, opts, template, settings)?;
        ctx.info(format!(
            "step {}: {} unique of {} total -> {name}",
            book.step_index,
            book.unique_count(),
            book.total_count
        ));
        summary.snapshots.push(name);
    }
    summary.total_count = book.total_count;
    summary.unique_count = book.unique_count();
    summary.step_index = book.step_index;
    Ok(summary)
}

fn persist_step(
    store: &ProjectStore,
    project: &str,
    book: &Codebook,
    table: &CodeTable,
    opts: &ReductionOptions,
    template: &PromptTemplate,
    settings: &GenerationSettings,
) -> Result<String, PipelineError> {
    let step = book.step_index;
    let name = artifacts::snapshot_filename(step);
    let meta = SnapshotMeta {
        step,
        source_table: table.artifact_name(),
        produced_at: Utc::now(),
        options: *opts,
        model_id: settings.model_id.clone(),
        prompt_name: template.name.clone(),
        codebook: book.clone(),
    };
    store.write_meta(project, Phase::Reduction, &snapshot_meta_name(step), &to_json(&meta))?;
    store.write_artifact(project, Phase::Reduction, &name, &artifacts::write_snapshot(&book.snapshot_rows()))?;
    store.write_artifact(project, Phase::Reduction, SATURATION_FILE, &artifacts::write_saturation(&book.series))?;
    store.write_meta(project, Phase::Reduction, STATE_FILE, &to_json(book))?;
    Ok(name)
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(value).expect("serializable")
}
