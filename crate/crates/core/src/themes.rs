//! Theme generation over a unique codebook, with an optional second pass
//! that places codes the first pass left out.

use std::collections::{BTreeMap, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, AssignedPass, ThemeRow, THEMES_FILE, THEMES_JSON_FILE};
use crate::codec;
use crate::gateway::{Gateway, GenerationSettings};
use crate::jobs::RunContext;
use crate::phase::Phase;
use crate::pipeline::{call_and_parse, expect_phase, PipelineError};
use crate::prompts::{force_unassigned_template, render_prompt, PromptPayload, PromptTemplate, Slot};
use crate::reduction::{fold_name, render_codes, Codebook};
use crate::store::{ProjectStore, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeOptions {
    #[serde(default)]
    pub include_quotes: bool,
    #[serde(default = "yes")]
    pub force_unassigned: bool,
}

fn yes() -> bool {
    true
}

impl Default for ThemeOptions {
    fn default() -> Self {
        Self {
            include_quotes: false,
            force_unassigned: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theme {
    pub theme_name: String,
    pub description: String,
    pub member_uids: Vec<String>,
    pub pass_assigned: BTreeMap<String, AssignedPass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeBook {
    pub themes: Vec<Theme>,
    pub unassigned_uids: Vec<String>,
    /// Snapshot file the codebook came from.
    pub source_snapshot: String,
    pub options: ThemeOptions,
    pub produced_at: DateTime<Utc>,
    /// The codebook the themes were built from.
    pub codebook: Codebook,
}

impl ThemeBook {
    pub fn rows(&self) -> Vec<ThemeRow> {
        let mut rows = Vec::new();
        for theme in &self.themes {
            for uid in &theme.member_uids {
                let code = self.codebook.get(uid).expect("theme members come from the codebook");
                rows.push(ThemeRow {
                    theme_name: theme.theme_name.clone(),
                    description: theme.description.clone(),
                    code_name: code.name.clone(),
                    code_description: code.description.clone(),
                    assigned_pass: theme.pass_assigned[uid],
                });
            }
        }
        rows
    }

    /// Uids unassigned after pass 1.
    pub fn pass_one_unassigned(&self) -> Vec<String> {
        let mut uids: Vec<String> = self
            .themes
            .iter()
            .flat_map(|t| t.pass_assigned.iter())
            .filter(|(_, pass)| **pass == AssignedPass::SecondPass)
            .map(|(uid, _)| uid.clone())
            .chain(self.unassigned_uids.iter().cloned())
            .collect();
        uids.sort();
        uids
    }
}

/// Resolves code names to uids among `available`: exact match first, then
/// ignoring case and whitespace. Each uid is handed out once.
struct NameResolver<'a> {
    book: &'a Codebook,
    available: Vec<String>,
}

impl<'a> NameResolver<'a> {
    fn new(book: &'a Codebook, available: impl IntoIterator<Item = String>) -> Self {
        Self {
            book,
            available: available.into_iter().collect(),
        }
    }

    fn take(&mut self, name: &str) -> Option<String> {
        let name_of = |uid: &String| &self.book.get(uid).expect("uid from this book").name;
        let pos = self.available.iter().position(|u| name_of(u) == name).or_else(|| {
            let wanted = fold_name(name);
            self.available.iter().position(|u| fold_name(name_of(u)) == wanted)
        })?;
        Some(self.available.remove(pos))
    }
}

fn find_theme(themes: &[Theme], name: &str) -> Option<usize> {
    themes.iter().position(|t| t.theme_name == name).or_else(|| {
        let wanted = fold_name(name);
        themes.iter().position(|t| fold_name(&t.theme_name) == wanted)
    })
}

fn render_themes(themes: &[Theme]) -> String {
    themes
        .iter()
        .map(|t| format!("- {}: {}", t.theme_name, t.description))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Builds themes for `book`. Pass 1 groups the whole codebook; when
/// `force_unassigned` is set and codes remain, pass 2 may add them to the
/// existing themes but cannot create new ones.
#[allow(clippy::too_many_arguments)]
pub async fn generate_themes(
    gateway: &Gateway,
    ctx: &RunContext,
    book: &Codebook,
    source_snapshot: &str,
    opts: &ThemeOptions,
    template: &PromptTemplate,
    settings: &GenerationSettings,
) -> Result<ThemeBook, PipelineError> {
    expect_phase(template, Phase::Themes)?;
    if book.unique.is_empty() {
        return Err(PipelineError::EmptyCodebook);
    }
    ctx.set_total(if opts.force_unassigned { 2 } else { 1 });

    let prompt = render_prompt(
        template,
        &PromptPayload::new().with(Slot::Codebook, book.render(opts.include_quotes)),
    )?;
    let first = call_and_parse(gateway, settings, ctx, "themes pass 1", &prompt, codec::parse_themes).await?.value;

    let mut resolver = NameResolver::new(book, book.unique.iter().map(|c| c.uid.clone()));
    let mut themes = Vec::new();
    for entry in first.themes {
        let mut theme = Theme {
            theme_name: entry.theme_name,
            description: entry.description,
            member_uids: Vec::new(),
            pass_assigned: BTreeMap::new(),
        };
        for name in &entry.member_code_names {
            match resolver.take(name) {
                Some(uid) => {
                    theme.pass_assigned.insert(uid.clone(), AssignedPass::FirstPass);
                    theme.member_uids.push(uid);
                }
                None => ctx.warn(format!(
                    "theme `{}`: code `{name}` is not in the codebook or already assigned; dropped",
                    theme.theme_name
                )),
            }
        }
        if theme.member_uids.is_empty() {
            ctx.warn(format!("theme `{}` has no resolvable codes; removed", theme.theme_name));
        } else {
            themes.push(theme);
        }
    }
    let mut unassigned: Vec<String> = resolver.available;
    ctx.advance();
    ctx.info(format!("pass 1: {} theme(s), {} code(s) unassigned", themes.len(), unassigned.len()));

    if opts.force_unassigned && !unassigned.is_empty() && !themes.is_empty() {
        let left = render_codes(unassigned.iter().map(|u| book.get(u).unwrap()), opts.include_quotes);
        let prompt = render_prompt(
            &force_unassigned_template(),
            &PromptPayload::new()
                .with(Slot::Themes, render_themes(&themes))
                .with(Slot::Codebook, left),
        )?;
        let second = call_and_parse(gateway, settings, ctx, "themes pass 2", &prompt, codec::parse_themes).await?.value;
        let mut resolver = NameResolver::new(book, unassigned);
        let mut placed = 0;
        for entry in second.themes {
            let Some(index) = find_theme(&themes, &entry.theme_name) else {
                ctx.warn(format!("pass 2 named unknown theme `{}`; its codes stay unassigned", entry.theme_name));
                continue;
            };
            for name in &entry.member_code_names {
                match resolver.take(name) {
                    Some(uid) => {
                        themes[index].pass_assigned.insert(uid.clone(), AssignedPass::SecondPass);
                        themes[index].member_uids.push(uid);
                        placed += 1;
                    }
                    None => ctx.warn(format!("pass 2: code `{name}` is not among the unassigned codes; ignored")),
                }
            }
        }
        unassigned = resolver.available;
        ctx.info(format!("pass 2: {placed} code(s) assigned, {} left unassigned", unassigned.len()));
    }
    ctx.set_done(2);

    // keep codebook order for the remainder
    let remaining: HashSet<&String> = unassigned.iter().collect();
    let unassigned_uids = book
        .unique
        .iter()
        .map(|c| &c.uid)
        .filter(|u| remaining.contains(u))
        .cloned()
        .collect();
    Ok(ThemeBook {
        themes,
        unassigned_uids,
        source_snapshot: source_snapshot.to_string(),
        options: *opts,
        produced_at: Utc::now(),
        codebook: book.clone(),
    })
}

pub fn save_theme_book(store: &ProjectStore, project: &str, theme_book: &ThemeBook) -> Result<(), PipelineError> {
    store.write_artifact(project, Phase::Themes, THEMES_FILE, &artifacts::write_themes(&theme_book.rows()))?;
    store.write_artifact(
        project,
        Phase::Themes,
        THEMES_JSON_FILE,
        &serde_json::to_vec_pretty(theme_book).expect("serializable"),
    )?;
    Ok(())
}

/// The persisted theme book, if themes have been generated.
pub fn load_theme_book(store: &ProjectStore, project: &str) -> Result<Option<ThemeBook>, PipelineError> {
    if !store.artifact_exists(project, Phase::Themes, THEMES_JSON_FILE)? {
        return Ok(None);
    }
    let bytes = store.read_artifact(project, Phase::Themes, THEMES_JSON_FILE)?;
    Ok(Some(
        serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptMetadata(e.to_string()))?,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCodebook {
    pub step: u32,
    pub filename: String,
    pub recommended: bool,
}

/// Snapshots available for theme generation, by ascending step; the last
/// is recommended.
pub fn list_candidate_codebooks(store: &ProjectStore, project: &str) -> Result<Vec<CandidateCodebook>, PipelineError> {
    let mut steps: Vec<(u32, String)> = store
        .list_phase_artifacts(project, Phase::Reduction)?
        .into_iter()
        .filter_map(|a| {
            let name = a.path.file_name()?.to_str()?.to_string();
            artifacts::parse_snapshot_filename(&name).map(|step| (step, name))
        })
        .collect();
    if steps.is_empty() {
        return Err(PipelineError::NoReductionYet);
    }
    steps.sort();
    let last = steps.len() - 1;
    Ok(steps
        .into_iter()
        .enumerate()
        .map(|(i, (step, filename))| CandidateCodebook {
            step,
            filename,
            recommended: i == last,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemesSummary {
    pub themes: usize,
    pub unassigned: usize,
    pub source_snapshot: String,
}

/// Generates themes from snapshot `step` (the latest when `None`) and
/// persists `themes.csv` and `themes.json`.
#[allow(clippy::too_many_arguments)]
pub async fn run_themes(
    store: &ProjectStore,
    gateway: &Gateway,
    ctx: &RunContext,
    project: &str,
    step: Option<u32>,
    opts: &ThemeOptions,
    template: &PromptTemplate,
    settings: &GenerationSettings,
) -> Result<ThemesSummary, PipelineError> {
    expect_phase(template, Phase::Themes)?;
    settings.validate()?;
    let candidates = list_candidate_codebooks(store, project)?;
    let step = step.unwrap_or_else(|| candidates.last().expect("non-empty").step);
    let snapshot = crate::reduction::load_snapshot(store, project, step)?;
    let source = artifacts::snapshot_filename(step);
    if !candidates.iter().any(|c| c.step == step && c.recommended) {
        ctx.warn(format!("{source} is not the latest snapshot"));
    }
    let book = generate_themes(gateway, ctx, &snapshot.codebook, &source, opts, template, settings).await?;
    if store.artifact_exists(project, Phase::Themes, THEMES_FILE)? {
        ctx.info(format!("rerun: overwriting {THEMES_FILE}"));
    }
    save_theme_book(store, project, &book)?;
    Ok(ThemesSummary {
        themes: book.themes.len(),
        unassigned: book.unassigned_uids.len(),
        source_snapshot: source,
    })
}
