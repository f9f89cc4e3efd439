//! Scripted providers and builders shared by the integration tests.
//!
//! The responders read the rendered preset prompts back, so they only work
//! with the built-in templates.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use serde_json::{json, Value};

use thematic_core::coding::{CodeTable, InitialCode};
use thematic_core::gateway::{ChatRequest, Gateway, GenerationSettings, MockOutcome, MockProvider, RetryPolicy};
use thematic_core::prompts::{presets, PromptTemplate};
use thematic_core::store::{DocId, ProjectStore};
use thematic_core::Phase;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn preset(phase: Phase) -> PromptTemplate {
    presets(phase).remove(0)
}

pub fn settings() -> GenerationSettings {
    GenerationSettings::for_model("gpt-4o")
}

pub fn gateway(mock: &Arc<MockProvider>) -> Gateway {
    Gateway::new(mock.clone()).with_retry(RetryPolicy::immediate(3))
}

pub fn hash_of(parts: &[&dyn HashPart]) -> u64 {
    let mut h = DefaultHasher::new();
    for p in parts {
        p.feed(&mut h);
    }
    h.finish()
}

pub trait HashPart {
    fn feed(&self, h: &mut DefaultHasher);
}

impl<T: Hash> HashPart for T {
    fn feed(&self, h: &mut DefaultHasher) {
        self.hash(h);
    }
}

/// Text after `marker` up to the next blank line.
pub fn section<'a>(text: &'a str, marker: &str) -> &'a str {
    let Some(start) = text.find(marker) else {
        return "";
    };
    let rest = &text[start + marker.len()..];
    rest.split("\n\n").next().unwrap_or("")
}

/// Names from `- name: description` lines.
pub fn listed_names(section: &str) -> Vec<String> {
    section
        .lines()
        .filter_map(|l| l.strip_prefix("- "))
        .filter_map(|l| l.split_once(": ").map(|(n, _)| n.to_string()))
        .collect()
}

/// Initial coding: one code per `P:` line, named by its first three words.
pub fn coding_reply(req: &ChatRequest) -> MockOutcome {
    let codes: Vec<Value> = req
        .user
        .lines()
        .filter_map(|l| l.strip_prefix("P: "))
        .map(|quote| {
            let name: Vec<&str> = quote.split_whitespace().take(3).collect();
            json!({
                "code_name": name.join(" "),
                "description": format!("Participant talks about {}", name.join(" ").to_lowercase()),
                "quote": quote,
            })
        })
        .collect();
    MockOutcome::text(json!({ "final_codes": codes }).to_string())
}

/// Reduction: a deterministic function of the prompt. With probability
/// `merge_percent`% the candidate merges into a codebook entry picked by
/// hash.
pub fn reduction_reply(req: &ChatRequest, seed: u64, merge_percent: u64) -> MockOutcome {
    let candidate = req.user.lines().find_map(|l| l.strip_prefix("Name: ")).unwrap_or_default();
    let names = listed_names(section(&req.user, "Unique codebook:\n"));
    let h = hash_of(&[&seed, &candidate, &names.len()]);
    if names.is_empty() || h % 100 >= merge_percent {
        return MockOutcome::text(r#"{"decision": false}"#);
    }
    let matched = &names[(h / 100) as usize % names.len()];
    let rename = (h >> 20).is_multiple_of(3);
    MockOutcome::text(
        json!({
            "decision": true,
            "matched_code_name": matched,
            "merged_name": if rename { format!("{matched} / {candidate}") } else { matched.clone() },
            "merged_description": format!("Covers {matched} and {candidate}"),
            "merge_explanation": "same meaning",
        })
        .to_string(),
    )
}

/// Themes: pass 1 puts a hashed share of the codes into up to `themes`
/// themes; pass 2 places a hashed share of the leftovers, sometimes naming
/// an unknown theme or re-listing a code that was already placed.
pub fn themes_reply(req: &ChatRequest, seed: u64, themes: usize) -> MockOutcome {
    let forcing = req.user.contains("A first pass of theme generation");
    if !forcing {
        let names = listed_names(section(&req.user, "Codebook:\n"));
        let mut groups: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
        let mut unassigned = Vec::new();
        for n in &names {
            let h = hash_of(&[&seed, &1u8, n]);
            if h.is_multiple_of(4) {
                unassigned.push(n);
            } else {
                groups.entry((h / 4) as usize % themes.max(1)).or_default().push(n);
            }
        }
        let list: Vec<Value> = groups
            .iter()
            .map(|(k, v)| json!({"theme_name": format!("Theme {k}"), "description": format!("Pattern {k}"), "member_code_names": v}))
            .collect();
        return MockOutcome::text(json!({"themes": list, "unassigned_code_names": unassigned}).to_string());
    }
    let theme_names = listed_names(section(&req.user, "Existing themes:\n"));
    let leftovers = listed_names(section(&req.user, "Unassigned codes:\n"));
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for n in &leftovers {
        let h = hash_of(&[&seed, &2u8, n]);
        if h.is_multiple_of(3) {
            continue;
        }
        let theme = if h % 7 == 1 {
            "A brand new theme".to_string()
        } else {
            theme_names[(h / 3) as usize % theme_names.len()].clone()
        };
        groups.entry(theme).or_default().push(n.clone());
    }
    // try to move an already placed code; must be ignored
    if let Some(first) = theme_names.first() {
        groups.entry(first.clone()).or_default().push("Not a leftover".to_string());
    }
    let list: Vec<Value> = groups
        .iter()
        .map(|(k, v)| json!({"theme_name": k, "description": "d", "member_code_names": v}))
        .collect();
    MockOutcome::text(json!({"themes": list, "unassigned_code_names": []}).to_string())
}

/// Dispatches on the phase trailer in the prompt.
pub fn pipeline_reply(req: &ChatRequest, seed: u64) -> MockOutcome {
    if req.user.contains("\"final_codes\"") {
        coding_reply(req)
    } else if req.user.contains("\"decision\"") {
        reduction_reply(req, seed, 40)
    } else {
        themes_reply(req, seed, 3)
    }
}

/// A code table built directly, bypassing the coding phase.
pub fn table(doc: u32, filename: &str, codes: &[(String, String)]) -> CodeTable {
    CodeTable {
        source_doc: DocId(doc),
        source_filename: filename.to_string(),
        codes: codes
            .iter()
            .enumerate()
            .map(|(i, (name, quote))| InitialCode {
                code_name: name.clone(),
                description: format!("About {name}"),
                quote: quote.clone(),
                source_doc: DocId(doc),
                row_index: i,
                quote_verbatim: true,
            })
            .collect(),
        model_id: "gpt-4o".into(),
        prompt_name: "p".into(),
        temperature: 0.0,
        top_p: 0.0,
        produced_at: Utc::now(),
        chunks: 1,
        raw_responses: Vec::new(),
    }
}

const WORDS: &[&str] = &[
    "trust", "waiting", "cost", "parking", "nurse", "doctor", "carer", "visit", "advice", "delay", "family", "queue",
    "history", "dignity", "choice",
];

/// Tables with random code counts and names drawn from a small vocabulary,
/// so duplicates occur. Quotes are unique per code.
pub fn random_tables(rng: &mut impl rand::Rng, count: usize, max_codes: usize) -> Vec<CodeTable> {
    (0..count)
        .map(|t| {
            let n = rng.random_range(0..=max_codes);
            let codes: Vec<(String, String)> = (0..n)
                .map(|i| {
                    let a = WORDS[rng.random_range(0..WORDS.len())];
                    let b = WORDS[rng.random_range(0..WORDS.len())];
                    (format!("{a} {b}"), format!("quote {t}.{i} about {a}"))
                })
                .collect();
            table(t as u32 + 1, &format!("doc_{t:02}.txt"), &codes)
        })
        .collect()
}

pub fn temp_store(projects: &[&str]) -> (tempfile::TempDir, ProjectStore) {
    let dir = tempfile::tempdir().unwrap();
    let store = ProjectStore::open(dir.path()).unwrap();
    for p in projects {
        store.create_project(p).unwrap();
    }
    (dir, store)
}

/// Every file below `dir`.
pub fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = std::fs::read_dir(dir) {
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                out.extend(walk(&path));
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}
