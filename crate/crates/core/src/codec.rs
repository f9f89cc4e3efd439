//! Parsing LLM replies into typed phase results.
//!
//! Repairs are limited to stripping markdown fences and surrounding prose
//! and removing trailing commas. Anything else is a [`CodecError`], which
//! the pipeline answers with one corrective retry.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::phase::Phase;

/// Start positions tried before giving up; bounds work on adversarial input.
const MAX_OBJECT_STARTS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("no JSON object found in the response")]
    NoJsonFound,
    #[error("response does not match the expected structure: {0}")]
    SchemaViolation(String),
}

impl CodecError {
    /// Text appended to the prompt for the corrective retry.
    pub fn corrective_instruction(&self) -> String {
        format!(
            "Your previous reply could not be used ({self}). Reply again with only the JSON object, \
             exactly in the structure requested above, with no text before or after it."
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeEntry {
    pub code_name: String,
    pub description: String,
    pub quote: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedInitialCodes {
    pub codes: Vec<CodeEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedReductionDecision {
    pub decision: bool,
    pub matched_code_name: Option<String>,
    pub merged_name: Option<String>,
    pub merged_description: Option<String>,
    pub merge_explanation: Option<String>,
}

impl ParsedReductionDecision {
    pub fn unique() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeEntry {
    pub theme_name: String,
    pub description: String,
    pub member_code_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParsedThemes {
    pub themes: Vec<ThemeEntry>,
    pub unassigned_code_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PhaseResponse {
    InitialCodes(ParsedInitialCodes),
    Reduction(ParsedReductionDecision),
    Themes(ParsedThemes),
}

/// Finds the JSON object in an LLM reply.
///
/// A reply that already is a bare JSON object comes back unchanged.
/// Otherwise the first fenced block (if any) is searched before the whole
/// text, and the first balanced `{...}` that parses (after trailing-comma
/// removal) is returned.
pub fn extract_json(raw: &str) -> Result<String, CodecError> {
    if raw.trim().is_empty() {
        return Err(CodecError::NoJsonFound);
    }
    if matches!(serde_json::from_str::<Value>(raw), Ok(Value::Object(_))) {
        return Ok(raw.to_string());
    }
    let mut regions: Vec<&str> = fenced_blocks(raw);
    regions.push(raw);
    for region in regions {
        if let Some(found) = first_object(region) {
            return Ok(found);
        }
    }
    Err(CodecError::NoJsonFound)
}

/// Contents of ``` fenced blocks, in order.
fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // skip the info string (e.g. `json`) up to the end of the line
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                out.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => {
                out.push(body);
                break;
            }
        }
    }
    out
}

fn first_object(text: &str) -> Option<String> {
    let mut from = 0;
    let mut attempts = 0;
    while let Some(rel) = text[from..].find('{') {
        attempts += 1;
        if attempts > MAX_OBJECT_STARTS {
            return None;
        }
        let start = from + rel;
        match balanced_end(text, start) {
            Some(end) => {
                let candidate = &text[start..=end];
                if let Some(ok) = parse_object_candidate(candidate) {
                    return Some(ok);
                }
                from = end + 1;
            }
            None => from = start + 1,
        }
    }
    None
}

fn parse_object_candidate(candidate: &str) -> Option<String> {
    if matches!(serde_json::from_str::<Value>(candidate), Ok(Value::Object(_))) {
        return Some(candidate.to_string());
    }
    let repaired = strip_trailing_commas(candidate);
    if repaired != candidate && matches!(serde_json::from_str::<Value>(&repaired), Ok(Value::Object(_))) {
        return Some(repaired);
    }
    None
}

/// Byte index of the `}` closing the `{` at `start`, skipping braces inside
/// string literals.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, b) in text.as_bytes()[start..].iter().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Drops commas that directly precede `}` or `]` (outside strings).
fn strip_trailing_commas(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            out.push(c);
            continue;
        }
        if c == '"' {
            in_string = true;
        } else if c == ',' {
            let next = bytes[i + 1..].iter().find(|b| !b.is_ascii_whitespace());
            if matches!(next, Some(b'}') | Some(b']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

fn violation(msg: impl Into<String>) -> CodecError {
    CodecError::SchemaViolation(msg.into())
}

fn as_object<'a>(value: &'a Value, path: &str) -> Result<&'a Map<String, Value>, CodecError> {
    value.as_object().ok_or_else(|| violation(format!("{path}: expected an object")))
}

fn required_str(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, CodecError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.trim().to_string()),
        Some(_) => Err(violation(format!("{path}.{key}: expected a string"))),
        None => Err(violation(format!("{path}.{key}: missing"))),
    }
}

fn non_empty_str(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, CodecError> {
    let s = required_str(obj, key, path)?;
    if s.is_empty() {
        Err(violation(format!("{path}.{key}: must not be empty")))
    } else {
        Ok(s)
    }
}

/// Optional string; null, absent and blank all read as `None`.
fn optional_str(obj: &Map<String, Value>, key: &str, path: &str) -> Result<Option<String>, CodecError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => {
            let s = s.trim();
            Ok((!s.is_empty()).then(|| s.to_string()))
        }
        Some(_) => Err(violation(format!("{path}.{key}: expected a string"))),
    }
}

fn string_list(value: &Value, path: &str) -> Result<Vec<String>, CodecError> {
    let items = value
        .as_array()
        .ok_or_else(|| violation(format!("{path}: expected an array of strings")))?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            Value::String(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
            Value::String(_) => Err(violation(format!("{path}[{i}]: must not be empty"))),
            _ => Err(violation(format!("{path}[{i}]: expected a string"))),
        })
        .collect()
}

fn parse_value(raw: &str) -> Result<Value, CodecError> {
    let text = extract_json(raw)?;
    serde_json::from_str(&text).map_err(|_| CodecError::NoJsonFound)
}

pub fn parse_initial_codes(raw: &str) -> Result<ParsedInitialCodes, CodecError> {
    let value = parse_value(raw)?;
    let root = as_object(&value, "$")?;
    let list = root
        .get("final_codes")
        .ok_or_else(|| violation("final_codes: missing"))?
        .as_array()
        .ok_or_else(|| violation("final_codes: expected an array"))?;
    let codes = list
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let path = format!("final_codes[{i}]");
            let obj = as_object(item, &path)?;
            Ok(CodeEntry {
                code_name: non_empty_str(obj, "code_name", &path)?,
                description: required_str(obj, "description", &path)?,
                quote: required_str(obj, "quote", &path)?,
            })
        })
        .collect::<Result<_, CodecError>>()?;
    Ok(ParsedInitialCodes { codes })
}

pub fn parse_reduction_decision(raw: &str) -> Result<ParsedReductionDecision, CodecError> {
    let value = parse_value(raw)?;
    let root = as_object(&value, "$")?;
    let decision = match root.get("decision") {
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(violation("decision: expected true or false")),
        None => return Err(violation("decision: missing")),
    };
    if !decision {
        return Ok(ParsedReductionDecision::unique());
    }
    Ok(ParsedReductionDecision {
        decision,
        matched_code_name: Some(non_empty_str(root, "matched_code_name", "$")?),
        merged_name: optional_str(root, "merged_name", "$")?,
        merged_description: optional_str(root, "merged_description", "$")?,
        merge_explanation: optional_str(root, "merge_explanation", "$")?,
    })
}

pub fn parse_themes(raw: &str) -> Result<ParsedThemes, CodecError> {
    let value = parse_value(raw)?;
    let root = as_object(&value, "$")?;
    let list = root
        .get("themes")
        .ok_or_else(|| violation("themes: missing"))?
        .as_array()
        .ok_or_else(|| violation("themes: expected an array"))?;
    let mut themes: Vec<ThemeEntry> = Vec::with_capacity(list.len());
    for (i, item) in list.iter().enumerate() {
        let path = format!("themes[{i}]");
        let obj = as_object(item, &path)?;
        let theme_name = non_empty_str(obj, "theme_name", &path)?;
        if themes.iter().any(|t| t.theme_name == theme_name) {
            return Err(violation(format!("{path}.theme_name: duplicate theme `{theme_name}`")));
        }
        let members = obj
            .get("member_code_names")
            .ok_or_else(|| violation(format!("{path}.member_code_names: missing")))?;
        let member_code_names = string_list(members, &format!("{path}.member_code_names"))?;
        if member_code_names.is_empty() {
            return Err(violation(format!("{path}.member_code_names: must not be empty")));
        }
        themes.push(ThemeEntry {
            theme_name,
            description: required_str(obj, "description", &path)?,
            member_code_names,
        });
    }
    let unassigned_code_names = match root.get("unassigned_code_names") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => string_list(v, "unassigned_code_names")?,
    };
    Ok(ParsedThemes {
        themes,
        unassigned_code_names,
    })
}

pub fn parse_phase_response(phase: Phase, raw: &str) -> Result<PhaseResponse, CodecError> {
    match phase {
        Phase::InitialCoding => parse_initial_codes(raw).map(PhaseResponse::InitialCodes),
        Phase::Reduction => parse_reduction_decision(raw).map(PhaseResponse::Reduction),
        Phase::Themes => parse_themes(raw).map(PhaseResponse::Themes),
    }
}

impl ParsedInitialCodes {
    pub fn to_json(&self) -> String {
        json!({ "final_codes": self.codes }).to_string()
    }
}

impl ParsedReductionDecision {
    pub fn to_json(&self) -> String {
        let mut obj = Map::new();
        obj.insert("decision".into(), Value::Bool(self.decision));
        if self.decision {
            for (key, val) in [
                ("matched_code_name", &self.matched_code_name),
                ("merged_name", &self.merged_name),
                ("merged_description", &self.merged_description),
                ("merge_explanation", &self.merge_explanation),
            ] {
                if let Some(v) = val {
                    obj.insert(key.into(), Value::String(v.clone()));
                }
            }
        }
        Value::Object(obj).to_string()
    }
}

impl ParsedThemes {
    pub fn to_json(&self) -> String {
        json!({
            "themes": self.themes,
            "unassigned_code_names": self.unassigned_code_names,
        })
        .to_string()
    }
}

impl PhaseResponse {
    pub fn to_json(&self) -> String {
        match self {
            PhaseResponse::InitialCodes(c) => c.to_json(),
            PhaseResponse::Reduction(r) => r.to_json(),
            PhaseResponse::Themes(t) => t.to_json(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bare_object_is_identity() {
        assert_eq!(extract_json("{\"a\":1}").unwrap(), "{\"a\":1}");
    }

    #[test]
    fn fenced_with_prose() {
        let raw = "Here you go:\n```json\n{\"a\":1}\n```\nHope this helps";
        let out = extract_json(raw).unwrap();
        assert_eq!(out, "{\"a\":1}");
        assert!(serde_json::from_str::<Value>(&out).is_ok());
    }

    #[test]
    fn no_braces() {
        assert_eq!(extract_json("no braces here"), Err(CodecError::NoJsonFound));
        assert_eq!(extract_json("   "), Err(CodecError::NoJsonFound));
        assert_eq!(extract_json("{ not json }"), Err(CodecError::NoJsonFound));
    }

    #[test]
    fn trailing_commas_are_removed() {
        let raw = "{\"final_codes\": [{\"code_name\": \"a\", \"description\": \"b\", \"quote\": \"c, d\",},],}";
        let parsed = parse_initial_codes(raw).unwrap();
        assert_eq!(parsed.codes[0].quote, "c, d");
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_balancing() {
        let raw = "prefix {\"quote\": \"she said } and {\", \"n\": 1} suffix";
        let out = extract_json(raw).unwrap();
        assert_eq!(out, "{\"quote\": \"she said } and {\", \"n\": 1}");
    }

    #[test]
    fn skips_stray_unbalanced_brace() {
        let raw = "Use {braces like this. Result: {\"decision\": false}";
        assert_eq!(extract_json(raw).unwrap(), "{\"decision\": false}");
    }

    #[test]
    fn two_codes_in_reference_structure() {
        let raw = r#"{
  "final_codes": [
    {"code_name": "Trust in clinicians", "description": "Participants rely on nurses.", "quote": "I trust the nurses"},
    {"code_name": "Waiting times", "description": "Frustration with delays.", "quote": "waiting is painful"}
  ]
}"#;
        assert_eq!(parse_initial_codes(raw).unwrap().codes.len(), 2);
    }

    #[test]
    fn minimal_false_decision() {
        assert_eq!(
            parse_reduction_decision("{\"decision\": false}").unwrap(),
            ParsedReductionDecision::unique()
        );
    }

    #[test]
    fn false_decision_ignores_match_fields() {
        let d = parse_reduction_decision(r#"{"decision": false, "matched_code_name": "x", "merged_name": "y"}"#).unwrap();
        assert_eq!(d, ParsedReductionDecision::unique());
    }

    #[test]
    fn true_decision_requires_match() {
        assert!(matches!(
            parse_reduction_decision(r#"{"decision": true}"#),
            Err(CodecError::SchemaViolation(m)) if m.contains("matched_code_name")
        ));
        assert!(matches!(
            parse_reduction_decision(r#"{"decision": "true", "matched_code_name": "a"}"#),
            Err(CodecError::SchemaViolation(_))
        ));
    }

    #[test]
    fn duplicate_theme_names_are_reported() {
        let raw = r#"{"themes": [
            {"theme_name": "Trust", "description": "a", "member_code_names": ["x"]},
            {"theme_name": "Trust", "description": "b", "member_code_names": ["y"]}
        ], "unassigned_code_names": []}"#;
        match parse_themes(raw) {
            Err(CodecError::SchemaViolation(msg)) => assert!(msg.contains("Trust"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_member_list_is_a_violation() {
        let raw = r#"{"themes": [{"theme_name": "T", "description": "d", "member_code_names": []}]}"#;
        assert!(matches!(parse_themes(raw), Err(CodecError::SchemaViolation(_))));
    }

    #[test]
    fn strings_are_trimmed_and_extra_keys_ignored() {
        let raw = r#"{"final_codes": [{"code_name": "  Trust ", "description": " d ", "quote": "\tq\n", "confidence": 0.9}], "note": "x"}"#;
        let parsed = parse_initial_codes(raw).unwrap();
        assert_eq!(
            parsed.codes[0],
            CodeEntry {
                code_name: "Trust".into(),
                description: "d".into(),
                quote: "q".into()
            }
        );
    }

    #[test]
    fn missing_fields_are_named() {
        let raw = r#"{"final_codes": [{"code_name": "a", "description": "b"}]}"#;
        assert_eq!(
            parse_initial_codes(raw),
            Err(CodecError::SchemaViolation("final_codes[0].quote: missing".into()))
        );
        assert!(matches!(
            parse_initial_codes(r#"{"codes": []}"#),
            Err(CodecError::SchemaViolation(m)) if m.starts_with("final_codes")
        ));
    }

    #[test]
    fn empty_code_list_is_valid() {
        assert!(parse_initial_codes(r#"{"final_codes":[]}"#).unwrap().codes.is_empty());
    }

    #[test]
    fn corrective_instruction_names_problem() {
        let e = CodecError::SchemaViolation("final_codes: missing".into());
        assert!(e.corrective_instruction().contains("final_codes: missing"));
    }

    #[test]
    fn many_open_braces_terminate() {
        let raw = "{".repeat(100_000);
        assert_eq!(extract_json(&raw), Err(CodecError::NoJsonFound));
    }

    fn text() -> impl Strategy<Value = String> {
        // trimmed, non-empty, includes JSON-hostile characters
        "[a-zA-Z0-9 ,.:;'\"{}\\[\\]\\\\/é✓-]{1,40}".prop_filter_map("trimmed non-empty", |s| {
            let t = s.trim().to_string();
            (!t.is_empty()).then_some(t)
        })
    }

    fn maybe_text() -> impl Strategy<Value = Option<String>> {
        prop::option::of(text())
    }

    proptest! {
        #[test]
        fn initial_codes_round_trip(codes in prop::collection::vec((text(), text(), text()), 0..6)) {
            let value = ParsedInitialCodes {
                codes: codes.into_iter().map(|(code_name, description, quote)| CodeEntry { code_name, description, quote }).collect(),
            };
            prop_assert_eq!(parse_initial_codes(&value.to_json()).unwrap(), value);
        }

        #[test]
        fn reduction_round_trip(matched in text(), a in maybe_text(), b in maybe_text(), c in maybe_text(), decision: bool) {
            let value = if decision {
                ParsedReductionDecision { decision, matched_code_name: Some(matched), merged_name: a, merged_description: b, merge_explanation: c }
            } else {
                ParsedReductionDecision::unique()
            };
            prop_assert_eq!(parse_reduction_decision(&value.to_json()).unwrap(), value);
        }

        #[test]
        fn themes_round_trip(
            themes in prop::collection::btree_map(text(), (text(), prop::collection::vec(text(), 1..4)), 0..5),
            unassigned in prop::collection::vec(text(), 0..4),
        ) {
            let value = ParsedThemes {
                themes: themes.into_iter().map(|(theme_name, (description, member_code_names))| ThemeEntry { theme_name, description, member_code_names }).collect(),
                unassigned_code_names: unassigned,
            };
            prop_assert_eq!(parse_themes(&value.to_json()).unwrap(), value);
        }

        #[test]
        fn extraction_output_always_parses(raw in ".{0,200}") {
            if let Ok(out) = extract_json(&raw) {
                let is_object = matches!(serde_json::from_str::<Value>(&out), Ok(Value::Object(_)));
                prop_assert!(is_object);
            }
        }

        #[test]
        fn parsing_is_total(raw in "(\\PC|[{}\\[\\]\",:`])*", phase_idx in 0usize..3) {
            let _ = parse_phase_response(Phase::ALL[phase_idx], &raw);
        }
    }
}
