//! Prompt templates per phase.
//!
//! A rendered prompt is the template body with its `{{slot}}` placeholders
//! filled, followed by a blank line and the phase's fixed JSON format
//! trailer. Users edit bodies only; trailers never change.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::phase::Phase;

/// Every trailer starts with this line; a body containing it would conflict
/// with the trailer.
pub const FORMAT_SENTINEL: &str = "Format the response as a JSON file";

pub const SEPARATOR: &str = "\n\n";

/// Sent as the system message of every pipeline call.
pub const SYSTEM_MESSAGE: &str = "You are an experienced qualitative researcher performing a thematic analysis. \
Follow the instructions precisely and reply with valid JSON only.";

const INITIAL_CODING_TRAILER: &str = r#"Format the response as a JSON file with the following structure:

{
  "final_codes": [
    {
      "code_name": "Example Code Name",
      "description": "This is where you would provide a 25-word description of the code, explaining its meaning and significance in the context of the analysis.",
      "quote": "relevant quote here"
    },
    // Additional codes follow the same structure
  ]
}"#;

const REDUCTION_TRAILER: &str = r#"Format the response as a JSON file with the following structure:

{
  "decision": true,
  "matched_code_name": "Exact name of the single best matching code in the unique codebook",
  "merged_name": "Code name that covers both the candidate and the matched code",
  "merged_description": "A 25-word description that covers both the candidate and the matched code",
  "merge_explanation": "Why the two codes are duplicates"
}

Use "decision": false when the candidate code is unique; the other fields may then be omitted."#;

const THEMES_TRAILER: &str = r#"Format the response as a JSON file with the following structure:

{
  "themes": [
    {
      "theme_name": "Example Theme Name",
      "description": "A description of the theme, explaining the pattern it captures across the codes.",
      "member_code_names": ["Exact code name", "Another exact code name"]
    }
  ],
  "unassigned_code_names": ["Exact name of any code that fits no theme"]
}"#;

pub fn trailer(phase: Phase) -> &'static str {
    match phase {
        Phase::InitialCoding => INITIAL_CODING_TRAILER,
        Phase::Reduction => REDUCTION_TRAILER,
        Phase::Themes => THEMES_TRAILER,
    }
}

/// A named substitution point in a template body, written `{{name}}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Document,
    Candidate,
    Codebook,
    Themes,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Document, Slot::Candidate, Slot::Codebook, Slot::Themes];

    pub fn name(self) -> &'static str {
        match self {
            Slot::Document => "document",
            Slot::Candidate => "candidate",
            Slot::Codebook => "codebook",
            Slot::Themes => "themes",
        }
    }

    fn heading(self) -> &'static str {
        match self {
            Slot::Document => "Document",
            Slot::Candidate => "Candidate code",
            Slot::Codebook => "Codes",
            Slot::Themes => "Existing themes",
        }
    }

    pub fn token(self) -> String {
        format!("{{{{{}}}}}", self.name())
    }

    /// Slots a phase's payload must always supply.
    pub fn required_for(phase: Phase) -> &'static [Slot] {
        match phase {
            Phase::InitialCoding => &[Slot::Document],
            Phase::Reduction => &[Slot::Candidate, Slot::Codebook],
            Phase::Themes => &[Slot::Codebook],
        }
    }
}

impl FromStr for Slot {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Slot::ALL.into_iter().find(|slot| slot.name() == s).ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("a {phase} prompt named `{name}` already exists")]
    DuplicateName { phase: Phase, name: String },
    #[error("prompt body is empty")]
    EmptyBody,
    #[error("prompt body contains its own JSON format block (`{FORMAT_SENTINEL}`); the format section is fixed")]
    TrailerTamper,
    #[error("invalid prompt name `{0}`")]
    InvalidName(String),
    #[error("no value for placeholder `{{{{{0}}}}}`")]
    MissingPlaceholder(String),
    #[error("no {phase} prompt named `{name}`")]
    UnknownPrompt { phase: Phase, name: String },
    #[error("preset prompts cannot be modified or deleted")]
    PresetImmutable,
    #[error("prompt store i/o: {0}")]
    Io(String),
}

impl From<io::Error> for PromptError {
    fn from(e: io::Error) -> Self {
        PromptError::Io(e.to_string())
    }
}

/// Generation defaults stored with a custom prompt; run settings override
/// them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptDefaults {
    pub temperature: f64,
    pub top_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub phase: Phase,
    pub name: String,
    pub body: String,
    pub is_preset: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defaults: Option<PromptDefaults>,
}

impl PromptTemplate {
    /// An unsaved template, e.g. an ad-hoc edit of a preset for one run.
    pub fn ephemeral(phase: Phase, name: impl Into<String>, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        validate_body(&body)?;
        Ok(Self {
            phase,
            name: name.into(),
            body,
            is_preset: false,
            defaults: None,
        })
    }

    pub fn format_trailer(&self) -> &'static str {
        trailer(self.phase)
    }
}

/// Values for a template's slots.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptPayload {
    values: BTreeMap<Slot, String>,
}

impl PromptPayload {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, slot: Slot, value: impl Into<String>) -> Self {
        self.values.insert(slot, value.into());
        self
    }

    pub fn get(&self, slot: Slot) -> Option<&str> {
        self.values.get(&slot).map(String::as_str)
    }
}

pub fn validate_body(body: &str) -> Result<(), PromptError> {
    if body.trim().is_empty() {
        return Err(PromptError::EmptyBody);
    }
    if body.to_lowercase().contains(&FORMAT_SENTINEL.to_lowercase()) {
        return Err(PromptError::TrailerTamper);
    }
    Ok(())
}

/// Renders `template` with `payload`.
///
/// Placeholders in the body are replaced in one pass (substituted text is
/// never rescanned). Supplied slots the body does not mention are appended
/// under a heading, so a body written without placeholders still carries
/// its data.
pub fn render_prompt(template: &PromptTemplate, payload: &PromptPayload) -> Result<String, PromptError> {
    for slot in Slot::required_for(template.phase) {
        if payload.get(*slot).is_none() {
            return Err(PromptError::MissingPlaceholder(slot.name().to_string()));
        }
    }

    let body = template.body.as_str();
    let mut out = String::with_capacity(body.len() + 256);
    let mut used = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            rest = "";
            break;
        };
        let name = after[..end].trim();
        let slot: Slot = name
            .parse()
            .map_err(|_| PromptError::MissingPlaceholder(name.to_string()))?;
        let value = payload
            .get(slot)
            .ok_or_else(|| PromptError::MissingPlaceholder(name.to_string()))?;
        out.push_str(value);
        used.push(slot);
        rest = &after[end + 2..];
    }
    out.push_str(rest);

    let mut out = out.trim_end().to_string();
    for (slot, value) in &payload.values {
        if !used.contains(slot) {
            out.push_str(SEPARATOR);
            out.push_str(slot.heading());
            out.push_str(":\n");
            out.push_str(value);
        }
    }
    out.push_str(SEPARATOR);
    out.push_str(template.format_trailer());
    Ok(out)
}

struct Preset {
    phase: Phase,
    name: &'static str,
    body: &'static str,
}

const PRESETS: &[Preset] = &[
    Preset {
        phase: Phase::InitialCoding,
        name: "inductive-initial-codes",
        body: "Read the interview below and perform the initial coding step of an inductive thematic analysis. \
Identify the meaningful units in the text and give each one a short code name, a description of about 25 words \
explaining the code's meaning and significance, and one quote copied verbatim from the interview that supports it. \
Cover the whole interview and avoid overlapping codes.\n\nInterview:\n{{document}}",
    },
    Preset {
        phase: Phase::InitialCoding,
        name: "semantic-initial-codes",
        body: "Perform semantic-level initial coding of the text below for a thematic analysis. Stay close to what \
participants explicitly say. For each code provide a concise name, a description of about 25 words and one exact \
quote from the text.\n\nText:\n{{document}}",
    },
    Preset {
        phase: Phase::Reduction,
        name: "duplicate-check",
        body: "You are reducing a codebook produced by initial coding. Compare the candidate code with every code in \
the unique codebook. Decide whether the candidate expresses the same meaning as an existing code (a duplicate) or \
is unique. If it is a duplicate, name the single best matching code exactly as written in the codebook and write a \
merged name and description covering both.\n\nCandidate code:\n{{candidate}}\n\nUnique codebook:\n{{codebook}}",
    },
    Preset {
        phase: Phase::Themes,
        name: "themes-from-codes",
        body: "Below is the final codebook of a thematic analysis. Sort and group the codes into themes: each theme \
has a name, a description of the pattern it captures, and the exact names of the codes it aggregates. A code \
belongs to at most one theme. List any code that fits no theme as unassigned.\n\nCodebook:\n{{codebook}}",
    },
];

/// Second-pass body used to place codes left unassigned by the first pass.
pub const FORCE_UNASSIGNED_BODY: &str = "A first pass of theme generation left the codes below unassigned. Assign \
each of them to the most fitting of the existing themes, using the theme names exactly as given. Do not create new \
themes. Leave a code unassigned only if it is entirely incompatible with every theme.\n\nExisting themes:\n{{themes}}\n\n\
Unassigned codes:\n{{codebook}}";

pub fn presets(phase: Phase) -> Vec<PromptTemplate> {
    PRESETS
        .iter()
        .filter(|p| p.phase == phase)
        .map(|p| PromptTemplate {
            phase: p.phase,
            name: p.name.to_string(),
            body: p.body.to_string(),
            is_preset: true,
            defaults: None,
        })
        .collect()
}

pub fn force_unassigned_template() -> PromptTemplate {
    PromptTemplate {
        phase: Phase::Themes,
        name: "force-unassigned".into(),
        body: FORCE_UNASSIGNED_BODY.into(),
        is_preset: true,
        defaults: None,
    }
}

fn validate_name(name: &str) -> Result<(), PromptError> {
    let ok = !name.is_empty()
        && name.len() <= 100
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_alphanumeric() || matches!(c, '-' | '_' | ' ' | '.'));
    if ok && name.trim() == name {
        Ok(())
    } else {
        Err(PromptError::InvalidName(name.to_string()))
    }
}

/// Service-wide prompt store: `<dir>/custom/<phase>/<name>.json` for user
/// prompts, `<dir>/presets/<phase>/<name>.json` as read-only copies of the
/// built-in presets.
pub struct PromptLibrary {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl fmt::Debug for PromptLibrary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PromptLibrary").field("dir", &self.dir).finish()
    }
}

impl PromptLibrary {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, PromptError> {
        let dir = dir.into();
        for phase in Phase::ALL {
            fs::create_dir_all(dir.join("custom").join(phase.as_str()))?;
            let preset_dir = dir.join("presets").join(phase.as_str());
            fs::create_dir_all(&preset_dir)?;
            for preset in presets(phase) {
                let path = preset_dir.join(format!("{}.json", preset.name));
                let bytes = serde_json::to_vec_pretty(&preset).expect("template serializes");
                if fs::read(&path).ok().as_deref() != Some(bytes.as_slice()) {
                    if path.exists() {
                        let mut perms = fs::metadata(&path)?.permissions();
                        #[allow(clippy::permissions_set_readonly_false)]
                        perms.set_readonly(false);
                        fs::set_permissions(&path, perms)?;
                    }
                    fs::write(&path, &bytes)?;
                }
                let mut perms = fs::metadata(&path)?.permissions();
                perms.set_readonly(true);
                fs::set_permissions(&path, perms)?;
            }
        }
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn custom_path(&self, phase: Phase, name: &str) -> PathBuf {
        self.dir.join("custom").join(phase.as_str()).join(format!("{name}.json"))
    }

    fn customs(&self, phase: Phase) -> Result<Vec<PromptTemplate>, PromptError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.dir.join("custom").join(phase.as_str()))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let bytes = fs::read(&path)?;
            match serde_json::from_slice::<PromptTemplate>(&bytes) {
                Ok(t) if t.phase == phase && !t.is_preset => out.push(t),
                _ => tracing::warn!(path = %path.display(), "skipping unreadable prompt file"),
            }
        }
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    }

    /// Presets first, then custom prompts by name.
    pub fn list(&self, phase: Phase) -> Result<Vec<PromptTemplate>, PromptError> {
        let mut all = presets(phase);
        all.extend(self.customs(phase)?);
        Ok(all)
    }

    pub fn get(&self, phase: Phase, name: &str) -> Result<PromptTemplate, PromptError> {
        self.list(phase)?
            .into_iter()
            .find(|t| t.name == name)
            .ok_or_else(|| PromptError::UnknownPrompt {
                phase,
                name: name.to_string(),
            })
    }

    pub fn create_custom(
        &self,
        phase: Phase,
        name: &str,
        body: &str,
        defaults: Option<PromptDefaults>,
    ) -> Result<PromptTemplate, PromptError> {
        validate_name(name)?;
        validate_body(body)?;
        let _g = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        if self.list(phase)?.iter().any(|t| t.name == name) {
            return Err(PromptError::DuplicateName {
                phase,
                name: name.to_string(),
            });
        }
        let template = PromptTemplate {
            phase,
            name: name.to_string(),
            body: body.to_string(),
            is_preset: false,
            defaults,
        };
        let bytes = serde_json::to_vec_pretty(&template).expect("template serializes");
        fs::write(self.custom_path(phase, name), bytes)?;
        Ok(template)
    }

    /// Saves an editable copy of a preset under a new name.
    pub fn copy_preset(&self, phase: Phase, preset: &str, new_name: &str) -> Result<PromptTemplate, PromptError> {
        let source = presets(phase)
            .into_iter()
            .find(|t| t.name == preset)
            .ok_or_else(|| PromptError::UnknownPrompt {
                phase,
                name: preset.to_string(),
            })?;
        self.create_custom(phase, new_name, &source.body, None)
    }

    pub fn delete_custom(&self, phase: Phase, name: &str) -> Result<(), PromptError> {
        if presets(phase).iter().any(|t| t.name == name) {
            return Err(PromptError::PresetImmutable);
        }
        let _g = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        if validate_name(name).is_err() {
            return Err(PromptError::UnknownPrompt {
                phase,
                name: name.to_string(),
            });
        }
        match fs::remove_file(self.custom_path(phase, name)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(PromptError::UnknownPrompt {
                phase,
                name: name.to_string(),
            }),
            Err(e) => Err(e.into()),
        }
    }
}
