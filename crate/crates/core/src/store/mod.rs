//! Project workspaces on disk.
//!
//! Layout:
//!
//! ```text
//! <projects_root>/<project_name>/
//!     data/             source documents (.txt, UTF-8)
//!     initial_codes/    <stem>_codes.csv per coded document
//!     reduced_codes/    unique_codebook_<NNN>.csv, saturation_series.csv
//!     themes/           themes.csv, themes.json
//!     project.json      documents, selection state, doc id counter
//!     .meta/            sidecars and resumable state, never listed as artifacts
//! ```

mod convert;

pub use convert::{convert_to_plaintext, sniff_kind, ConvertError, DocumentKind};

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::phase::Phase;

const PROJECT_FILE: &str = "project.json";
const META_DIR: &str = ".meta";
const DATA_DIR: &str = "data";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("a project named `{0}` already exists")]
    DuplicateName(String),
    #[error("invalid project name `{name}`: {reason}")]
    InvalidName { name: String, reason: &'static str },
    #[error("unknown project `{0}`")]
    UnknownProject(String),
    #[error("invalid document filename `{name}`: {reason}")]
    InvalidFilename { name: String, reason: &'static str },
    #[error("a document named `{0}` already exists in this project")]
    DuplicateFilename(String),
    #[error("document `{0}` is empty")]
    EmptyDocument(String),
    #[error("document `{0}` is neither UTF-8 nor Windows-1252 text")]
    NotUtf8Decodable(String),
    #[error("unknown document {0}")]
    UnknownDocument(DocId),
    #[error("unknown artifact `{0}`")]
    UnknownArtifact(String),
    #[error("corrupt project metadata: {0}")]
    CorruptMetadata(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Stable document identifier, assigned from a per-project counter at
/// ingestion and never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(pub u32);

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "doc-{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Project {
    pub name: String,
    pub created_at: DateTime<Utc>,
    pub root_path: PathBuf,
}

/// Document metadata without its text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentInfo {
    pub doc_id: DocId,
    pub filename: String,
    pub selected: bool,
    pub ingested_at: DateTime<Utc>,
}

impl DocumentInfo {
    /// Filename without its `.txt` extension.
    pub fn stem(&self) -> &str {
        file_stem(&self.filename)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceDocument {
    pub info: DocumentInfo,
    pub text: String,
}

impl SourceDocument {
    pub fn doc_id(&self) -> DocId {
        self.info.doc_id
    }

    pub fn filename(&self) -> &str {
        &self.info.filename
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseArtifact {
    pub phase: Phase,
    pub path: PathBuf,
    pub produced_at: DateTime<Utc>,
    /// The artifact's file name.
    pub source_label: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProjectRecord {
    name: String,
    created_at: DateTime<Utc>,
    next_doc_id: u32,
    documents: Vec<DocumentInfo>,
}

/// Filesystem-backed store of all projects under one root directory.
///
/// Mutations of a project take that project's write lock; reads take its
/// read lock. Project creation and deletion are serialized store-wide.
pub struct ProjectStore {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<RwLock<()>>>>,
    create_lock: Mutex<()>,
}

impl fmt::Debug for ProjectStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProjectStore").field("root", &self.root).finish()
    }
}

impl ProjectStore {
    /// Opens (and creates if needed) the projects root.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            locks: Mutex::new(HashMap::new()),
            create_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock_for(&self, name: &str) -> Arc<RwLock<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(name.to_string()).or_default().clone()
    }

    fn read_guard<'a>(lock: &'a RwLock<()>) -> RwLockReadGuard<'a, ()> {
        lock.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write_guard<'a>(lock: &'a RwLock<()>) -> RwLockWriteGuard<'a, ()> {
        lock.write().unwrap_or_else(|e| e.into_inner())
    }

    fn project_dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Resolves a project by name, checking that it exists on disk.
    fn existing_dir(&self, name: &str) -> Result<PathBuf> {
        if validate_project_name(name).is_err() {
            return Err(StoreError::UnknownProject(name.to_string()));
        }
        let dir = self.project_dir(name);
        if dir.join(PROJECT_FILE).is_file() {
            Ok(dir)
        } else {
            Err(StoreError::UnknownProject(name.to_string()))
        }
    }

    pub fn create_project(&self, name: &str) -> Result<Project> {
        validate_project_name(name)?;
        let _guard = self.create_lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = self.project_dir(name);
        if dir.exists() {
            return Err(StoreError::DuplicateName(name.to_string()));
        }

        // Build the skeleton beside the target and rename it into place, so a
        // failure never leaves a half-made project behind.
        let staging = self.root.join(format!(".staging-{}", uuid::Uuid::new_v4()));
        let created_at = Utc::now();
        let built = (|| -> io::Result<()> {
            fs::create_dir(&staging)?;
            for phase in Phase::ALL {
                fs::create_dir(staging.join(phase.dir_name()))?;
            }
            fs::create_dir(staging.join(DATA_DIR))?;
            fs::create_dir(staging.join(META_DIR))?;
            let record = ProjectRecord {
                name: name.to_string(),
                created_at,
                next_doc_id: 1,
                documents: Vec::new(),
            };
            write_json(&staging.join(PROJECT_FILE), &record)?;
            fs::rename(&staging, &dir)
        })();
        if let Err(e) = built {
            let _ = fs::remove_dir_all(&staging);
            return Err(e.into());
        }
        Ok(Project {
            name: name.to_string(),
            created_at,
            root_path: dir,
        })
    }

    pub fn project(&self, name: &str) -> Result<Project> {
        let dir = self.existing_dir(name)?;
        let lock = self.lock_for(name);
        let _g = Self::read_guard(&lock);
        let record = load_record(&dir)?;
        Ok(Project {
            name: record.name,
            created_at: record.created_at,
            root_path: dir,
        })
    }

    /// All projects, sorted by name.
    pub fn list_projects(&self) -> Result<Vec<Project>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let Some(name) = entry.file_name().to_str().map(str::to_string) else {
                continue;
            };
            if name.starts_with('.') || !entry.path().join(PROJECT_FILE).is_file() {
                continue;
            }
            out.push(self.project(&name)?);
        }
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    }

    pub fn delete_project(&self, name: &str) -> Result<()> {
        let dir = self.existing_dir(name)?;
        let _c = self.create_lock.lock().unwrap_or_else(|e| e.into_inner());
        let lock = self.lock_for(name);
        let _g = Self::write_guard(&lock);
        fs::remove_dir_all(dir)?;
        Ok(())
    }

    /// Stores a document under `data/`, transcoding Windows-1252 input to
    /// UTF-8. New documents start selected.
    pub fn ingest_document(&self, project: &str, filename: &str, bytes: &[u8]) -> Result<SourceDocument> {
        validate_document_filename(filename)?;
        let text = decode_text(filename, bytes)?;
        let dir = self.existing_dir(project)?;
        let lock = self.lock_for(project);
        let _g = Self::write_guard(&lock);

        let mut record = load_record(&dir)?;
        let path = dir.join(DATA_DIR).join(filename);
        if path.exists() || record.documents.iter().any(|d| d.filename == filename) {
            return Err(StoreError::DuplicateFilename(filename.to_string()));
        }
        write_atomic(&path, text.as_bytes())?;

        let info = DocumentInfo {
            doc_id: DocId(record.next_doc_id),
            filename: filename.to_string(),
            selected: true,
            ingested_at: Utc::now(),
        };
        record.next_doc_id += 1;
        record.documents.push(info.clone());
        if let Err(e) = write_json(&dir.join(PROJECT_FILE), &record) {
            let _ = fs::remove_file(&path);
            return Err(e.into());
        }
        Ok(SourceDocument { info, text })
    }

    /// Documents sorted by filename.
    pub fn documents(&self, project: &str) -> Result<Vec<DocumentInfo>> {
        let dir = self.existing_dir(project)?;
        let lock = self.lock_for(project);
        let _g = Self::read_guard(&lock);
        let mut docs = load_record(&dir)?.documents;
        docs.sort_by(|a, b| a.filename.cmp(&b.filename));
        Ok(docs)
    }

    pub fn document(&self, project: &str, doc_id: DocId) -> Result<SourceDocument> {
        let dir = self.existing_dir(project)?;
        let lock = self.lock_for(project);
        let _g = Self::read_guard(&lock);
        let record = load_record(&dir)?;
        let info = record
            .documents
            .into_iter()
            .find(|d| d.doc_id == doc_id)
            .ok_or(StoreError::UnknownDocument(doc_id))?;
        let bytes = fs::read(dir.join(DATA_DIR).join(&info.filename))?;
        let text = String::from_utf8(bytes).map_err(|_| StoreError::NotUtf8Decodable(info.filename.clone()))?;
        Ok(SourceDocument { info, text })
    }

    pub fn set_selected(&self, project: &str, doc_id: DocId, selected: bool) -> Result<DocumentInfo> {
        self.update_record(project, |record| {
            let doc = record
                .documents
                .iter_mut()
                .find(|d| d.doc_id == doc_id)
                .ok_or(StoreError::UnknownDocument(doc_id))?;
            doc.selected = selected;
            Ok(doc.clone())
        })
    }

    /// Removes a document. Artifacts derived from it are kept.
    pub fn delete_document(&self, project: &str, doc_id: DocId) -> Result<()> {
        let dir = self.existing_dir(project)?;
        let removed = self.update_record(project, |record| {
            let idx = record
                .documents
                .iter()
                .position(|d| d.doc_id == doc_id)
                .ok_or(StoreError::UnknownDocument(doc_id))?;
            Ok(record.documents.remove(idx))
        })?;
        match fs::remove_file(dir.join(DATA_DIR).join(&removed.filename)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    fn update_record<T>(&self, project: &str, f: impl FnOnce(&mut ProjectRecord) -> Result<T>) -> Result<T> {
        let dir = self.existing_dir(project)?;
        let lock = self.lock_for(project);
        let _g = Self::write_guard(&lock);
        let mut record = load_record(&dir)?;
        let out = f(&mut record)?;
        write_json(&dir.join(PROJECT_FILE), &record)?;
        Ok(out)
    }

    /// Every file in the phase directory, oldest first; ties broken by name.
    pub fn list_phase_artifacts(&self, project: &str, phase: Phase) -> Result<Vec<PhaseArtifact>> {
        let dir = self.existing_dir(project)?;
        let lock = self.lock_for(project);
        let _g = Self::read_guard(&lock);
        let mut out = Vec::new();
        for entry in fs::read_dir(dir.join(phase.dir_name()))? {
            let entry = entry?;
            let meta = entry.metadata()?;
            if !meta.is_file() {
                continue;
            }
            let produced_at: DateTime<Utc> = meta.modified().map(Into::into).unwrap_or_else(|_| Utc::now());
            out.push(PhaseArtifact {
                phase,
                path: entry.path(),
                produced_at,
                source_label: entry.file_name().to_string_lossy().into_owned(),
            });
        }
        out.sort_by(|a, b| {
            a.produced_at
                .cmp(&b.produced_at)
                .then_with(|| a.source_label.cmp(&b.source_label))
        });
        Ok(out)
    }

    /// Writes (or overwrites) an artifact atomically.
    pub fn write_artifact(&self, project: &str, phase: Phase, filename: &str, bytes: &[u8]) -> Result<PhaseArtifact> {
        validate_plain_filename(filename)?;
        let dir = self.existing_dir(project)?;
        let lock = self.lock_for(project);
        let _g = Self::write_guard(&lock);
        let path = dir.join(phase.dir_name()).join(filename);
        write_atomic(&path, bytes)?;
        Ok(PhaseArtifact {
            phase,
            produced_at: fs::metadata(&path)?.modified().map(Into::into).unwrap_or_else(|_| Utc::now()),
            path,
            source_label: filename.to_string(),
        })
    }

    pub fn read_artifact(&self, project: &str, phase: Phase, filename: &str) -> Result<Vec<u8>> {
        if validate_plain_filename(filename).is_err() {
            return Err(StoreError::UnknownArtifact(filename.to_string()));
        }
        let dir = self.existing_dir(project)?;
        let lock = self.lock_for(project);
        let _g = Self::read_guard(&lock);
        match fs::read(dir.join(phase.dir_name()).join(filename)) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::UnknownArtifact(filename.to_string())),
            Err(e) => Err(e.into()),
        }
    }

    pub fn artifact_exists(&self, project: &str, phase: Phase, filename: &str) -> Result<bool> {
        let dir = self.existing_dir(project)?;
        Ok(validate_plain_filename(filename).is_ok() && dir.join(phase.dir_name()).join(filename).is_file())
    }

    pub fn remove_artifact(&self, project: &str, phase: Phase, filename: &str) -> Result<()> {
        validate_plain_filename(filename)?;
        let dir = self.existing_dir(project)?;
        let lock = self.lock_for(project);
        let _g = Self::write_guard(&lock);
        match fs::remove_file(dir.join(phase.dir_name()).join(filename)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    /// Writes a sidecar under `.meta/<phase dir>/`.
    pub fn write_meta(&self, project: &str, phase: Phase, filename: &str, bytes: &[u8]) -> Result<()> {
        validate_plain_filename(filename)?;
        let dir = self.existing_dir(project)?;
        let lock = self.lock_for(project);
        let _g = Self::write_guard(&lock);
        let meta_dir = dir.join(META_DIR).join(phase.dir_name());
        fs::create_dir_all(&meta_dir)?;
        write_atomic(&meta_dir.join(filename), bytes)?;
        Ok(())
    }

    /// Reads a sidecar; `None` when absent.
    pub fn read_meta(&self, project: &str, phase: Phase, filename: &str) -> Result<Option<Vec<u8>>> {
        validate_plain_filename(filename)?;
        let dir = self.existing_dir(project)?;
        let lock = self.lock_for(project);
        let _g = Self::read_guard(&lock);
        match fs::read(dir.join(META_DIR).join(phase.dir_name()).join(filename)) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Removes every sidecar of a phase.
    pub fn clear_meta(&self, project: &str, phase: Phase) -> Result<()> {
        let dir = self.existing_dir(project)?;
        let lock = self.lock_for(project);
        let _g = Self::write_guard(&lock);
        match fs::remove_dir_all(dir.join(META_DIR).join(phase.dir_name())) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }
}

pub fn file_stem(filename: &str) -> &str {
    match filename.rfind('.') {
        Some(idx) if idx > 0 => &filename[..idx],
        _ => filename,
    }
}

const ILLEGAL_CHARS: &[char] = &['/', '\\', ':', '*', '?', '"', '<', '>', '|'];

fn name_problem(name: &str) -> Option<&'static str> {
    if name.is_empty() {
        return Some("must not be empty");
    }
    if name.len() > 200 {
        return Some("longer than 200 bytes");
    }
    if name.trim() != name {
        return Some("leading or trailing whitespace");
    }
    if name.starts_with('.') {
        return Some("must not start with a dot");
    }
    if name.chars().any(|c| c.is_control() || ILLEGAL_CHARS.contains(&c)) {
        return Some("contains characters that are illegal in file names");
    }
    None
}

pub fn validate_project_name(name: &str) -> Result<()> {
    match name_problem(name) {
        Some(reason) => Err(StoreError::InvalidName {
            name: name.to_string(),
            reason,
        }),
        None => Ok(()),
    }
}

fn validate_plain_filename(name: &str) -> Result<()> {
    match name_problem(name) {
        Some(reason) => Err(StoreError::InvalidFilename {
            name: name.to_string(),
            reason,
        }),
        None => Ok(()),
    }
}

pub fn validate_document_filename(name: &str) -> Result<()> {
    validate_plain_filename(name)?;
    if !name.to_ascii_lowercase().ends_with(".txt") || name.len() <= 4 {
        return Err(StoreError::InvalidFilename {
            name: name.to_string(),
            reason: "must have a .txt extension",
        });
    }
    Ok(())
}

/// Decodes document bytes as UTF-8 (dropping a leading BOM), falling back
/// to Windows-1252.
///
/// Input is rejected when it is empty after trimming whitespace, or when it
/// looks binary (NUL bytes or control characters outside tab/newline/form
/// feed after decoding).
pub fn decode_text(filename: &str, bytes: &[u8]) -> Result<String> {
    let text = match std::str::from_utf8(bytes) {
        Ok(s) => s.strip_prefix('\u{feff}').unwrap_or(s).to_string(),
        Err(_) => {
            let (decoded, _, had_errors) = encoding_rs::WINDOWS_1252.decode(bytes);
            if had_errors {
                return Err(StoreError::NotUtf8Decodable(filename.to_string()));
            }
            decoded.into_owned()
        }
    };
    if text.chars().any(|c| c.is_control() && !matches!(c, '\t' | '\n' | '\r' | '\u{c}')) {
        return Err(StoreError::NotUtf8Decodable(filename.to_string()));
    }
    if text.trim().is_empty() {
        return Err(StoreError::EmptyDocument(filename.to_string()));
    }
    Ok(text)
}

fn load_record(dir: &Path) -> Result<ProjectRecord> {
    let bytes = fs::read(dir.join(PROJECT_FILE))?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptMetadata(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
    write_atomic(path, &bytes)
}

/// Writes via a temp file in the same directory, then renames over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let parent = path.parent().ok_or_else(|| io::Error::other("path has no parent"))?;
    let tmp_dir = tmp_dir_for(parent);
    fs::create_dir_all(&tmp_dir)?;
    let tmp = tmp_dir.join(format!(".tmp-{}", uuid::Uuid::new_v4()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Temp files go to `<project>/.meta/tmp` so they never show up in a phase
/// directory listing; outside a project the parent directory is used.
fn tmp_dir_for(parent: &Path) -> PathBuf {
    match parent.parent() {
        Some(project) if project.join(PROJECT_FILE).is_file() => project.join(META_DIR).join("tmp"),
        _ => match parent.parent().and_then(Path::parent) {
            Some(project) if project.join(PROJECT_FILE).is_file() => project.join(META_DIR).join("tmp"),
            _ => parent.to_path_buf(),
        },
    }
}
