//! Encrypted-at-rest credential store.
//!
//! Keys are sealed with ChaCha20-Poly1305 under a random 32-byte store key
//! kept in `<store>.key`. Both files are created owner-only.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use url::Url;

use super::{ProviderKind, ProviderProfile, Secret};

/// OpenAI models offered without any registration.
pub const BUILTIN_MODELS: [&str; 3] = ["gpt-4", "gpt-4o", "gpt-4o-mini"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CredentialError {
    #[error("azure profiles need both an endpoint and a deployment name")]
    MissingAzureFields,
    #[error("a credential labelled `{0}` already exists")]
    DuplicateLabel(String),
    #[error("no credential labelled `{0}`")]
    UnknownLabel(String),
    #[error("no credential can serve model `{0}`")]
    NoCredentialForModel(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("credential store unreadable: {0}")]
    Corrupt(String),
    #[error("credential store i/o: {0}")]
    Io(String),
}

impl From<io::Error> for CredentialError {
    fn from(e: io::Error) -> Self {
        CredentialError::Io(e.to_string())
    }
}

/// What a credential looks like from the outside: the key is masked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialSummary {
    pub label: String,
    pub kind: ProviderKind,
    pub masked_key: String,
    pub endpoint: Option<String>,
    pub deployment_name: Option<String>,
    /// e.g. `OpenAI: ****sU`
    pub display: String,
}

impl CredentialSummary {
    fn of(profile: &ProviderProfile) -> Self {
        let masked_key = profile.api_key.masked();
        Self {
            label: profile.label.clone(),
            kind: profile.kind,
            display: format!("{}: {}", profile.kind, masked_key),
            masked_key,
            endpoint: profile.endpoint.as_ref().map(Url::to_string),
            deployment_name: profile.deployment_name.clone(),
        }
    }
}

/// Built-in models first, then one entry per Azure deployment ordered by
/// credential label.
pub fn list_models(credentials: &[CredentialSummary]) -> Vec<String> {
    let mut azure: Vec<&CredentialSummary> = credentials.iter().filter(|c| c.kind == ProviderKind::Azure).collect();
    azure.sort_by(|a, b| a.label.cmp(&b.label));
    let mut models: Vec<String> = BUILTIN_MODELS.iter().map(|m| m.to_string()).collect();
    for c in azure {
        if let Some(d) = &c.deployment_name {
            if !models.contains(d) {
                models.push(d.clone());
            }
        }
    }
    models
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct StoreFile {
    entries: Vec<SealedEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SealedEntry {
    label: String,
    kind: ProviderKind,
    endpoint: Option<Url>,
    deployment_name: Option<String>,
    nonce: String,
    ciphertext: String,
}

pub struct CredentialStore {
    path: PathBuf,
    cipher: ChaCha20Poly1305,
    write_lock: Mutex<()>,
}

impl std::fmt::Debug for CredentialStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CredentialStore").field("path", &self.path).finish_non_exhaustive()
    }
}

impl CredentialStore {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, CredentialError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let key_path = key_path(&path);
        let key_bytes = match fs::read(&key_path) {
            Ok(bytes) if bytes.len() == 32 => bytes,
            Ok(_) => return Err(CredentialError::Corrupt("store key has the wrong length".into())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                let mut bytes = vec![0u8; 32];
                rand::rng().fill_bytes(&mut bytes);
                write_private(&key_path, &bytes)?;
                bytes
            }
            Err(e) => return Err(e.into()),
        };
        let key: [u8; 32] = key_bytes.try_into().expect("length checked");
        let cipher = ChaCha20Poly1305::new(&Key::from(key));
        Ok(Self {
            path,
            cipher,
            write_lock: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn load(&self) -> Result<StoreFile, CredentialError> {
        match fs::read(&self.path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| CredentialError::Corrupt(e.to_string())),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(StoreFile::default()),
            Err(e) => Err(e.into()),
        }
    }

    fn save(&self, file: &StoreFile) -> Result<(), CredentialError> {
        let bytes = serde_json::to_vec_pretty(file).map_err(|e| CredentialError::Corrupt(e.to_string()))?;
        write_private(&self.path, &bytes)?;
        Ok(())
    }

    fn seal(&self, secret: &Secret) -> (String, String) {
        let mut nonce = [0u8; 12];
        rand::rng().fill_bytes(&mut nonce);
        let ciphertext = self
            .cipher
            .encrypt(&Nonce::from(nonce), secret.expose().as_bytes())
            .expect("encryption of in-memory buffer cannot fail");
        (hex::encode(nonce), hex::encode(ciphertext))
    }

    fn open_entry(&self, entry: &SealedEntry) -> Result<ProviderProfile, CredentialError> {
        let corrupt = || CredentialError::Corrupt(format!("cannot decrypt credential `{}`", entry.label));
        let nonce: [u8; 12] = hex::decode(&entry.nonce)
            .ok()
            .and_then(|n| n.try_into().ok())
            .ok_or_else(corrupt)?;
        let ciphertext = hex::decode(&entry.ciphertext).map_err(|_| corrupt())?;
        let plain = self
            .cipher
            .decrypt(&Nonce::from(nonce), ciphertext.as_slice())
            .map_err(|_| corrupt())?;
        Ok(ProviderProfile {
            kind: entry.kind,
            label: entry.label.clone(),
            api_key: Secret::new(String::from_utf8(plain).map_err(|_| corrupt())?),
            endpoint: entry.endpoint.clone(),
            deployment_name: entry.deployment_name.clone(),
        })
    }

    pub fn add(&self, profile: ProviderProfile) -> Result<CredentialSummary, CredentialError> {
        profile.validate()?;
        let _g = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut file = self.load()?;
        if file.entries.iter().any(|e| e.label == profile.label) {
            return Err(CredentialError::DuplicateLabel(profile.label));
        }
        let (nonce, ciphertext) = self.seal(&profile.api_key);
        file.entries.push(SealedEntry {
            label: profile.label.clone(),
            kind: profile.kind,
            endpoint: profile.endpoint.clone(),
            deployment_name: profile.deployment_name.clone(),
            nonce,
            ciphertext,
        });
        self.save(&file)?;
        Ok(CredentialSummary::of(&profile))
    }

    pub fn remove(&self, label: &str) -> Result<(), CredentialError> {
        let _g = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut file = self.load()?;
        let before = file.entries.len();
        file.entries.retain(|e| e.label != label);
        if file.entries.len() == before {
            return Err(CredentialError::UnknownLabel(label.to_string()));
        }
        self.save(&file)
    }

    /// Masked listing: OpenAI entries first, then Azure, each by label.
    pub fn list(&self) -> Result<Vec<CredentialSummary>, CredentialError> {
        let file = self.load()?;
        let mut out: Vec<CredentialSummary> = file
            .entries
            .iter()
            .map(|e| {
                let profile = self.open_entry(e)?;
                Ok(CredentialSummary::of(&profile))
            })
            .collect::<Result<_, CredentialError>>()?;
        out.sort_by(|a, b| (a.kind, &a.label).cmp(&(b.kind, &b.label)));
        Ok(out)
    }

    pub fn get(&self, label: &str) -> Result<ProviderProfile, CredentialError> {
        let file = self.load()?;
        let entry = file
            .entries
            .iter()
            .find(|e| e.label == label)
            .ok_or_else(|| CredentialError::UnknownLabel(label.to_string()))?;
        self.open_entry(entry)
    }

    pub fn models(&self) -> Result<Vec<String>, CredentialError> {
        Ok(list_models(&self.list()?))
    }

    /// Picks the credential that serves `model_id`: an Azure profile whose
    /// deployment has that name, otherwise the first OpenAI profile for a
    /// built-in model.
    pub fn resolve_model(&self, model_id: &str) -> Result<ProviderProfile, CredentialError> {
        let summaries = self.list()?;
        if let Some(azure) = summaries
            .iter()
            .find(|s| s.kind == ProviderKind::Azure && s.deployment_name.as_deref() == Some(model_id))
        {
            return self.get(&azure.label);
        }
        if let Some(openai) = summaries.iter().find(|s| s.kind == ProviderKind::OpenAi) {
            return self.get(&openai.label);
        }
        Err(CredentialError::NoCredentialForModel(model_id.to_string()))
    }
}

fn key_path(store: &Path) -> PathBuf {
    let mut name = store.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".key");
    store.with_file_name(name)
}

fn write_private(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4()));
    {
        let mut opts = fs::OpenOptions::new();
        opts.write(true).create_new(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        let mut f = opts.open(&tmp)?;
        io::Write::write_all(&mut f, bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (tempfile::TempDir, CredentialStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = CredentialStore::open(dir.path().join("creds.json")).unwrap();
        (dir, store)
    }

    fn azure(label: &str, deployment: &str) -> ProviderProfile {
        ProviderProfile::azure(
            label,
            "azure-secret-key",
            Url::parse("https://uni.openai.azure.com").unwrap(),
            deployment,
        )
    }

    #[test]
    fn masked_listing() {
        let (_d, store) = store();
        let summary = store.add(ProviderProfile::openai("work", "sk-proj-0123456789sU")).unwrap();
        assert_eq!(summary.display, "OpenAI: ****sU");
        assert_eq!(store.list().unwrap()[0].display, "OpenAI: ****sU");
    }

    #[test]
    fn key_never_stored_in_plaintext() {
        let (dir, store) = store();
        store.add(ProviderProfile::openai("work", "sk-very-secret-value")).unwrap();
        for entry in fs::read_dir(dir.path()).unwrap() {
            let bytes = fs::read(entry.unwrap().path()).unwrap();
            assert!(!String::from_utf8_lossy(&bytes).contains("sk-very-secret-value"));
        }
        // still recoverable
        assert_eq!(store.get("work").unwrap().api_key.expose(), "sk-very-secret-value");
        let reopened = CredentialStore::open(store.path()).unwrap();
        assert_eq!(reopened.get("work").unwrap().api_key.expose(), "sk-very-secret-value");
    }

    #[cfg(unix)]
    #[test]
    fn files_are_owner_only() {
        use std::os::unix::fs::PermissionsExt;
        let (_d, store) = store();
        store.add(ProviderProfile::openai("work", "k")).unwrap();
        for path in [store.path().to_path_buf(), key_path(store.path())] {
            let mode = fs::metadata(&path).unwrap().permissions().mode() & 0o777;
            assert_eq!(mode, 0o600, "{}", path.display());
        }
    }

    #[test]
    fn validation_errors() {
        let (_d, store) = store();
        let mut p = azure("dept", "dep");
        p.endpoint = None;
        assert_eq!(store.add(p), Err(CredentialError::MissingAzureFields));
        store.add(ProviderProfile::openai("work", "a")).unwrap();
        assert_eq!(
            store.add(ProviderProfile::openai("work", "b")),
            Err(CredentialError::DuplicateLabel("work".into()))
        );
        assert_eq!(store.remove("nope"), Err(CredentialError::UnknownLabel("nope".into())));
    }

    #[test]
    fn model_list_tracks_deployments() {
        let (_d, store) = store();
        assert_eq!(store.models().unwrap(), ["gpt-4", "gpt-4o", "gpt-4o-mini"]);
        store.add(azure("dept", "dept-gpt4o")).unwrap();
        let models = store.models().unwrap();
        assert_eq!(models.len(), 4);
        assert_eq!(models.last().unwrap(), "dept-gpt4o");
        store.remove("dept").unwrap();
        assert_eq!(store.models().unwrap().len(), 3);
    }

    #[test]
    fn deployments_ordered_by_label() {
        let summaries = vec![
            CredentialSummary::of(&azure("zeta", "z-dep")),
            CredentialSummary::of(&azure("alpha", "a-dep")),
        ];
        assert_eq!(list_models(&summaries)[3..], ["a-dep".to_string(), "z-dep".to_string()]);
    }

    #[test]
    fn model_resolution() {
        let (_d, store) = store();
        assert!(matches!(
            store.resolve_model("gpt-4o"),
            Err(CredentialError::NoCredentialForModel(_))
        ));
        store.add(ProviderProfile::openai("work", "k1")).unwrap();
        store.add(azure("dept", "dept-gpt4o")).unwrap();
        assert_eq!(store.resolve_model("gpt-4o").unwrap().label, "work");
        assert_eq!(store.resolve_model("dept-gpt4o").unwrap().label, "dept");
    }

    #[test]
    fn tampered_ciphertext_is_reported() {
        let (_d, store) = store();
        store.add(ProviderProfile::openai("work", "k1")).unwrap();
        let mut file: StoreFile = serde_json::from_slice(&fs::read(store.path()).unwrap()).unwrap();
        file.entries[0].ciphertext = "00".repeat(20);
        fs::write(store.path(), serde_json::to_vec(&file).unwrap()).unwrap();
        assert!(matches!(store.get("work"), Err(CredentialError::Corrupt(_))));
    }
}
