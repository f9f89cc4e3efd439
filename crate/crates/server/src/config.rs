//! Service configuration: defaults, then an optional TOML file, then
//! environment variables and command-line flags.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub bind: SocketAddr,
    pub projects_root: PathBuf,
    pub credential_store: PathBuf,
    pub prompt_dir: PathBuf,
    /// Attempts per LLM request, including the first.
    pub max_attempts: u32,
    /// Jobs running at the same time across all projects.
    pub max_workers: usize,
    /// Cap on LLM requests in flight per job; unlimited when absent.
    pub max_concurrent_requests: Option<usize>,
    pub request_timeout_secs: u64,
    pub azure_api_version: String,
    /// Bearer token required on every request when set.
    pub api_token: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            projects_root: PathBuf::from("./projects"),
            credential_store: PathBuf::from("./credentials.json"),
            prompt_dir: PathBuf::from("./prompts"),
            max_attempts: 5,
            max_workers: 2,
            max_concurrent_requests: None,
            request_timeout_secs: 180,
            azure_api_version: thematic_core::gateway::DEFAULT_AZURE_API_VERSION.to_string(),
            api_token: None,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "thematic-server", version, about = "HTTP API for LLM-assisted thematic analysis")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, env = "THEMATIC_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, env = "THEMATIC_BIND")]
    pub bind: Option<SocketAddr>,
    #[arg(long, env = "THEMATIC_PROJECTS_ROOT")]
    pub projects_root: Option<PathBuf>,
    #[arg(long, env = "THEMATIC_CREDENTIAL_STORE")]
    pub credential_store: Option<PathBuf>,
    #[arg(long, env = "THEMATIC_PROMPT_DIR")]
    pub prompt_dir: Option<PathBuf>,
    #[arg(long, env = "THEMATIC_MAX_ATTEMPTS")]
    pub max_attempts: Option<u32>,
    #[arg(long, env = "THEMATIC_MAX_WORKERS")]
    pub max_workers: Option<usize>,
    #[arg(long, env = "THEMATIC_MAX_CONCURRENT_REQUESTS")]
    pub max_concurrent_requests: Option<usize>,
    #[arg(long, env = "THEMATIC_REQUEST_TIMEOUT_SECS")]
    pub request_timeout_secs: Option<u64>,
    #[arg(long, env = "THEMATIC_AZURE_API_VERSION")]
    pub azure_api_version: Option<String>,
    #[arg(long, env = "THEMATIC_API_TOKEN", hide_env_values = true)]
    pub api_token: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config file {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

impl Config {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(cli: Cli) -> Result<Self, ConfigError> {
        let mut config = match &cli.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                    path: path.clone(),
                    source,
                })?;
                Self::from_toml(&text, path)?
            }
            None => Self::default(),
        };
        config.apply(cli);
        config.validate()?;
        Ok(config)
    }

    fn apply(&mut self, cli: Cli) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = cli.$field {
                    self.$field = v;
                }
            )*};
        }
        set!(bind, projects_root, credential_store, prompt_dir, max_attempts, max_workers, request_timeout_secs, azure_api_version);
        if cli.max_concurrent_requests.is_some() {
            self.max_concurrent_requests = cli.max_concurrent_requests;
        }
        if cli.api_token.is_some() {
            self.api_token = cli.api_token;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_attempts == 0 {
            return Err(ConfigError::Invalid("max_attempts must be at least 1".into()));
        }
        if self.max_workers == 0 {
            return Err(ConfigError::Invalid("max_workers must be at least 1".into()));
        }
        if self.api_token.as_deref().is_some_and(|t| t.trim().is_empty()) {
            return Err(ConfigError::Invalid("api_token must not be blank".into()));
        }
        Ok(())
    }
}
