use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A step of the analysis pipeline.
///
/// The same enum selects prompt templates, names the artifact directory and
/// keys job mutual exclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[serde(alias = "initial_codes")]
    InitialCoding,
    #[serde(alias = "reduced_codes")]
    Reduction,
    Themes,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::InitialCoding, Phase::Reduction, Phase::Themes];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::InitialCoding => "initial_coding",
            Phase::Reduction => "reduction",
            Phase::Themes => "themes",
        }
    }

    /// Name of the project subdirectory holding this phase's artifacts.
    pub fn dir_name(self) -> &'static str {
        match self {
            Phase::InitialCoding => "initial_codes",
            Phase::Reduction => "reduced_codes",
            Phase::Themes => "themes",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown phase `{0}`")]
pub struct UnknownPhase(pub String);

impl FromStr for Phase {
    type Err = UnknownPhase;

    /// Accepts both the phase name and its artifact directory name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "initial_coding" | "initial_codes" => Ok(Phase::InitialCoding),
            "reduction" | "reduced_codes" => Ok(Phase::Reduction),
            "themes" => Ok(Phase::Themes),
            other => Err(UnknownPhase(other.to_string())),
        }
    }
}
