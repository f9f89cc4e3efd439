//! LLM-assisted thematic analysis.
//!
//! The crate drives the analyst-facing pipeline end to end: documents are
//! ingested into a [`store::ProjectStore`], coded one at a time by
//! [`coding`], folded into a unique codebook by [`reduction`], aggregated
//! into themes by [`themes`], and summarised by [`analytics`]. Every LLM call
//! goes through a [`gateway::Gateway`]; [`gateway::MockProvider`] makes the
//! whole pipeline runnable offline.

pub mod analytics;
pub mod artifacts;
pub mod codec;
pub mod coding;
pub mod gateway;
pub mod jobs;
pub mod phase;
pub mod pipeline;
pub mod prompts;
pub mod reduction;
pub mod store;
pub mod themes;

pub use phase::Phase;
