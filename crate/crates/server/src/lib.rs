//! HTTP API over the thematic analysis pipeline.
//!
//! Everything lives under [`API_PREFIX`]. Long-running phases are started as
//! jobs and polled; artifacts are served byte for byte from the project
//! store.

pub mod config;
pub mod error;
pub mod routes;
pub mod state;

pub use config::{Cli, Config};
pub use error::{ApiError, Problem};
pub use routes::{router, API_PREFIX};
pub use state::{AppState, FixedProvider, HttpProviderFactory, ProviderFactory};
