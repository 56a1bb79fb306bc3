//! Session-oriented HTTP+JSON API for interactive reconstruction.
//!
//! A client uploads a filament raster, edits polarity reference points,
//! launches ensemble reconstructions (optionally warm-started from the
//! previous round), polls job progress and fetches published results.

mod api;
mod error;
mod state;

use std::path::PathBuf;

pub use api::router;
pub use error::ApiError;
pub use state::{JobState, Preset, ReconstructOptions};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Largest accepted raster upload.
    pub max_upload_bytes: usize,
    /// Reconstruction jobs running at once.
    pub workers: usize,
    pub max_members: usize,
    /// Published versions kept per session (at least 2).
    pub retain_versions: usize,
    /// Directory for best-effort session snapshots.
    pub snapshot_dir: Option<PathBuf>,
    /// Allowed CORS origin; any origin when unset.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_upload_bytes: 8 << 20,
            workers: 1,
            max_members: 8,
            retain_versions: 8,
            snapshot_dir: None,
            cors_origin: None,
        }
    }
}

/// Binds `bind:port` and serves until the process is stopped.
pub async fn serve(bind: &str, port: u16, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((bind, port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(config)).await
}
