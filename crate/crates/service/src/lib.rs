//! HTTP front end for interactive keypoint-guided channel selection.
//!
//! Routes:
//!
//! ```text
//! GET  /api/images                  list images (labels only in study mode)
//! GET  /api/images/{id}/image       PNG bytes
//! POST /api/predict                 prediction and attention with selection
//! POST /api/annotations             store artifact points for one image
//! GET  /api/annotations/{id}        read them back
//! ```

mod api;
mod error;
mod state;

use std::path::PathBuf;
use std::sync::Arc;

use axum::routing::{get, post};
use axum::Router;

pub use api::{ImageEntry, KeypointLists, PredictRequest, PredictResponse, ScoresSummary};
pub use error::ApiError;
pub use state::AppState;

/// Default number of test-time augmentation replicas.
pub const DEFAULT_REPLICAS: usize = 50;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    /// Where annotations are persisted; defaults to `<corpus>/annotations.json`.
    pub annotations: Option<PathBuf>,
    pub study_mode: bool,
    pub tta_replicas: usize,
    /// Seed of the augmentation policy used for TTA replicas.
    pub tta_seed: u64,
    pub cache_features: bool,
}

impl ServiceConfig {
    pub fn new(checkpoint: impl Into<PathBuf>, corpus: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint: checkpoint.into(),
            corpus: corpus.into(),
            annotations: None,
            study_mode: false,
            tta_replicas: DEFAULT_REPLICAS,
            tta_seed: 0,
            cache_features: true,
        }
    }

    pub fn annotations_path(&self) -> PathBuf {
        self.annotations
            .clone()
            .unwrap_or_else(|| self.corpus.join("annotations.json"))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/images", get(api::list_images))
        .route("/api/images/{id}/image", get(api::image_png))
        .route("/api/predict", post(api::predict))
        .route("/api/annotations", post(api::store_annotation))
        .route("/api/annotations/{id}", get(api::get_annotation))
        .with_state(state)
}
