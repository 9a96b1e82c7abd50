use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::Json;
use serde::{Deserialize, Serialize};
use tts_core::keypoints::ArtifactAnnotation;
use tts_core::model::attention_from_features;
use tts_core::model::tta::average_probabilities;
use tts_core::model::{argmax, AttentionMap};
use tts_core::selection::{apply_mask, tts_select, Keypoint, KeypointSet, SelectionConfig, SelectionMask};
use tts_core::trapset::{Artifact, Label};
use tts_core::Error;

use crate::error::ApiError;
use crate::state::AppState;

type AppResult<T> = Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    pub artifact_flags: BTreeMap<String, bool>,
}

pub(crate) async fn list_images(State(state): State<Arc<AppState>>) -> Json<Vec<ImageEntry>> {
    let entries = state
        .corpus
        .samples()
        .map(|s| ImageEntry {
            image_id: s.record.image_id.clone(),
            label: state.study_mode.then_some(s.record.label),
            artifact_flags: Artifact::ALL
                .iter()
                .map(|a| (a.as_str().to_string(), s.record.artifacts[a.index()]))
                .collect(),
        })
        .collect();
    Json(entries)
}

pub(crate) async fn image_png(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> AppResult<impl IntoResponse> {
    let sample = state.sample(&id).ok_or_else(|| unknown_image(&id))?;
    let png = sample.image.to_png()?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

/// Pixel coordinates as `[row, col]` pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointLists {
    #[serde(default)]
    pub positive: Vec<[i64; 2]>,
    #[serde(default)]
    pub negative: Vec<[i64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub image_id: String,
    #[serde(default)]
    pub keypoints: KeypointLists,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_keep_fraction")]
    pub keep_fraction: f64,
    #[serde(default = "default_true")]
    pub use_tta: bool,
}

fn default_alpha() -> f64 {
    0.4
}

fn default_keep_fraction() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresSummary {
    pub min: f64,
    pub max: f64,
    /// Lowest score among the kept channels.
    pub selected_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub image_id: String,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub selected_channels: Vec<usize>,
    pub attention_before: Vec<Vec<f64>>,
    pub attention_after: Vec<Vec<f64>>,
    /// Absent when the request carried no keypoints.
    pub scores_summary: Option<ScoresSummary>,
}

pub(crate) async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> AppResult<Json<PredictResponse>> {
    let req: PredictRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("invalid request body: {e}")))?;
    let response = tokio::task::spawn_blocking(move || run_predict(&state, &req))
        .await
        .map_err(|e| ApiError::new(axum::http::StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(response))
}

fn run_predict(state: &AppState, req: &PredictRequest) -> AppResult<PredictResponse> {
    let sample = state.sample(&req.image_id).ok_or_else(|| unknown_image(&req.image_id))?;
    let cfg = SelectionConfig::new(req.alpha, req.keep_fraction)?;
    let keys = keypoint_set(&req.keypoints, sample.image.size())?;

    let model = state.model();
    let native = state.features(sample)?;
    let (mask, summary) = match &keys {
        Some(keys) => {
            let sel = tts_select(&native, keys, &cfg)?;
            let s = &sel.scores.scores;
            let summary = ScoresSummary {
                min: s.iter().copied().fold(f64::INFINITY, f64::min),
                max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                selected_min: sel.mask.selected().iter().map(|&c| s[c]).fold(f64::INFINITY, f64::min),
            };
            (sel.mask, Some(summary))
        }
        None => (SelectionMask::all(native.channels()), None),
    };

    let probabilities = if req.use_tta {
        average_probabilities(model, &state.replica_features(sample)?, Some(&mask))?
    } else {
        model.classify(&apply_mask(&native, &mask)?)?
    };
    let before = attention_from_features(model, &native, None)?;
    let after = attention_from_features(model, &native, Some(&mask))?;
    Ok(PredictResponse {
        image_id: req.image_id.clone(),
        predicted_class: argmax(&probabilities),
        probabilities,
        selected_channels: mask.selected().to_vec(),
        attention_before: rounded(&before),
        attention_after: rounded(&after),
        scores_summary: summary,
    })
}

/// `None` when both lists are empty, which means "no selection".
fn keypoint_set(lists: &KeypointLists, (height, width): (usize, usize)) -> AppResult<Option<KeypointSet>> {
    let convert = |kind: &'static str, points: &[[i64; 2]]| -> AppResult<Vec<Keypoint>> {
        points
            .iter()
            .enumerate()
            .map(|(index, &[row, col])| {
                if row < 0 || col < 0 || row as u64 >= height as u64 || col as u64 >= width as u64 {
                    return Err(Error::Coordinate {
                        kind,
                        index,
                        row,
                        col,
                        height,
                        width,
                    }
                    .into());
                }
                Ok(Keypoint::new(row as usize, col as usize))
            })
            .collect()
    };
    let positive = convert("positive", &lists.positive)?;
    let negative = convert("negative", &lists.negative)?;
    if positive.is_empty() && negative.is_empty() {
        return Ok(None);
    }
    Ok(Some(KeypointSet::new(positive, negative)?))
}

fn rounded(map: &AttentionMap) -> Vec<Vec<f64>> {
    map.heat
        .outer_iter()
        .map(|row| row.iter().map(|&v| (f64::from(v) * 1000.0).round() / 1000.0).collect())
        .collect()
}

pub(crate) async fn store_annotation(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> AppResult<Json<ArtifactAnnotation>> {
    let annotation: ArtifactAnnotation =
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("invalid annotation: {e}")))?;
    let sample = state
        .sample(&annotation.image_id)
        .ok_or_else(|| unknown_image(&annotation.image_id))?;
    annotation.check_bounds(sample.image.size())?;
    let stored = annotation.clone();
    tokio::task::spawn_blocking(move || state.store_annotation(annotation))
        .await
        .map_err(|e| ApiError::new(axum::http::StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(stored))
}

pub(crate) async fn get_annotation(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> AppResult<Json<ArtifactAnnotation>> {
    if state.sample(&id).is_none() {
        return Err(unknown_image(&id));
    }
    state
        .annotation(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no annotation stored for image {id:?}")))
}

fn unknown_image(id: &str) -> ApiError {
    ApiError::not_found(format!("unknown image {id:?}"))
}
