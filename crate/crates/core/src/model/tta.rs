//! Test-time augmentation, optionally combined with channel selection.
//!
//! With selection, the mask is computed once from the un-augmented image and
//! the same mask is applied to every replica.

use crate::error::Result;
use crate::image::Image;
use crate::model::{AugmentationPolicy, SplitModel};
use crate::selection::{apply_mask, tts_select, FeatureMap, KeypointSet, Selection, SelectionConfig, SelectionMask};

#[derive(Debug, Clone)]
pub struct TtaPrediction {
    pub probabilities: Vec<f64>,
    /// Present when the prediction used keypoint selection.
    pub selection: Option<Selection>,
}

/// Extractor output for every replica of `image`.
pub fn replica_features(model: &SplitModel, image: &Image, policy: &AugmentationPolicy) -> Result<Vec<FeatureMap>> {
    policy.validate()?;
    (0..policy.replica_count)
        .map(|i| model.features(&policy.replica(image, i)))
        .collect()
}

/// Mean class probabilities over precomputed replica features, masking each
/// replica first when `mask` is given.
pub fn average_probabilities(
    model: &SplitModel,
    replicas: &[FeatureMap],
    mask: Option<&SelectionMask>,
) -> Result<Vec<f64>> {
    let mut sum = vec![0.0f64; model.head().classes()];
    for fmap in replicas {
        let probs = match mask {
            Some(m) => model.classify(&apply_mask(fmap, m)?)?,
            None => model.classify(fmap)?,
        };
        for (s, p) in sum.iter_mut().zip(probs) {
            *s += p;
        }
    }
    let n = replicas.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

pub fn predict_tta(
    model: &SplitModel,
    image: &Image,
    policy: &AugmentationPolicy,
    selection: Option<(&KeypointSet, &SelectionConfig)>,
) -> Result<TtaPrediction> {
    let selection = match selection {
        Some((keys, cfg)) => Some(tts_select(&model.features(image)?, keys, cfg)?),
        None => None,
    };
    let replicas = replica_features(model, image, policy)?;
    let probabilities = average_probabilities(model, &replicas, selection.as_ref().map(|s| &s.mask))?;
    Ok(TtaPrediction {
        probabilities,
        selection,
    })
}
