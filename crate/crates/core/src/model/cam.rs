//! Class-activation maps for models with a linear head over pooled features.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{argmax, ClassifierHead, SplitModel};
use crate::selection::{apply_mask, resize_plane, FeatureMap, SelectionMask};

/// Spatial importance at image resolution, min-max normalised to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub heat: Array2<f32>,
    /// The raw map was constant; `heat` is all zeros.
    pub constant: bool,
    pub predicted_class: usize,
}

impl AttentionMap {
    /// Row-major position of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut value = f32::NEG_INFINITY;
        for ((r, c), &v) in self.heat.indexed_iter() {
            if v > value {
                value = v;
                best = (r, c);
            }
        }
        best
    }
}

/// CAM for the predicted class: the head's weights for that class projected
/// onto the (optionally masked) feature map, upsampled to the image size.
pub fn attention_map(model: &SplitModel, image: &Image, mask: Option<&SelectionMask>) -> Result<AttentionMap> {
    attention_from_features(model, &model.features(image)?, mask)
}

/// As [`attention_map`], from an already extracted feature map. The map is
/// upsampled to the feature map's source size.
pub fn attention_from_features(
    model: &SplitModel,
    fmap: &FeatureMap,
    mask: Option<&SelectionMask>,
) -> Result<AttentionMap> {
    let head = match model.head() {
        ClassifierHead::Linear(l) => l,
        ClassifierHead::Mlp(_) => {
            return Err(Error::UnsupportedArchitecture(
                "class-activation maps need a linear head over pooled features".into(),
            ))
        }
    };
    let masked;
    let fmap = match mask {
        Some(m) => {
            masked = apply_mask(fmap, m)?;
            &masked
        }
        None => fmap,
    };
    let predicted_class = argmax(&model.classify(&fmap)?);
    let weights = head.weight.row(predicted_class);

    let (_, h, w) = fmap.values().dim();
    let mut raw = Array2::<f32>::zeros((h, w));
    for (ch, &wc) in fmap.values().outer_iter().zip(weights.iter()) {
        if wc != 0.0 {
            raw.scaled_add(wc, &ch);
        }
    }
    let mut heat = resize_plane(raw.view(), fmap.source_size());
    let lo = heat.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = heat.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let constant = !(hi > lo);
    if constant {
        heat.fill(0.0);
    } else {
        let span = hi - lo;
        heat.mapv_inplace(|v| (v - lo) / span);
    }
    Ok(AttentionMap {
        heat,
        constant,
        predicted_class,
    })
}
