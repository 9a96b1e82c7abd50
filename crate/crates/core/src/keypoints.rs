//! Keypoint sources: lesion segmentation masks and artifact annotations,
//! plus the JSON annotation file format.
//!
//! Annotation files hold one JSON array per split:
//!
//! ```json
//! [{"image_id": "img_0001", "points": [{"row": 3, "col": 4, "type": "ruler"}]}]
//! ```

use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::selection::{Keypoint, KeypointSet, KeypointTag};

/// Artifact types that can be located with a handful of clicks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    DarkCorner,
    Ruler,
    InkMarking,
    Patch,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 4] = [
        ArtifactKind::DarkCorner,
        ArtifactKind::Ruler,
        ArtifactKind::InkMarking,
        ArtifactKind::Patch,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ArtifactKind::DarkCorner => "dark_corner",
            ArtifactKind::Ruler => "ruler",
            ArtifactKind::InkMarking => "ink_marking",
            ArtifactKind::Patch => "patch",
        }
    }
}

/// Binary lesion mask, `true` = lesion foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    mask: Array2<bool>,
}

impl SegmentationMask {
    pub fn new(mask: Array2<bool>) -> Result<Self> {
        let (h, w) = mask.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape("segmentation mask must be non-empty".into()));
        }
        Ok(Self { mask })
    }

    /// 8-bit grayscale values thresholded at 128.
    pub fn from_gray(values: &Array2<u8>) -> Result<Self> {
        Self::new(values.mapv(|v| v >= 128))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        let values = Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::from_gray(&values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (h, w) = self.dim();
        let raw: Vec<u8> = self.mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, raw)
            .ok_or_else(|| Error::Shape("mask buffer size mismatch".into()))?;
        img.save(path)?;
        Ok(())
    }

    pub fn dim(&self) -> (usize, usize) {
        self.mask.dim()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.mask[[row, col]]
    }

    pub fn as_array(&self) -> &Array2<bool> {
        &self.mask
    }

    /// Foreground and background pixels in row-major order.
    fn partition(&self) -> (Vec<Keypoint>, Vec<Keypoint>) {
        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for ((r, c), &m) in self.mask.indexed_iter() {
            if m {
                fg.push(Keypoint::new(r, c));
            } else {
                bg.push(Keypoint::new(r, c));
            }
        }
        (fg, bg)
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedPoint {
    pub row: usize,
    pub col: usize,
    #[serde(rename = "type")]
    pub kind: ArtifactKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactAnnotation {
    pub image_id: String,
    pub points: Vec<AnnotatedPoint>,
}

impl ArtifactAnnotation {
    pub fn check_bounds(&self, (height, width): (usize, usize)) -> Result<()> {
        for (index, p) in self.points.iter().enumerate() {
            if p.row >= height || p.col >= width {
                return Err(Error::Coordinate {
                    kind: "artifact",
                    index,
                    row: p.row as i64,
                    col: p.col as i64,
                    height,
                    width,
                });
            }
        }
        Ok(())
    }
}

fn pick(pool: &[Keypoint], n: usize, rng: &mut ChaCha8Rng) -> Vec<Keypoint> {
    sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
}

/// `n_per_side` lesion pixels as positives and `n_per_side` background
/// pixels as negatives, both drawn without replacement.
pub fn sample_from_mask(mask: &SegmentationMask, n_per_side: usize, seed: u64) -> Result<KeypointSet> {
    if n_per_side == 0 {
        return Err(Error::Precondition("n_per_side must be at least 1".into()));
    }
    let (fg, bg) = mask.partition();
    if n_per_side > fg.len() || n_per_side > bg.len() {
        return Err(Error::Sampling {
            requested: n_per_side,
            foreground: fg.len(),
            background: bg.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive = pick(&fg, n_per_side, &mut rng);
    let negative = pick(&bg, n_per_side, &mut rng);
    let tags = vec![KeypointTag::Background; n_per_side];
    KeypointSet::with_tags(positive, negative, tags)
}

/// Positives from the lesion mask, negatives from annotated artifact points.
///
/// Artifact points are drawn without replacement when there are enough of
/// them and with replacement otherwise. An artifact point that falls inside
/// the lesion is still a valid negative; positives never reuse a pixel that
/// was drawn as a negative.
pub fn sample_from_artifacts(
    mask: &SegmentationMask,
    ann: &ArtifactAnnotation,
    n_per_side: usize,
    seed: u64,
) -> Result<KeypointSet> {
    if n_per_side == 0 {
        return Err(Error::Precondition("n_per_side must be at least 1".into()));
    }
    if ann.points.is_empty() {
        return Err(Error::EmptyAnnotation {
            image_id: ann.image_id.clone(),
        });
    }
    ann.check_bounds(mask.dim())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn: Vec<&AnnotatedPoint> = if n_per_side <= ann.points.len() {
        sample(&mut rng, ann.points.len(), n_per_side)
            .into_iter()
            .map(|i| &ann.points[i])
            .collect()
    } else {
        (0..n_per_side)
            .map(|_| &ann.points[rng.gen_range(0..ann.points.len())])
            .collect()
    };
    let negative: Vec<Keypoint> = drawn.iter().map(|p| Keypoint::new(p.row, p.col)).collect();
    let tags: Vec<KeypointTag> = drawn.iter().map(|p| KeypointTag::Artifact(p.kind)).collect();

    let (fg, bg) = mask.partition();
    let eligible: Vec<Keypoint> = fg.into_iter().filter(|k| !negative.contains(k)).collect();
    if n_per_side > eligible.len() {
        return Err(Error::Sampling {
            requested: n_per_side,
            foreground: eligible.len(),
            background: bg.len(),
        });
    }
    let positive = pick(&eligible, n_per_side, &mut rng);
    KeypointSet::with_tags(positive, negative, tags)
}

/// Parse an annotation document. Records failing validation are reported
/// by their index in the array.
pub fn parse_annotations(text: &str) -> Result<Vec<ArtifactAnnotation>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let raw: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| Error::Parse {
        record: 0,
        message: format!("line {}: {e}", e.line()),
    })?;
    raw.into_iter()
        .enumerate()
        .map(|(record, value)| {
            serde_json::from_value::<ArtifactAnnotation>(value).map_err(|e| Error::Parse {
                record,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_annotations(path: &Path) -> Result<Vec<ArtifactAnnotation>> {
    parse_annotations(&std::fs::read_to_string(path)?)
}

pub fn write_annotations(annotations: &[ArtifactAnnotation], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(annotations)?;
    std::fs::write(path, text)?;
    Ok(())
}
