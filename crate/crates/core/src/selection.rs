//! Keypoint-guided channel selection.
//!
//! Given the last-layer activations of a frozen feature extractor and a set of
//! positive / negative pixel keypoints, every channel receives an affinity
//! score
//!
//! ```text
//! score[c] = alpha * sum_{k in positive} fmap[c][k] - (1 - alpha) * sum_{k in negative} fmap[c][k]
//! ```
//!
//! evaluated on the activation map bilinearly upsampled to the source image
//! size. The top `keep_fraction` of channels survive; every other channel is
//! zeroed before the classifier head sees the features.
//!
//! Everything here is a pure function of its inputs.

use ndarray::{Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::keypoints::ArtifactKind;

/// C x H x W activation tensor together with the size of the image it was
/// computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f32>,
    source_size: (usize, usize),
}

impl FeatureMap {
    pub fn new(values: Array3<f32>, source_size: (usize, usize)) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "feature map must be non-empty, got {c}x{h}x{w}"
            )));
        }
        if source_size.0 == 0 || source_size.1 == 0 {
            return Err(Error::Shape(format!(
                "source image size must be non-empty, got {}x{}",
                source_size.0, source_size.1
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "feature map",
                index,
            });
        }
        Ok(Self {
            values,
            source_size,
        })
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    /// `(height_px, width_px)` of the image the activations belong to.
    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f32> {
        self.values
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f32> {
        self.values.index_axis(Axis(0), c)
    }

    /// Global average pool over the spatial grid, one value per channel.
    pub fn pooled(&self) -> Vec<f32> {
        let n = (self.height() * self.width()) as f32;
        self.values
            .outer_iter()
            .map(|ch| ch.iter().sum::<f32>() / n)
            .collect()
    }
}

/// A single annotated pixel in original-image space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Keypoint {
    pub row: usize,
    pub col: usize,
}

impl Keypoint {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// What a negative keypoint was placed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeypointTag {
    Artifact(ArtifactKind),
    Background,
}

/// Equal-sized positive and negative keypoint lists.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    positive: Vec<Keypoint>,
    negative: Vec<Keypoint>,
    artifact_tags: Option<Vec<KeypointTag>>,
}

impl KeypointSet {
    pub fn new(positive: Vec<Keypoint>, negative: Vec<Keypoint>) -> Result<Self> {
        Self::build(positive, negative, None)
    }

    pub fn with_tags(
        positive: Vec<Keypoint>,
        negative: Vec<Keypoint>,
        tags: Vec<KeypointTag>,
    ) -> Result<Self> {
        if tags.len() != negative.len() {
            return Err(Error::Precondition(format!(
                "{} artifact tags for {} negative keypoints",
                tags.len(),
                negative.len()
            )));
        }
        Self::build(positive, negative, Some(tags))
    }

    fn build(
        positive: Vec<Keypoint>,
        negative: Vec<Keypoint>,
        artifact_tags: Option<Vec<KeypointTag>>,
    ) -> Result<Self> {
        if positive.is_empty() || negative.is_empty() {
            return Err(Error::Precondition(
                "keypoint lists must be non-empty".into(),
            ));
        }
        if positive.len() != negative.len() {
            return Err(Error::Precondition(format!(
                "positive and negative keypoint counts differ ({} vs {})",
                positive.len(),
                negative.len()
            )));
        }
        if let Some(k) = negative.iter().find(|k| positive.contains(k)) {
            return Err(Error::Precondition(format!(
                "pixel (row {}, col {}) is both a positive and a negative keypoint",
                k.row, k.col
            )));
        }
        Ok(Self {
            positive,
            negative,
            artifact_tags,
        })
    }

    pub fn positive(&self) -> &[Keypoint] {
        &self.positive
    }

    pub fn negative(&self) -> &[Keypoint] {
        &self.negative
    }

    pub fn artifact_tags(&self) -> Option<&[KeypointTag]> {
        self.artifact_tags.as_deref()
    }

    /// Points per side.
    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    /// Same points with the roles of the two lists exchanged. Tags are dropped.
    pub fn swapped(&self) -> Self {
        Self {
            positive: self.negative.clone(),
            negative: self.positive.clone(),
            artifact_tags: None,
        }
    }

    /// Checks every point against a `(height, width)` image.
    pub fn check_bounds(&self, (height, width): (usize, usize)) -> Result<()> {
        let sides = [("positive", &self.positive), ("negative", &self.negative)];
        for (kind, points) in sides {
            for (index, k) in points.iter().enumerate() {
                if k.row >= height || k.col >= width {
                    return Err(Error::Coordinate {
                        kind,
                        index,
                        row: k.row as i64,
                        col: k.col as i64,
                        height,
                        width,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Balance between positive and negative evidence, and the fraction of
/// channels kept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    alpha: f64,
    keep_fraction: f64,
}

impl SelectionConfig {
    pub const DEFAULT_ALPHA: f64 = 0.4;
    pub const ARTIFACT_ALPHA: f64 = 0.2;
    pub const DEFAULT_KEEP_FRACTION: f64 = 0.10;

    pub fn new(alpha: f64, keep_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "keep_fraction must lie in (0, 1], got {keep_fraction}"
            )));
        }
        Ok(Self {
            alpha,
            keep_fraction,
        })
    }

    /// Default setting when the negative keypoints sit on annotated artifacts.
    pub fn for_artifact_keypoints() -> Self {
        Self {
            alpha: Self::ARTIFACT_ALPHA,
            keep_fraction: Self::DEFAULT_KEEP_FRACTION,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn keep_fraction(&self) -> f64 {
        self.keep_fraction
    }

    /// Number of channels that survive out of `channels`.
    pub fn kept_channels(&self, channels: usize) -> usize {
        kept_channel_count(self.keep_fraction, channels)
    }
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            alpha: Self::DEFAULT_ALPHA,
            keep_fraction: Self::DEFAULT_KEEP_FRACTION,
        }
    }
}

/// `ceil(keep_fraction * channels)`, clamped to `[1, channels]`.
///
/// Products within 1e-9 of an integer are treated as that integer so that
/// e.g. `0.1 * 30` keeps 3 channels rather than 4.
pub fn kept_channel_count(keep_fraction: f64, channels: usize) -> usize {
    let exact = keep_fraction * channels as f64;
    let rounded = exact.round();
    let k = if (exact - rounded).abs() < 1e-9 {
        rounded
    } else {
        exact.ceil()
    };
    (k as usize).clamp(1, channels.max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScores {
    pub positive_sums: Vec<f64>,
    pub negative_sums: Vec<f64>,
    pub scores: Vec<f64>,
}

impl ChannelScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Kept channel indices (ascending) and the per-channel indicator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    selected: Vec<usize>,
    mask: Vec<bool>,
}

impl SelectionMask {
    pub fn from_selected(mut selected: Vec<usize>, channels: usize) -> Result<Self> {
        selected.sort_unstable();
        selected.dedup();
        if let Some(&c) = selected.iter().find(|&&c| c >= channels) {
            return Err(Error::Shape(format!(
                "channel {c} out of range for {channels} channels"
            )));
        }
        let mut mask = vec![false; channels];
        for &c in &selected {
            mask[c] = true;
        }
        Ok(Self { selected, mask })
    }

    pub fn all(channels: usize) -> Self {
        Self {
            selected: (0..channels).collect(),
            mask: vec![true; channels],
        }
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn channels(&self) -> usize {
        self.mask.len()
    }

    pub fn is_all_ones(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }
}

/// Bilinear sampling table for one axis: source indices and weight of the
/// upper neighbour for each destination index.
fn axis_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Corner-aligned bilinear resize of a single plane.
pub(crate) fn resize_plane(plane: ArrayView2<'_, f32>, out: (usize, usize)) -> ndarray::Array2<f32> {
    let (h, w) = plane.dim();
    let rows = axis_table(h, out.0);
    let cols = axis_table(w, out.1);
    let mut res = ndarray::Array2::<f32>::zeros(out);
    for (i, &(y0, y1, wy)) in rows.iter().enumerate() {
        for (j, &(x0, x1, wx)) in cols.iter().enumerate() {
            let a = f64::from(plane[[y0, x0]]);
            let b = f64::from(plane[[y0, x1]]);
            let c = f64::from(plane[[y1, x0]]);
            let d = f64::from(plane[[y1, x1]]);
            let top = (1.0 - wx) * a + wx * b;
            let bottom = (1.0 - wx) * c + wx * d;
            res[[i, j]] = ((1.0 - wy) * top + wy * bottom) as f32;
        }
    }
    res
}

/// Bilinearly upsample (or downsample) every channel to the source image size.
pub fn upsample_to_image(fmap: &FeatureMap) -> Result<FeatureMap> {
    let out = fmap.source_size();
    let mut values = Array3::<f32>::zeros((fmap.channels(), out.0, out.1));
    for (c, mut dst) in values.outer_iter_mut().enumerate() {
        dst.assign(&resize_plane(fmap.channel(c), out));
    }
    FeatureMap::new(values, out)
}

/// Per-channel keypoint sums and affinity scores.
///
/// `fmap` must already be at image resolution (see [`upsample_to_image`]).
/// Sums accumulate left to right in keypoint order.
pub fn score_channels(
    fmap: &FeatureMap,
    keys: &KeypointSet,
    cfg: &SelectionConfig,
) -> Result<ChannelScores> {
    if fmap.source_size() != (fmap.height(), fmap.width()) {
        return Err(Error::Shape(format!(
            "scoring needs an image-resolution map: map is {}x{}, image is {}x{}",
            fmap.height(),
            fmap.width(),
            fmap.source_size().0,
            fmap.source_size().1
        )));
    }
    if keys.is_empty() {
        return Err(Error::Precondition("keypoint lists must be non-empty".into()));
    }
    keys.check_bounds(fmap.source_size())?;

    let sum_at = |ch: ArrayView2<'_, f32>, points: &[Keypoint]| {
        points
            .iter()
            .fold(0.0_f64, |acc, k| acc + f64::from(ch[[k.row, k.col]]))
    };
    let alpha = cfg.alpha();
    let mut positive_sums = Vec::with_capacity(fmap.channels());
    let mut negative_sums = Vec::with_capacity(fmap.channels());
    let mut scores = Vec::with_capacity(fmap.channels());
    for ch in fmap.values().outer_iter() {
        let sp = sum_at(ch, keys.positive());
        let sn = sum_at(ch, keys.negative());
        positive_sums.push(sp);
        negative_sums.push(sn);
        scores.push(alpha * sp - (1.0 - alpha) * sn);
    }
    Ok(ChannelScores {
        positive_sums,
        negative_sums,
        scores,
    })
}

/// Keep the `ceil(keep_fraction * C)` best-scoring channels. Ties go to the
/// lower channel index.
pub fn select_channels(scores: &ChannelScores, cfg: &SelectionConfig) -> Result<SelectionMask> {
    let n = scores.scores.len();
    if n == 0 {
        return Err(Error::Precondition("no channel scores".into()));
    }
    if let Some(index) = scores.scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            what: "channel scores",
            index,
        });
    }
    let k = cfg.kept_channels(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .partial_cmp(&scores.scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    SelectionMask::from_selected(order, n)
}

/// Zero every channel whose mask entry is off. The mask is constant over the
/// spatial grid.
pub fn apply_mask(fmap: &FeatureMap, mask: &SelectionMask) -> Result<FeatureMap> {
    if mask.channels() != fmap.channels() {
        return Err(Error::Shape(format!(
            "mask has {} entries but the feature map has {} channels",
            mask.channels(),
            fmap.channels()
        )));
    }
    let mut values = fmap.values().clone();
    for (mut ch, &keep) in values.outer_iter_mut().zip(mask.mask()) {
        if !keep {
            ch.fill(0.0);
        }
    }
    Ok(FeatureMap {
        values,
        source_size: fmap.source_size(),
    })
}

/// Result of the full selection pipeline on one image.
#[derive(Debug, Clone)]
pub struct Selection {
    /// Native-resolution feature map with unselected channels zeroed.
    pub masked: FeatureMap,
    pub mask: SelectionMask,
    pub scores: ChannelScores,
}

/// Upsample, score, select and mask. Scoring happens at image resolution;
/// the returned map keeps the extractor's native resolution.
pub fn tts_select(fmap: &FeatureMap, keys: &KeypointSet, cfg: &SelectionConfig) -> Result<Selection> {
    keys.check_bounds(fmap.source_size())?;
    let upsampled = upsample_to_image(fmap)?;
    let scores = score_channels(&upsampled, keys, cfg)?;
    let mask = select_channels(&scores, cfg)?;
    let masked = apply_mask(fmap, &mask)?;
    Ok(Selection {
        masked,
        mask,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn fmap(values: Array3<f32>, size: (usize, usize)) -> FeatureMap {
        FeatureMap::new(values, size).unwrap()
    }

    fn kp(r: usize, c: usize) -> Keypoint {
        Keypoint::new(r, c)
    }

    /// Direct evaluation of the corner-aligned bilinear formula at one pixel.
    fn bilinear_at(plane: &ndarray::Array2<f32>, out: (usize, usize), i: usize, j: usize) -> f64 {
        let (h, w) = plane.dim();
        let src = |d: usize, n_out: usize, n_in: usize| {
            if n_out == 1 {
                0.0
            } else {
                d as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            }
        };
        let y = src(i, out.0, h);
        let x = src(j, out.1, w);
        let y0 = (y.floor() as usize).min(h - 1);
        let x0 = (x.floor() as usize).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let (wy, wx) = (y - y0 as f64, x - x0 as f64);
        let v = |r: usize, c: usize| f64::from(plane[[r, c]]);
        (1.0 - wy) * ((1.0 - wx) * v(y0, x0) + wx * v(y0, x1))
            + wy * ((1.0 - wx) * v(y1, x0) + wx * v(y1, x1))
    }

    #[test]
    fn upsample_identity_single_pixel() {
        let m = fmap(Array3::from_elem((1, 1, 1), 7.0), (1, 1));
        assert_eq!(upsample_to_image(&m).unwrap(), m);
    }

    #[test]
    fn upsample_two_by_two_to_four_by_four() {
        let m = fmap(array![[[1.0f32, 3.0], [5.0, 7.0]]], (4, 4));
        let up = upsample_to_image(&m).unwrap();
        let v = up.values();
        assert_eq!(v[[0, 0, 0]], 1.0);
        assert_eq!(v[[0, 0, 3]], 3.0);
        assert_eq!(v[[0, 3, 0]], 5.0);
        assert_eq!(v[[0, 3, 3]], 7.0);
        let plane = m.values().index_axis(Axis(0), 0).to_owned();
        for i in 0..4 {
            for j in 0..4 {
                let expected = bilinear_at(&plane, (4, 4), i, j);
                approx::assert_abs_diff_eq!(f64::from(v[[0, i, j]]), expected, epsilon = 1e-6);
                assert!((1.0..=7.0).contains(&v[[0, i, j]]));
            }
        }
        // (1,1) sits a third of the way along each axis
        approx::assert_abs_diff_eq!(v[[0, 1, 1]], 1.0 + 2.0 / 3.0 + 4.0 / 3.0, epsilon = 1e-5);
    }

    #[test]
    fn upsample_preserves_constants() {
        for size in [(1, 1), (3, 7), (16, 5)] {
            let m = fmap(Array3::from_elem((2, 3, 2), 2.5), size);
            let up = upsample_to_image(&m).unwrap();
            assert_eq!(up.values().dim(), (2, size.0, size.1));
            assert!(up.values().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn rejects_non_finite_values() {
        let mut v = Array3::<f32>::zeros((2, 2, 2));
        v[[1, 0, 1]] = f32::NAN;
        let err = FeatureMap::new(v, (4, 4)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 5, .. }));
        let mut v = Array3::<f32>::zeros((1, 1, 1));
        v[[0, 0, 0]] = f32::INFINITY;
        assert!(FeatureMap::new(v, (1, 1)).is_err());
    }

    #[test]
    fn score_hand_evaluation() {
        let mut v = Array3::<f32>::zeros((1, 2, 2));
        v[[0, 0, 0]] = 2.0;
        v[[0, 1, 1]] = 4.0;
        let m = fmap(v, (2, 2));
        let keys = KeypointSet::new(vec![kp(0, 0)], vec![kp(1, 1)]).unwrap();
        let s = score_channels(&m, &keys, &SelectionConfig::new(0.4, 0.1).unwrap()).unwrap();
        assert_eq!(s.positive_sums, vec![2.0]);
        assert_eq!(s.negative_sums, vec![4.0]);
        approx::assert_abs_diff_eq!(s.scores[0], -1.6, epsilon = 1e-12);
    }

    #[test]
    fn alpha_boundaries() {
        let v = Array3::from_shape_fn((3, 4, 4), |(c, i, j)| (c * 7 + i * 3) as f32 - j as f32 * 1.5);
        let m = fmap(v, (4, 4));
        let keys = KeypointSet::new(vec![kp(0, 1), kp(3, 3)], vec![kp(2, 2), kp(1, 0)]).unwrap();
        let s1 = score_channels(&m, &keys, &SelectionConfig::new(1.0, 0.5).unwrap()).unwrap();
        assert_eq!(s1.scores, s1.positive_sums);
        let s0 = score_channels(&m, &keys, &SelectionConfig::new(0.0, 0.5).unwrap()).unwrap();
        let neg: Vec<f64> = s0.negative_sums.iter().map(|v| -v).collect();
        assert_eq!(s0.scores, neg);
    }

    #[test]
    fn out_of_bounds_keypoint_is_named() {
        let m = fmap(Array3::zeros((1, 3, 3)), (3, 3));
        let keys = KeypointSet::new(vec![kp(0, 0), kp(1, 1)], vec![kp(2, 2), kp(2, 3)]).unwrap();
        match score_channels(&m, &keys, &SelectionConfig::default()) {
            Err(Error::Coordinate { kind, index, row, col, .. }) => {
                assert_eq!((kind, index, row, col), ("negative", 1, 2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn keypoint_set_invariants() {
        assert!(KeypointSet::new(vec![], vec![]).is_err());
        assert!(KeypointSet::new(vec![kp(0, 0)], vec![kp(1, 1), kp(1, 2)]).is_err());
        assert!(KeypointSet::new(vec![kp(0, 0)], vec![kp(0, 0)]).is_err());
        assert!(KeypointSet::with_tags(vec![kp(0, 0)], vec![kp(0, 1)], vec![]).is_err());
    }

    #[test]
    fn config_ranges() {
        assert!(SelectionConfig::new(-0.1, 0.5).is_err());
        assert!(SelectionConfig::new(1.1, 0.5).is_err());
        assert!(SelectionConfig::new(0.5, 0.0).is_err());
        assert!(SelectionConfig::new(0.5, 1.01).is_err());
        assert!(SelectionConfig::new(0.5, f64::NAN).is_err());
        let d = SelectionConfig::default();
        assert_eq!((d.alpha(), d.keep_fraction()), (0.4, 0.1));
        assert_eq!(SelectionConfig::for_artifact_keypoints().alpha(), 0.2);
    }

    #[test]
    fn kept_count_rounding() {
        assert_eq!(kept_channel_count(0.1, 10), 1);
        assert_eq!(kept_channel_count(0.1, 30), 3);
        assert_eq!(kept_channel_count(0.1, 31), 4);
        assert_eq!(kept_channel_count(0.7, 10), 7);
        assert_eq!(kept_channel_count(1.0 / 7.0, 7), 1);
        assert_eq!(kept_channel_count(0.01, 3), 1);
        assert_eq!(kept_channel_count(1.0, 32), 32);
    }

    fn scores(v: &[f64]) -> ChannelScores {
        ChannelScores {
            positive_sums: vec![0.0; v.len()],
            negative_sums: vec![0.0; v.len()],
            scores: v.to_vec(),
        }
    }

    #[test]
    fn select_top_one_of_ten() {
        let s = scores(&[9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
        let m = select_channels(&s, &SelectionConfig::new(0.4, 0.1).unwrap()).unwrap();
        assert_eq!(m.selected(), &[0]);
        let mut expected = vec![false; 10];
        expected[0] = true;
        assert_eq!(m.mask(), expected.as_slice());
    }

    #[test]
    fn select_everything_at_full_keep() {
        let s = scores(&[0.3, -1.0, 2.0]);
        let m = select_channels(&s, &SelectionConfig::new(0.4, 1.0).unwrap()).unwrap();
        assert!(m.is_all_ones());
        assert_eq!(m.selected(), &[0, 1, 2]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let s = scores(&[5.0; 4]);
        let m = select_channels(&s, &SelectionConfig::new(0.4, 0.5).unwrap()).unwrap();
        assert_eq!(m.selected(), &[0, 1]);
        let s = scores(&[1.0, 5.0, 3.0, 5.0, 5.0]);
        let m = select_channels(&s, &SelectionConfig::new(0.4, 0.4).unwrap()).unwrap();
        assert_eq!(m.selected(), &[1, 3]);
    }

    #[test]
    fn mask_application() {
        let v = Array3::from_shape_fn((3, 2, 2), |(c, i, j)| 1.0 + (c * 4 + i * 2 + j) as f32);
        let m = fmap(v, (2, 2));
        assert_eq!(apply_mask(&m, &SelectionMask::all(3)).unwrap(), m);

        let only0 = SelectionMask::from_selected(vec![0], 3).unwrap();
        let out = apply_mask(&m, &only0).unwrap();
        assert_eq!(out.channel(0), m.channel(0));
        assert!(out.channel(1).iter().chain(out.channel(2).iter()).all(|&v| v == 0.0));
        assert_eq!(apply_mask(&out, &only0).unwrap(), out);

        let err = apply_mask(&m, &SelectionMask::all(2)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn two_channel_pipeline() {
        let mut v = Array3::<f32>::zeros((2, 4, 4));
        v[[0, 1, 1]] = 3.0;
        v[[1, 3, 3]] = 3.0;
        let m = fmap(v, (4, 4));
        let keys = KeypointSet::new(vec![kp(1, 1)], vec![kp(3, 3)]).unwrap();
        let sel = tts_select(&m, &keys, &SelectionConfig::new(0.4, 0.5).unwrap()).unwrap();
        assert_eq!(sel.mask.selected(), &[0]);
        assert_eq!(sel.masked.channel(0), m.channel(0));
        assert!(sel.masked.channel(1).iter().all(|&v| v == 0.0));

        let all = tts_select(&m, &keys, &SelectionConfig::new(0.4, 1.0).unwrap()).unwrap();
        assert_eq!(all.masked, m);
    }

    #[test]
    fn masking_happens_at_native_resolution() {
        let v = Array3::from_shape_fn((4, 2, 3), |(c, i, j)| (c + i + j) as f32);
        let m = fmap(v, (8, 12));
        let keys = KeypointSet::new(vec![kp(7, 11)], vec![kp(0, 0)]).unwrap();
        let sel = tts_select(&m, &keys, &SelectionConfig::default()).unwrap();
        assert_eq!(sel.masked.values().dim(), (4, 2, 3));
        assert_eq!(sel.masked.source_size(), (8, 12));
        assert_eq!(sel.scores.len(), 4);
    }

    fn instance() -> impl Strategy<Value = (FeatureMap, KeypointSet)> {
        (1usize..12, 1usize..6, 1usize..6, 1usize..10, 1usize..10, 1usize..5)
            .prop_flat_map(|(c, h, w, ih, iw, n)| {
                let values = proptest::collection::vec(-4.0f32..4.0, c * h * w);
                let pts = proptest::collection::vec((0..ih, 0..iw), 2 * n);
                (Just((c, h, w, ih, iw, n)), values, pts)
            })
            .prop_filter_map("need distinct keypoints", |((c, h, w, ih, iw, n), values, pts)| {
                let mut uniq = pts.clone();
                uniq.sort_unstable();
                uniq.dedup();
                if uniq.len() < 2 * n {
                    return None;
                }
                let pts: Vec<Keypoint> = pts.into_iter().map(|(r, c)| kp(r, c)).collect();
                let keys = KeypointSet::new(pts[..n].to_vec(), pts[n..].to_vec()).ok()?;
                let values = Array3::from_shape_vec((c, h, w), values).ok()?;
                Some((FeatureMap::new(values, (ih, iw)).ok()?, keys))
            })
    }

    proptest! {
        #[test]
        fn cardinality_and_dominance((m, keys) in instance(), lambda in 0.01f64..=1.0, alpha in 0.0f64..=1.0) {
            let cfg = SelectionConfig::new(alpha, lambda).unwrap();
            let sel = tts_select(&m, &keys, &cfg).unwrap();
            prop_assert_eq!(sel.mask.selected().len(), kept_channel_count(lambda, m.channels()));
            let s = &sel.scores.scores;
            let min_in = sel.mask.selected().iter().map(|&c| s[c]).fold(f64::INFINITY, f64::min);
            let max_out = (0..s.len()).filter(|c| !sel.mask.mask()[*c]).map(|c| s[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_in >= max_out);
        }

        #[test]
        fn keypoint_order_invariance((m, keys) in instance(), alpha in 0.0f64..=1.0, rot in 0usize..8) {
            let cfg = SelectionConfig::new(alpha, 0.5).unwrap();
            let up = upsample_to_image(&m).unwrap();
            let base = score_channels(&up, &keys, &cfg).unwrap();
            let mut pos = keys.positive().to_vec();
            let mut neg = keys.negative().to_vec();
            pos.reverse();
            let r = rot % neg.len();
            neg.rotate_left(r);
            let permuted = KeypointSet::new(pos, neg).unwrap();
            let other = score_channels(&up, &permuted, &cfg).unwrap();
            // Sums of at most a handful of f32-representable values in f64 are exact.
            for c in 0..base.len() {
                prop_assert!((base.positive_sums[c] - other.positive_sums[c]).abs() <= 1e-9);
                prop_assert!((base.negative_sums[c] - other.negative_sums[c]).abs() <= 1e-9);
            }
        }

        #[test]
        fn monotone_in_keypoint_activation((m, keys) in instance(), alpha in 0.05f64..=0.95, bump in 0.5f32..3.0) {
            let cfg = SelectionConfig::new(alpha, 0.5).unwrap();
            let up = upsample_to_image(&m).unwrap();
            let base = score_channels(&up, &keys, &cfg).unwrap();
            let k = keys.positive()[0];
            let mut v = up.values().clone();
            v[[0, k.row, k.col]] += bump;
            let raised = score_channels(&FeatureMap::new(v, up.source_size()).unwrap(), &keys, &cfg).unwrap();
            prop_assert!(raised.scores[0] > base.scores[0]);
            prop_assert_eq!(&raised.scores[1..], &base.scores[1..]);

            let k = keys.negative()[0];
            let mut v = up.values().clone();
            v[[0, k.row, k.col]] += bump;
            let raised = score_channels(&FeatureMap::new(v, up.source_size()).unwrap(), &keys, &cfg).unwrap();
            prop_assert!(raised.scores[0] < base.scores[0]);
            prop_assert_eq!(&raised.scores[1..], &base.scores[1..]);
        }

        #[test]
        fn selection_invariant_to_affine_score_changes(
            raw in proptest::collection::vec(-100i32..100, 1..40),
            shift in -50i32..50,
            scale in 1i32..8,
            lambda in 0.01f64..=1.0,
        ) {
            // Integer-valued scores keep shifted/scaled copies exact.
            let cfg = SelectionConfig::new(0.5, lambda).unwrap();
            let base: Vec<f64> = raw.iter().map(|&v| f64::from(v)).collect();
            let shifted: Vec<f64> = base.iter().map(|v| v + f64::from(shift)).collect();
            let scaled: Vec<f64> = base.iter().map(|v| v * f64::from(scale)).collect();
            let a = select_channels(&scores(&base), &cfg).unwrap();
            prop_assert_eq!(&a, &select_channels(&scores(&shifted), &cfg).unwrap());
            prop_assert_eq!(&a, &select_channels(&scores(&scaled), &cfg).unwrap());
        }

        #[test]
        fn swapping_sides_negates_scores((m, keys) in instance()) {
            let cfg = SelectionConfig::new(0.5, 0.5).unwrap();
            let up = upsample_to_image(&m).unwrap();
            let a = score_channels(&up, &keys, &cfg).unwrap();
            let b = score_channels(&up, &keys.swapped(), &cfg).unwrap();
            for c in 0..a.len() {
                prop_assert_eq!(a.scores[c], -b.scores[c]);
            }
        }
    }
}
