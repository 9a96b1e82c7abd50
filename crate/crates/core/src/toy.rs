//! Two-channel toy model with known channel semantics.
//!
//! The extractor exposes the red plane (lesion) as channel 0 and the green
//! plane (artifact) as channel 1, average-pooled 2x2. The head votes benign
//! from channel 0 and melanoma from channel 1 with twice the weight, so an
//! image containing both a lesion and an equally sized artifact is
//! classified from the artifact unless channel 1 is masked.

use ndarray::{array, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, CorpusSample};
use crate::error::Result;
use crate::image::Image;
use crate::keypoints::{AnnotatedPoint, ArtifactAnnotation, ArtifactKind, SegmentationMask};
use crate::model::{ClassifierHead, Extractor, LinearHead, PlaneExtractor, SplitModel};
use crate::trapset::{Artifact, Label, SampleRecord};

pub const SIZE: usize = 24;
const BLOCK: usize = 4;

pub fn model() -> SplitModel {
    let extractor = Extractor::Planes(PlaneExtractor {
        input_size: (SIZE, SIZE),
        planes: vec![0, 1],
        pool: 2,
    });
    let head = LinearHead::new(array![[4.0, 0.0], [0.0, 8.0]], array![0.0, 0.0]).expect("valid head");
    SplitModel::new(extractor, ClassifierHead::Linear(head)).expect("matching widths")
}

/// Axis-aligned square `[row, row + size) x [col, col + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl Region {
    pub fn contains(&self, (r, c): (usize, usize)) -> bool {
        r >= self.row && r < self.row + self.size && c >= self.col && c < self.col + self.size
    }

    fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row..self.row + self.size).flat_map(move |r| (self.col..self.col + self.size).map(move |c| (r, c)))
    }
}

#[derive(Debug, Clone)]
pub struct ToyInstance {
    pub image: Image,
    pub lesion: Region,
    pub artifact: Region,
    pub mask: SegmentationMask,
    /// Every artifact pixel, tagged as a patch.
    pub annotation: ArtifactAnnotation,
}

/// A lesion block near the centre and an artifact block in one corner, both
/// aligned to the pooling grid.
pub fn instance(image_id: &str, seed: u64) -> ToyInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lesion = Region {
        row: 8 + 2 * rng.gen_range(0..3),
        col: 8 + 2 * rng.gen_range(0..3),
        size: BLOCK,
    };
    let far = SIZE - BLOCK;
    let artifact = Region {
        row: if rng.gen_bool(0.5) { 0 } else { far },
        col: if rng.gen_bool(0.5) { 0 } else { far },
        size: BLOCK,
    };
    let lesion_value: f32 = rng.gen_range(0.6..1.0);
    let artifact_value: f32 = rng.gen_range(0.6..1.0);
    let mut data = Array3::<f32>::zeros((3, SIZE, SIZE));
    for (r, c) in lesion.pixels() {
        data[[0, r, c]] = lesion_value;
    }
    for (r, c) in artifact.pixels() {
        data[[1, r, c]] = artifact_value;
    }
    let mask = SegmentationMask::new(Array2::from_shape_fn((SIZE, SIZE), |p| lesion.contains(p))).expect("nonempty");
    let annotation = ArtifactAnnotation {
        image_id: image_id.to_string(),
        points: artifact
            .pixels()
            .map(|(row, col)| AnnotatedPoint {
                row,
                col,
                kind: ArtifactKind::Patch,
            })
            .collect(),
    };
    ToyInstance {
        image: Image::new(data).expect("finite"),
        lesion,
        artifact,
        mask,
        annotation,
    }
}

/// `n` toy instances as a corpus; ids `toy_000`, `toy_001`, ... Intensities are
/// quantised to 8 bits so the corpus survives a PNG round trip.
pub fn corpus(n: usize, seed: u64) -> Result<Corpus> {
    let samples = (0..n)
        .map(|i| {
            let id = format!("toy_{i:03}");
            let inst = instance(&id, seed.wrapping_add(i as u64));
            let image = Image::from_rgb8(SIZE, SIZE, &inst.image.to_rgb8())?;
            let mut artifacts = [false; Artifact::COUNT];
            artifacts[Artifact::Patch.index()] = true;
            Ok(CorpusSample {
                record: SampleRecord {
                    image_id: id,
                    label: if i % 2 == 0 { Label::Benign } else { Label::Melanoma },
                    artifacts,
                },
                image,
                mask: Some(inst.mask),
                annotation: Some(inst.annotation),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::new(samples)
}
