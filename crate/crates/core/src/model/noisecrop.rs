//! Background replacement baseline: lesion pixels are kept, everything else
//! becomes Gaussian noise with training-set channel statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::keypoints::SegmentationMask;

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NoiseStats {
    pub fn from_images<'a, I: IntoIterator<Item = &'a Image>>(images: I) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0.0f64;
        for img in images {
            for (c, plane) in img.data().outer_iter().enumerate() {
                for &v in plane.iter() {
                    sum[c] += f64::from(v);
                    sq[c] += f64::from(v) * f64::from(v);
                }
            }
            n += (img.size().0 * img.size().1) as f64;
        }
        if n == 0.0 {
            return Err(Error::Precondition("noise statistics need at least one image".into()));
        }
        let mut mean = [0.0f32; 3];
        let mut std = [0.0f32; 3];
        for c in 0..3 {
            let m = sum[c] / n;
            mean[c] = m as f32;
            std[c] = (sq[c] / n - m * m).max(0.0).sqrt() as f32;
        }
        Ok(Self { mean, std })
    }
}

pub fn noisecrop(image: &Image, mask: &SegmentationMask, stats: &NoiseStats, seed: u64) -> Result<Image> {
    if mask.dim() != image.size() {
        return Err(Error::Shape(format!(
            "mask is {:?} but the image is {:?}",
            mask.dim(),
            image.size()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normals: Vec<Normal<f32>> = (0..3)
        .map(|c| Normal::new(stats.mean[c], stats.std[c].max(0.0)))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("invalid noise statistics: {e}")))?;
    let mut out = image.clone();
    let (h, w) = image.size();
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                continue;
            }
            for (c, normal) in normals.iter().enumerate() {
                data[[c, y, x]] = normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}
