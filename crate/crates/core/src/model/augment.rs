//! Seeded image augmentation shared by training and test-time averaging.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    /// Uniform integer shift in `[-max_px, max_px]` on both axes; the exposed
    /// border repeats the edge pixels.
    Shift { max_px: usize },
    HorizontalFlip,
    VerticalFlip,
    /// Brightness and contrast factors drawn from `[1 - x, 1 + x]`.
    ColorJitter { brightness: f32, contrast: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub replica_count: usize,
    pub transforms: Vec<Transform>,
    pub seed: u64,
}

impl AugmentationPolicy {
    pub const DEFAULT_REPLICAS: usize = 50;

    /// No transforms: every replica is the input image.
    pub fn identity(replica_count: usize) -> Self {
        Self {
            replica_count,
            transforms: Vec::new(),
            seed: 0,
        }
    }

    /// Shifts, flips and mild colour jitter.
    pub fn standard(replica_count: usize, seed: u64) -> Self {
        Self {
            replica_count,
            transforms: vec![
                Transform::Shift { max_px: 2 },
                Transform::HorizontalFlip,
                Transform::VerticalFlip,
                Transform::ColorJitter {
                    brightness: 0.1,
                    contrast: 0.1,
                },
            ],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replica_count == 0 {
            return Err(Error::Config("replica_count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Replica `index` of `image`; the same index always yields the same
    /// transform parameters.
    pub fn replica(&self, image: &Image, index: usize) -> Image {
        if self.is_identity() {
            return image.clone();
        }
        let stream = self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        self.apply(image, &mut rng)
    }

    pub fn replicas(&self, image: &Image) -> Vec<Image> {
        (0..self.replica_count).map(|i| self.replica(image, i)).collect()
    }

    /// Apply every transform with parameters drawn from `rng`.
    pub fn apply<R: Rng>(&self, image: &Image, rng: &mut R) -> Image {
        let mut data = image.data().clone();
        for t in &self.transforms {
            data = match *t {
                Transform::Shift { max_px } => {
                    let m = max_px as isize;
                    let dy = rng.gen_range(-m..=m);
                    let dx = rng.gen_range(-m..=m);
                    shift_clamped(&data, dy, dx)
                }
                Transform::HorizontalFlip => {
                    if rng.gen_bool(0.5) {
                        flip(&data, false)
                    } else {
                        data
                    }
                }
                Transform::VerticalFlip => {
                    if rng.gen_bool(0.5) {
                        flip(&data, true)
                    } else {
                        data
                    }
                }
                Transform::ColorJitter { brightness, contrast } => {
                    let b = 1.0 + rng.gen_range(-brightness..=brightness);
                    let c = 1.0 + rng.gen_range(-contrast..=contrast);
                    jitter(data, b, c)
                }
            };
        }
        Image::new(data).expect("augmentation keeps shape and finiteness")
    }
}

fn shift_clamped(src: &Array3<f32>, dy: isize, dx: isize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
        src[[ci, clamp(y as isize - dy, h), clamp(x as isize - dx, w)]]
    })
}

fn flip(src: &Array3<f32>, vertical: bool) -> Array3<f32> {
    let (c, h, w) = src.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
        if vertical {
            src[[ci, h - 1 - y, x]]
        } else {
            src[[ci, y, w - 1 - x]]
        }
    })
}

fn jitter(mut data: Array3<f32>, brightness: f32, contrast: f32) -> Array3<f32> {
    for mut plane in data.outer_iter_mut() {
        let mean = plane.mean().unwrap_or(0.0);
        plane.mapv_inplace(|v| ((v - mean) * contrast + mean) * brightness);
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::new(Array3::from_shape_fn((3, 6, 5), |(c, y, x)| (c * 30 + y * 5 + x) as f32 / 100.0)).unwrap()
    }

    #[test]
    fn identity_replicas_equal_input() {
        let img = ramp();
        let p = AugmentationPolicy::identity(4);
        assert!(p.replicas(&img).iter().all(|r| r == &img));
    }

    #[test]
    fn replicas_are_reproducible_and_varied() {
        let img = ramp();
        let p = AugmentationPolicy::standard(8, 3);
        assert_eq!(p.replicas(&img), p.replicas(&img));
        let reps = p.replicas(&img);
        assert!(reps.iter().any(|r| r != &reps[0]));
        assert!(reps.iter().all(|r| r.size() == img.size()));
    }

    #[test]
    fn flips_and_shifts() {
        let img = ramp();
        let f = flip(img.data(), false);
        assert_eq!(f[[0, 0, 0]], img.data()[[0, 0, 4]]);
        let f = flip(img.data(), true);
        assert_eq!(f[[1, 0, 2]], img.data()[[1, 5, 2]]);
        let s = shift_clamped(img.data(), 1, 0);
        assert_eq!(s[[0, 0, 3]], img.data()[[0, 0, 3]]);
        assert_eq!(s[[0, 3, 3]], img.data()[[0, 2, 3]]);
    }

    #[test]
    fn zero_replicas_rejected() {
        assert!(AugmentationPolicy::identity(0).validate().is_err());
    }
}
