//! RGB images as `3 x H x W` planes of `f32` in `[0, 1]`.

use std::path::Path;

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};
use crate::selection::resize_plane;
use crate::trapset::Label;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("expected a 3xHxW image, got {c}x{h}x{w}")));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "image", index });
        }
        Ok(Self { data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self {
            data: Array3::from_shape_fn((3, height, width), |(c, _, _)| rgb[c]),
        }
    }

    pub fn from_rgb8(height: usize, width: usize, raw: &[u8]) -> Result<Self> {
        if raw.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for a {height}x{width} RGB image",
                raw.len()
            )));
        }
        let data = Array3::from_shape_fn((3, height, width), |(c, y, x)| {
            f32::from(raw[(y * width + x) * 3 + c]) / 255.0
        });
        Ok(Self { data })
    }

    /// Interleaved 8-bit RGB, values clamped to `[0, 1]` first.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (_, h, w) = self.data.dim();
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = self.data[[c, y, x]].clamp(0.0, 1.0);
                    out.push((v * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.rgb_image()?.save(path)?;
        Ok(())
    }

    /// PNG-encoded 8-bit RGB bytes.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.rgb_image()?.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    fn rgb_image(&self) -> Result<image::RgbImage> {
        let (h, w) = self.size();
        image::RgbImage::from_raw(w as u32, h as u32, self.to_rgb8())
            .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))
    }

    /// `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// Bilinear resize; returns a clone when the size already matches.
    pub fn resized(&self, size: (usize, usize)) -> Image {
        if self.size() == size {
            return self.clone();
        }
        let mut data = Array3::zeros((3, size.0, size.1));
        for (c, mut plane) in data.outer_iter_mut().enumerate() {
            plane.assign(&resize_plane(self.data.index_axis(Axis(0), c), size));
        }
        Image { data }
    }
}

/// An image with its identifier and ground-truth label.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image_id: String,
    pub image: Image,
    pub label: Label,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let raw: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::from_rgb8(4, 5, &raw).unwrap();
        let path = dir.path().join("a.png");
        img.save(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back.size(), (4, 5));
        assert_eq!(back.to_rgb8(), raw);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Image::new(Array3::zeros((1, 4, 4))).is_err());
        assert!(Image::from_rgb8(2, 2, &[0; 11]).is_err());
    }

    #[test]
    fn resize_keeps_constants() {
        let img = Image::filled(7, 9, [0.2, 0.4, 0.6]);
        let r = img.resized((16, 16));
        assert_eq!(r.size(), (16, 16));
        assert!(r.data().index_axis(Axis(0), 1).iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }
}
