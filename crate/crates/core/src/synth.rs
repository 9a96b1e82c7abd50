//! Synthetic dermoscopy-like corpus with planted acquisition artifacts.
//!
//! Each image shows a skin-toned background and one lesion blob. The label
//! is carried by a latent malignancy score that controls border
//! irregularity, darkness, blue-grey blotches, and a pigmented halo and
//! satellite dots in the surrounding skin. The two classes overlap, so the
//! lesion alone is an imperfect predictor. Artifacts are drawn independently
//! of the label and recorded both as metadata flags and, for the locatable
//! kinds, as annotated points.

use std::f32::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabeledImage};
use crate::keypoints::{AnnotatedPoint, ArtifactAnnotation, ArtifactKind, SegmentationMask};
use crate::trapset::{Artifact, Label, SampleRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub samples: usize,
    pub image_size: usize,
    /// Independent probability of each artifact appearing in an image.
    pub artifact_prevalence: f64,
    pub melanoma_fraction: f64,
    /// Half-width of the class overlap in the malignancy latent; 0 makes the
    /// lesion perfectly predictive.
    pub label_overlap: f32,
    /// Points recorded per annotated artifact instance.
    pub points_per_artifact: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            samples: 600,
            image_size: 64,
            artifact_prevalence: 0.3,
            melanoma_fraction: 0.5,
            label_overlap: 0.2,
            points_per_artifact: 12,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 4 {
            return Err(Error::Config("need at least 4 samples".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be at least 32".into()));
        }
        for (name, v) in [
            ("artifact_prevalence", self.artifact_prevalence),
            ("melanoma_fraction", self.melanoma_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(0.0..=0.5).contains(&self.label_overlap) {
            return Err(Error::Config("label_overlap must lie in [0, 0.5]".into()));
        }
        if self.points_per_artifact == 0 {
            return Err(Error::Config("points_per_artifact must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub record: SampleRecord,
    pub image: Image,
    pub mask: SegmentationMask,
    /// Points on the annotatable artifacts; empty when none were planted.
    pub annotation: ArtifactAnnotation,
}

impl SynthSample {
    pub fn labeled(&self) -> LabeledImage {
        LabeledImage {
            image_id: self.record.image_id.clone(),
            image: self.image.clone(),
            label: self.record.label,
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let melanoma = (cfg.samples as f64 * cfg.melanoma_fraction).round() as usize;
    let mut labels: Vec<Label> = (0..cfg.samples)
        .map(|i| if i < melanoma { Label::Melanoma } else { Label::Benign })
        .collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut artifacts = [false; Artifact::COUNT];
            for a in artifacts.iter_mut() {
                *a = rng.gen_bool(cfg.artifact_prevalence);
            }
            let seed = rng.gen();
            render(format!("synth_{i:05}"), label, artifacts, cfg, seed)
        })
        .collect()
}

/// Draws one sample; deterministic in `seed`.
pub fn render(
    image_id: String,
    label: Label,
    artifacts: [bool; Artifact::COUNT],
    cfg: &SynthConfig,
    seed: u64,
) -> Result<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_size;
    let s = n as f32 / 64.0;
    let mut canvas = Canvas::skin(n, &mut rng);

    // Malignancy latent; classes overlap on [0.5 - overlap, 0.5 + overlap].
    let m: f32 = match label {
        Label::Melanoma => rng.gen_range(0.5 - cfg.label_overlap..=1.0),
        Label::Benign => rng.gen_range(0.0..=0.5 + cfg.label_overlap),
    };
    let centre = (
        n as f32 / 2.0 + rng.gen_range(-4.0..4.0) * s,
        n as f32 / 2.0 + rng.gen_range(-4.0..4.0) * s,
    );
    let radius = rng.gen_range(10.0..14.0) * s;
    let lesion = canvas.lesion(centre, radius, m, &mut rng);

    let mut points = Vec::new();
    let per = cfg.points_per_artifact;
    for a in Artifact::ALL {
        if !artifacts[a.index()] {
            continue;
        }
        let drawn = match a {
            Artifact::DarkCorner => canvas.dark_corners(&mut rng),
            Artifact::Ruler => canvas.ruler(&mut rng),
            Artifact::InkMarking => canvas.ink(centre, radius, &mut rng),
            Artifact::Patch => canvas.patch(centre, radius, &mut rng),
            Artifact::Hair => {
                canvas.hair(&mut rng);
                Vec::new()
            }
            Artifact::GelBubble => {
                canvas.bubbles(&mut rng);
                Vec::new()
            }
            Artifact::GelBorder => {
                canvas.gel_border(&mut rng);
                Vec::new()
            }
        };
        if let Some(kind) = annotatable(a) {
            points.extend(pick(&drawn, per, &mut rng).into_iter().map(|(row, col)| AnnotatedPoint {
                row,
                col,
                kind,
            }));
        }
    }

    let image = canvas.finish()?;
    Ok(SynthSample {
        record: SampleRecord {
            image_id: image_id.clone(),
            label,
            artifacts,
        },
        image,
        mask: SegmentationMask::new(lesion)?,
        annotation: ArtifactAnnotation { image_id, points },
    })
}

fn annotatable(a: Artifact) -> Option<ArtifactKind> {
    match a {
        Artifact::DarkCorner => Some(ArtifactKind::DarkCorner),
        Artifact::Ruler => Some(ArtifactKind::Ruler),
        Artifact::InkMarking => Some(ArtifactKind::InkMarking),
        Artifact::Patch => Some(ArtifactKind::Patch),
        Artifact::Hair | Artifact::GelBubble | Artifact::GelBorder => None,
    }
}

/// Up to `k` distinct pixels from `pixels`, in row-major order.
fn pick<R: Rng>(pixels: &[(usize, usize)], k: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut unique = pixels.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() <= k {
        return unique;
    }
    let mut idx = rand::seq::index::sample(rng, unique.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| unique[i]).collect()
}

struct Canvas {
    n: usize,
    px: Array3<f32>,
}

impl Canvas {
    fn skin<R: Rng>(n: usize, rng: &mut R) -> Self {
        let tone = rng.gen_range(-0.05f32..0.05);
        let base = [0.86 + tone, 0.66 + tone, 0.56 + tone];
        let noise = Normal::new(0.0f32, 0.015).expect("valid std");
        let px = Array3::from_shape_fn((3, n, n), |(c, _, _)| base[c] + noise.sample(rng));
        Self { n, px }
    }

    fn blend(&mut self, y: usize, x: usize, rgb: [f32; 3], alpha: f32) {
        for (c, &v) in rgb.iter().enumerate() {
            let p = &mut self.px[[c, y, x]];
            *p = *p * (1.0 - alpha) + v * alpha;
        }
    }

    fn inside(&self, y: isize, x: isize) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.n && (x as usize) < self.n
    }

    /// Irregular blob; returns the lesion mask.
    fn lesion<R: Rng>(&mut self, (cy, cx): (f32, f32), r0: f32, m: f32, rng: &mut R) -> Array2<bool> {
        let lobes = rng.gen_range(3..7) as f32;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let wobble = 0.04 + 0.22 * m;
        let shade = 0.55 - 0.3 * m + rng.gen_range(-0.04..0.04);
        let body = [shade + 0.08, shade - 0.1, shade - 0.2];
        let blotches: Vec<(f32, f32, f32)> = (0..(6.0 * m).round() as usize)
            .map(|_| {
                let a = rng.gen_range(0.0..2.0 * PI);
                let d = rng.gen_range(0.0..0.7) * r0;
                (cy + d * a.sin(), cx + d * a.cos(), rng.gen_range(1.5..3.5) * r0 / 12.0)
            })
            .collect();
        // Diffuse pigmented halo in the surrounding skin, stronger when malignant.
        let halo = 0.6 * r0;
        let mut mask = Array2::from_elem((self.n, self.n), false);
        for y in 0..self.n {
            for x in 0..self.n {
                let dy = y as f32 + 0.5 - cy;
                let dx = x as f32 + 0.5 - cx;
                let theta = dy.atan2(dx);
                let r = r0 * (1.0 + wobble * (lobes * theta + phase).sin());
                let d = (dy * dy + dx * dx).sqrt();
                if d > r + halo {
                    continue;
                }
                if d > r + 1.0 {
                    let fade = 1.0 - (d - r) / halo;
                    self.blend(y, x, [0.7, 0.48, 0.4], 0.45 * m * fade);
                    continue;
                }
                let edge = (r + 1.0 - d).clamp(0.0, 1.0);
                let mut rgb = body;
                for &(by, bx, br) in &blotches {
                    let bd = ((y as f32 - by).powi(2) + (x as f32 - bx).powi(2)).sqrt();
                    if bd < br {
                        rgb = [0.32, 0.34, 0.46];
                    }
                }
                self.blend(y, x, rgb, 0.9 * edge);
                if d <= r {
                    mask[[y, x]] = true;
                }
            }
        }
        // Satellite pigment just beyond the border; never part of the mask.
        let dot = 1.3 * r0 / 12.0;
        for _ in 0..(5.0 * m).round() as usize {
            let theta = rng.gen_range(-PI..PI);
            let r = r0 * (1.0 + wobble * (lobes * theta + phase).sin());
            let d = r + dot + 1.0 + rng.gen_range(0.0..5.0) * r0 / 12.0;
            let (sy, sx) = (cy + d * theta.sin(), cx + d * theta.cos());
            for y in 0..self.n {
                for x in 0..self.n {
                    let dd = ((y as f32 + 0.5 - sy).powi(2) + (x as f32 + 0.5 - sx).powi(2)).sqrt();
                    if dd < dot && !mask[[y, x]] {
                        self.blend(y, x, [0.36, 0.24, 0.2], 0.8);
                    }
                }
            }
        }
        mask
    }

    fn dark_corners<R: Rng>(&mut self, rng: &mut R) -> Vec<(usize, usize)> {
        let n = self.n as f32;
        let reach = rng.gen_range(0.46..0.52) * n;
        let mut pts = Vec::new();
        for y in 0..self.n {
            for x in 0..self.n {
                let d = ((y as f32 + 0.5 - n / 2.0).powi(2) + (x as f32 + 0.5 - n / 2.0).powi(2)).sqrt();
                let t = ((d - reach) / (0.08 * n)).clamp(0.0, 1.0);
                if t > 0.0 {
                    self.blend(y, x, [0.05, 0.04, 0.04], 0.95 * t);
                }
                if t > 0.6 {
                    pts.push((y, x));
                }
            }
        }
        pts
    }

    fn ruler<R: Rng>(&mut self, rng: &mut R) -> Vec<(usize, usize)> {
        let n = self.n;
        let band = (n / 10).max(4);
        let top = rng.gen_bool(0.5);
        let rows: Vec<usize> = if top { (0..band).collect() } else { (n - band..n).collect() };
        let mut pts = Vec::new();
        for &y in &rows {
            for x in 0..n {
                self.blend(y, x, [0.93, 0.93, 0.9], 0.95);
                let tick_len = if x % 8 == 0 { band } else { band / 2 };
                let from_edge = if top { y } else { n - 1 - y };
                if x % 4 == 0 && from_edge < tick_len {
                    self.blend(y, x, [0.08, 0.08, 0.08], 1.0);
                }
                pts.push((y, x));
            }
        }
        pts
    }

    fn ink<R: Rng>(&mut self, (cy, cx): (f32, f32), r: f32, rng: &mut R) -> Vec<(usize, usize)> {
        let start = rng.gen_range(0.0..2.0 * PI);
        let span = rng.gen_range(0.6..1.2) * PI;
        let dist = r * 1.45 + 3.0;
        let mut pts = Vec::new();
        let steps = (span * dist * 2.0) as usize;
        for i in 0..=steps {
            let a = start + span * i as f32 / steps as f32;
            let (y, x) = (cy + dist * a.sin(), cx + dist * a.cos());
            for (oy, ox) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let (yy, xx) = (y as isize + oy, x as isize + ox);
                if self.inside(yy, xx) {
                    self.blend(yy as usize, xx as usize, [0.45, 0.15, 0.6], 0.9);
                    pts.push((yy as usize, xx as usize));
                }
            }
        }
        pts
    }

    fn patch<R: Rng>(&mut self, (cy, cx): (f32, f32), r: f32, rng: &mut R) -> Vec<(usize, usize)> {
        let n = self.n as f32;
        let size = 0.16 * n;
        // Place the sticker on the side of the image away from the lesion.
        let mut spot = (size * 0.6, size * 0.6);
        for _ in 0..200 {
            let py = rng.gen_range(size * 0.6..n - size * 0.6);
            let px = rng.gen_range(size * 0.6..n - size * 0.6);
            if ((py - cy).powi(2) + (px - cx).powi(2)).sqrt() > r + size {
                spot = (py, px);
                break;
            }
        }
        let (py, px) = spot;
        let colour = [0.15, 0.55, 0.85];
        let mut pts = Vec::new();
        for y in 0..self.n {
            for x in 0..self.n {
                let dy = (y as f32 + 0.5 - py).abs();
                let dx = (x as f32 + 0.5 - px).abs();
                if dy < size / 2.0 && dx < size / 2.0 {
                    self.blend(y, x, colour, 0.95);
                    pts.push((y, x));
                }
            }
        }
        pts
    }

    fn hair<R: Rng>(&mut self, rng: &mut R) {
        let n = self.n as f32;
        for _ in 0..rng.gen_range(2..5) {
            let (mut y, mut x) = (rng.gen_range(0.0..n), 0.0f32);
            let mut heading = rng.gen_range(-0.6f32..0.6);
            if rng.gen_bool(0.5) {
                std::mem::swap(&mut y, &mut x);
                heading += PI / 2.0;
            }
            for _ in 0..(2.0 * n) as usize {
                if self.inside(y as isize, x as isize) {
                    self.blend(y as usize, x as usize, [0.12, 0.08, 0.06], 0.85);
                }
                heading += rng.gen_range(-0.15..0.15);
                y += heading.sin() * 0.7;
                x += heading.cos() * 0.7;
            }
        }
    }

    fn bubbles<R: Rng>(&mut self, rng: &mut R) {
        let n = self.n as f32;
        for _ in 0..rng.gen_range(2..5) {
            let (by, bx) = (rng.gen_range(0.0..n), rng.gen_range(0.0..n));
            let br = rng.gen_range(2.0..5.0) * n / 64.0;
            for y in 0..self.n {
                for x in 0..self.n {
                    let d = ((y as f32 - by).powi(2) + (x as f32 - bx).powi(2)).sqrt();
                    if (d - br).abs() < 0.8 {
                        self.blend(y, x, [1.0, 1.0, 1.0], 0.8);
                    } else if d < br {
                        self.blend(y, x, [0.95, 0.95, 0.97], 0.2);
                    }
                }
            }
        }
    }

    fn gel_border<R: Rng>(&mut self, rng: &mut R) {
        let width = (self.n / 8).max(3);
        let left = rng.gen_bool(0.5);
        for y in 0..self.n {
            for i in 0..width {
                let x = if left { i } else { self.n - 1 - i };
                let a = 0.55 * (1.0 - i as f32 / width as f32);
                self.blend(y, x, [0.98, 0.98, 1.0], a);
            }
        }
    }

    /// Clamp and quantise to 8 bits so the image survives a PNG round trip.
    fn finish(self) -> Result<Image> {
        let n = self.n;
        let mut raw = vec![0u8; n * n * 3];
        for y in 0..n {
            for x in 0..n {
                for c in 0..3 {
                    raw[(y * n + x) * 3 + c] = (self.px[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        Image::from_rgb8(n, n, &raw)
    }
}
