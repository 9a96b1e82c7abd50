//! Frozen feature extractor + classifier head, and everything run on top of
//! it at test time: augmentation averaging, background noise replacement and
//! class-activation maps.

pub mod augment;
pub mod cam;
pub mod checkpoint;
pub mod cnn;
pub mod noisecrop;
pub mod train;
pub mod tta;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::selection::FeatureMap;

pub use augment::{AugmentationPolicy, Transform};
pub use cam::{attention_from_features, attention_map, AttentionMap};
pub use cnn::{CnnConfig, ConvSpec, SmallCnn};
pub use noisecrop::{noisecrop, NoiseStats};
pub use train::{train_erm, TrainConfig, TrainOutcome};
pub use tta::{predict_tta, TtaPrediction};

/// Hand-wired extractor that exposes chosen image planes as feature channels,
/// average-pooled by `pool`. Used for toy models with known channel semantics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaneExtractor {
    pub input_size: (usize, usize),
    pub planes: Vec<usize>,
    pub pool: usize,
}

impl PlaneExtractor {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if self.planes.is_empty() || self.planes.iter().any(|&p| p >= 3) {
            return Err(Error::Config(format!("planes must index RGB channels, got {:?}", self.planes)));
        }
        if self.pool == 0 || h % self.pool != 0 || w % self.pool != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("pool {} does not tile {h}x{w}", self.pool)));
        }
        Ok(())
    }

    fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (_, h, w) = x.dim();
        let p = self.pool;
        let area = (p * p) as f32;
        Array3::from_shape_fn((self.planes.len(), h / p, w / p), |(c, y, xx)| {
            let plane = self.planes[c];
            let mut acc = 0.0f32;
            for dy in 0..p {
                for dx in 0..p {
                    acc += x[[plane, y * p + dy, xx * p + dx]];
                }
            }
            acc / area
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    Cnn(SmallCnn),
    Planes(PlaneExtractor),
}

impl Extractor {
    pub fn input_size(&self) -> (usize, usize) {
        match self {
            Extractor::Cnn(net) => net.config().input_size,
            Extractor::Planes(p) => p.input_size,
        }
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        match self {
            Extractor::Cnn(net) => net.config().feature_shape(),
            Extractor::Planes(p) => (p.planes.len(), p.input_size.0 / p.pool, p.input_size.1 / p.pool),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Extractor::Cnn(_) => "small_cnn",
            Extractor::Planes(_) => "channel_planes",
        }
    }
}

/// `logits = weight * pooled + bias`, `weight` is `classes x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl LinearHead {
    pub fn new(weight: Array2<f32>, bias: Array1<f32>) -> Result<Self> {
        if weight.nrows() != bias.len() || weight.nrows() < 2 {
            return Err(Error::Shape(format!(
                "linear head needs >= 2 classes and matching bias, got {:?} / {}",
                weight.dim(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn classes(&self) -> usize {
        self.weight.nrows()
    }

    fn logits(&self, input: &[f64]) -> Vec<f64> {
        self.weight
            .outer_iter()
            .zip(self.bias.iter())
            .map(|(row, &b)| {
                row.iter()
                    .zip(input)
                    .fold(f64::from(b), |acc, (&w, &x)| acc + f64::from(w) * x)
            })
            .collect()
    }
}

/// Pooled features -> hidden ReLU layer -> logits. Not CAM-compatible.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub hidden: LinearHead,
    pub output: LinearHead,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierHead {
    Linear(LinearHead),
    Mlp(MlpHead),
}

impl ClassifierHead {
    pub fn in_features(&self) -> usize {
        match self {
            ClassifierHead::Linear(l) => l.in_features(),
            ClassifierHead::Mlp(m) => m.hidden.in_features(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ClassifierHead::Linear(l) => l.classes(),
            ClassifierHead::Mlp(m) => m.output.classes(),
        }
    }

    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        match self {
            ClassifierHead::Linear(l) => l.logits(pooled),
            ClassifierHead::Mlp(m) => {
                let hidden: Vec<f64> = m.hidden.logits(pooled).into_iter().map(|v| v.max(0.0)).collect();
                m.output.logits(&hidden)
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Global average pool in f64.
pub(crate) fn pool_features(fmap: &FeatureMap) -> Vec<f64> {
    let n = (fmap.height() * fmap.width()) as f64;
    fmap.values()
        .outer_iter()
        .map(|ch| ch.iter().map(|&v| f64::from(v)).sum::<f64>() / n)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub architecture: String,
    pub input_size: (usize, usize),
    pub feature_shape: (usize, usize, usize),
    pub classes: usize,
}

/// Feature extractor `f` and classifier `g`; `g(f(x))` is a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    extractor: Extractor,
    head: ClassifierHead,
}

impl SplitModel {
    pub fn new(extractor: Extractor, head: ClassifierHead) -> Result<Self> {
        if let Extractor::Planes(p) = &extractor {
            p.validate()?;
        }
        let (c, _, _) = extractor.feature_shape();
        if head.in_features() != c {
            return Err(Error::Shape(format!(
                "head expects {} features but the extractor yields {c} channels",
                head.in_features()
            )));
        }
        Ok(Self { extractor, head })
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn metadata(&self) -> ModelMetadata {
        ModelMetadata {
            architecture: self.extractor.name().to_string(),
            input_size: self.extractor.input_size(),
            feature_shape: self.extractor.feature_shape(),
            classes: self.head.classes(),
        }
    }

    /// `f(x)`: the image is resized to the extractor input; the returned map
    /// records the original image size.
    pub fn features(&self, image: &Image) -> Result<FeatureMap> {
        let input = image.resized(self.extractor.input_size());
        let values = match &self.extractor {
            Extractor::Cnn(net) => net.forward(input.data())?,
            Extractor::Planes(p) => p.forward(input.data()),
        };
        FeatureMap::new(values, image.size())
    }

    /// `g(features)`: class probabilities.
    pub fn classify(&self, fmap: &FeatureMap) -> Result<Vec<f64>> {
        if fmap.channels() != self.head.in_features() {
            return Err(Error::Shape(format!(
                "head expects {} channels, got {}",
                self.head.in_features(),
                fmap.channels()
            )));
        }
        Ok(softmax(&self.head.logits(&pool_features(fmap))))
    }

    pub fn predict(&self, image: &Image) -> Result<Vec<f64>> {
        self.classify(&self.features(image)?)
    }
}
