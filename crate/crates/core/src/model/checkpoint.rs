//! On-disk model format: a JSON document holding the architecture and every
//! parameter tensor as base64-encoded little-endian `f32`.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::cnn::ConvLayer;
use crate::model::{
    ClassifierHead, CnnConfig, Extractor, LinearHead, MlpHead, ModelMetadata, NoiseStats, PlaneExtractor, SmallCnn,
    SplitModel,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Tensor {
    shape: Vec<usize>,
    data: String,
}

impl Tensor {
    fn encode(shape: Vec<usize>, values: impl Iterator<Item = f32>) -> Self {
        let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
        Self {
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    fn decode(&self, name: &str) -> Result<Vec<f32>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        let expected: usize = self.shape.iter().product();
        if bytes.len() != expected * 4 {
            return Err(Error::Checkpoint(format!(
                "{name}: {} bytes for shape {:?}",
                bytes.len(),
                self.shape
            )));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("{name}: non-finite weight at {index}")));
        }
        Ok(values)
    }

    fn matrix(m: &Array2<f32>) -> Self {
        Self::encode(vec![m.nrows(), m.ncols()], m.iter().copied())
    }

    fn vector(v: &Array1<f32>) -> Self {
        Self::encode(vec![v.len()], v.iter().copied())
    }

    fn to_matrix(&self, name: &str) -> Result<Array2<f32>> {
        let values = self.decode(name)?;
        match self.shape[..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), values).expect("length checked")),
            _ => Err(Error::Checkpoint(format!("{name}: expected a matrix, got shape {:?}", self.shape))),
        }
    }

    fn to_vector(&self, name: &str) -> Result<Array1<f32>> {
        let values = self.decode(name)?;
        if self.shape.len() != 1 {
            return Err(Error::Checkpoint(format!("{name}: expected a vector, got shape {:?}", self.shape)));
        }
        Ok(Array1::from(values))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LinearRecord {
    weight: Tensor,
    bias: Tensor,
}

impl LinearRecord {
    fn from_head(h: &LinearHead) -> Self {
        Self {
            weight: Tensor::matrix(&h.weight),
            bias: Tensor::vector(&h.bias),
        }
    }

    fn to_head(&self, name: &str) -> Result<LinearHead> {
        LinearHead::new(
            self.weight.to_matrix(&format!("{name}.weight"))?,
            self.bias.to_vector(&format!("{name}.bias"))?,
        )
        .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ExtractorRecord {
    SmallCnn { config: CnnConfig, layers: Vec<LinearRecord> },
    ChannelPlanes(PlaneExtractor),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HeadRecord {
    Linear(LinearRecord),
    Mlp { hidden: LinearRecord, output: LinearRecord },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    metadata: ModelMetadata,
    extractor: ExtractorRecord,
    head: HeadRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_stats: Option<NoiseStats>,
}

/// A model plus the training-set statistics NoiseCrop needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SplitModel,
    pub noise_stats: Option<NoiseStats>,
}

impl Checkpoint {
    pub fn new(model: SplitModel, noise_stats: Option<NoiseStats>) -> Self {
        Self { model, noise_stats }
    }

    pub fn to_json(&self) -> Result<String> {
        let extractor = match self.model.extractor() {
            Extractor::Cnn(net) => ExtractorRecord::SmallCnn {
                config: net.config().clone(),
                layers: net
                    .layers()
                    .iter()
                    .map(|l| LinearRecord {
                        weight: Tensor::matrix(&l.weight),
                        bias: Tensor::vector(&l.bias),
                    })
                    .collect(),
            },
            Extractor::Planes(p) => ExtractorRecord::ChannelPlanes(p.clone()),
        };
        let head = match self.model.head() {
            ClassifierHead::Linear(l) => HeadRecord::Linear(LinearRecord::from_head(l)),
            ClassifierHead::Mlp(m) => HeadRecord::Mlp {
                hidden: LinearRecord::from_head(&m.hidden),
                output: LinearRecord::from_head(&m.output),
            },
        };
        let file = CheckpointFile {
            format_version: FORMAT_VERSION,
            metadata: self.model.metadata(),
            extractor,
            head,
            noise_stats: self.noise_stats,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                file.format_version
            )));
        }
        let extractor = match file.extractor {
            ExtractorRecord::SmallCnn { config, layers } => {
                let layers = layers
                    .iter()
                    .zip(&config.layers)
                    .enumerate()
                    .map(|(i, (rec, spec))| {
                        Ok(ConvLayer {
                            weight: rec.weight.to_matrix(&format!("conv{i}.weight"))?,
                            bias: rec.bias.to_vector(&format!("conv{i}.bias"))?,
                            pool: spec.pool,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                if layers.len() != config.layers.len() {
                    return Err(Error::Checkpoint(format!(
                        "{} conv layers stored for a {}-layer config",
                        layers.len(),
                        config.layers.len()
                    )));
                }
                Extractor::Cnn(SmallCnn::from_layers(config, layers)?)
            }
            ExtractorRecord::ChannelPlanes(p) => Extractor::Planes(p),
        };
        let head = match file.head {
            HeadRecord::Linear(l) => ClassifierHead::Linear(l.to_head("head")?),
            HeadRecord::Mlp { hidden, output } => ClassifierHead::Mlp(MlpHead {
                hidden: hidden.to_head("head.hidden")?,
                output: output.to_head("head.output")?,
            }),
        };
        let model = SplitModel::new(extractor, head).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if model.metadata() != file.metadata {
            return Err(Error::Checkpoint(format!(
                "metadata {:?} does not describe the stored weights {:?}",
                file.metadata,
                model.metadata()
            )));
        }
        Ok(Self {
            model,
            noise_stats: file.noise_stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
