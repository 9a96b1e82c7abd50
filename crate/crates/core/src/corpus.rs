//! A labelled image collection on disk:
//!
//! ```text
//! <dir>/metadata.csv        image_id,label,<artifact flags>
//! <dir>/images/<id>.png     8-bit RGB
//! <dir>/masks/<id>.png      optional lesion mask, foreground >= 128
//! <dir>/annotations.json    optional artifact point annotations
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Image, LabeledImage};
use crate::keypoints::{read_annotations, write_annotations, ArtifactAnnotation, SegmentationMask};
use crate::synth::SynthSample;
use crate::trapset::{read_metadata_csv, write_metadata_csv, SampleRecord};

#[derive(Debug, Clone)]
pub struct CorpusSample {
    pub record: SampleRecord,
    pub image: Image,
    pub mask: Option<SegmentationMask>,
    pub annotation: Option<ArtifactAnnotation>,
}

impl CorpusSample {
    pub fn labeled(&self) -> LabeledImage {
        LabeledImage {
            image_id: self.record.image_id.clone(),
            image: self.image.clone(),
            label: self.record.label,
        }
    }
}

/// Samples keyed and ordered by image id.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    samples: BTreeMap<String, CorpusSample>,
}

impl Corpus {
    pub fn new(samples: Vec<CorpusSample>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for s in samples {
            if let Some(m) = &s.mask {
                if m.dim() != s.image.size() {
                    return Err(Error::Shape(format!(
                        "mask for {} is {:?} but the image is {:?}",
                        s.record.image_id,
                        m.dim(),
                        s.image.size()
                    )));
                }
            }
            if let Some(a) = &s.annotation {
                a.check_bounds(s.image.size())?;
            }
            let id = s.record.image_id.clone();
            if map.insert(id.clone(), s).is_some() {
                return Err(Error::Precondition(format!("duplicate image id {id:?}")));
            }
        }
        Ok(Self { samples: map })
    }

    pub fn from_synth(samples: Vec<SynthSample>) -> Result<Self> {
        Self::new(
            samples
                .into_iter()
                .map(|s| CorpusSample {
                    record: s.record,
                    image: s.image,
                    mask: Some(s.mask),
                    annotation: Some(s.annotation),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&CorpusSample> {
        self.samples.get(image_id)
    }

    pub fn samples(&self) -> impl Iterator<Item = &CorpusSample> {
        self.samples.values()
    }

    pub fn records(&self) -> Vec<SampleRecord> {
        self.samples.values().map(|s| s.record.clone()).collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let records = read_metadata_csv(&dir.join("metadata.csv"))?;
        let ann_path = dir.join("annotations.json");
        let mut annotations: BTreeMap<String, ArtifactAnnotation> = if ann_path.exists() {
            read_annotations(&ann_path)?
                .into_iter()
                .map(|a| (a.image_id.clone(), a))
                .collect()
        } else {
            BTreeMap::new()
        };
        let mut samples = Vec::with_capacity(records.len());
        for record in records {
            let id = &record.image_id;
            let image = Image::load(&dir.join("images").join(format!("{id}.png")))?;
            let mask_path = dir.join("masks").join(format!("{id}.png"));
            let mask = if mask_path.exists() {
                Some(SegmentationMask::load(&mask_path)?)
            } else {
                None
            };
            let annotation = annotations.remove(id);
            samples.push(CorpusSample {
                record,
                image,
                mask,
                annotation,
            });
        }
        if let Some(id) = annotations.keys().next() {
            return Err(Error::Precondition(format!(
                "annotation for {id:?} has no metadata row"
            )));
        }
        Self::new(samples)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("masks"))?;
        write_metadata_csv(&self.records(), &dir.join("metadata.csv"))?;
        let mut annotations = Vec::new();
        for (id, s) in &self.samples {
            s.image.save(&dir.join("images").join(format!("{id}.png")))?;
            if let Some(m) = &s.mask {
                m.save(&dir.join("masks").join(format!("{id}.png")))?;
            }
            if let Some(a) = &s.annotation {
                annotations.push(a.clone());
            }
        }
        write_annotations(&annotations, &dir.join("annotations.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn disk_round_trip() {
        let synth = generate(&SynthConfig {
            samples: 12,
            seed: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let corpus = Corpus::from_synth(synth).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.len(), 12);
        for (a, b) in corpus.samples().zip(back.samples()) {
            assert_eq!(a.record, b.record);
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.annotation, b.annotation);
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let s = generate(&SynthConfig {
            samples: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut twice = s.clone();
        twice.extend(s);
        assert!(Corpus::from_synth(twice).is_err());
    }
}
