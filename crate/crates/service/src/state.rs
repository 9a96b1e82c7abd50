use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use tts_core::corpus::{Corpus, CorpusSample};
use tts_core::keypoints::{read_annotations, write_annotations, ArtifactAnnotation};
use tts_core::model::checkpoint::Checkpoint;
use tts_core::model::tta::replica_features;
use tts_core::model::{AugmentationPolicy, SplitModel};
use tts_core::selection::FeatureMap;
use tts_core::{Error, Result};

use crate::ServiceConfig;

type Cache<T> = RwLock<HashMap<String, Arc<T>>>;

/// Shared, read-mostly server state. The model and corpus never change after
/// startup; only the annotation store is written.
pub struct AppState {
    pub(crate) model: SplitModel,
    pub(crate) corpus: Corpus,
    pub(crate) study_mode: bool,
    pub(crate) policy: AugmentationPolicy,
    cache_enabled: bool,
    native: Cache<FeatureMap>,
    replicas: Cache<Vec<FeatureMap>>,
    annotations: Mutex<BTreeMap<String, ArtifactAnnotation>>,
    annotations_path: PathBuf,
}

impl AppState {
    pub fn load(cfg: &ServiceConfig) -> Result<Self> {
        let checkpoint = Checkpoint::load(&cfg.checkpoint)?;
        let corpus = Corpus::load(&cfg.corpus)?;
        let path = cfg.annotations_path();
        let stored = if path.exists() { read_annotations(&path)? } else { Vec::new() };
        Self::new(checkpoint.model, corpus, stored, path, cfg)
    }

    pub fn new(
        model: SplitModel,
        corpus: Corpus,
        annotations: Vec<ArtifactAnnotation>,
        annotations_path: PathBuf,
        cfg: &ServiceConfig,
    ) -> Result<Self> {
        let policy = AugmentationPolicy::standard(cfg.tta_replicas, cfg.tta_seed);
        policy.validate()?;
        let mut store = BTreeMap::new();
        for a in annotations {
            let sample = corpus
                .get(&a.image_id)
                .ok_or_else(|| Error::Precondition(format!("annotation for unknown image {:?}", a.image_id)))?;
            a.check_bounds(sample.image.size())?;
            store.insert(a.image_id.clone(), a);
        }
        Ok(Self {
            model,
            corpus,
            study_mode: cfg.study_mode,
            policy,
            cache_enabled: cfg.cache_features,
            native: RwLock::default(),
            replicas: RwLock::default(),
            annotations: Mutex::new(store),
            annotations_path,
        })
    }

    pub fn sample(&self, image_id: &str) -> Option<&CorpusSample> {
        self.corpus.get(image_id)
    }

    pub fn corpus_len(&self) -> usize {
        self.corpus.len()
    }

    pub fn model(&self) -> &SplitModel {
        &self.model
    }

    /// Feature map of the un-augmented image.
    pub fn features(&self, sample: &CorpusSample) -> Result<Arc<FeatureMap>> {
        self.cached(&self.native, sample, |s| self.model.features(&s.image))
    }

    /// Feature maps of every TTA replica.
    pub fn replica_features(&self, sample: &CorpusSample) -> Result<Arc<Vec<FeatureMap>>> {
        self.cached(&self.replicas, sample, |s| replica_features(&self.model, &s.image, &self.policy))
    }

    fn cached<T>(
        &self,
        cache: &Cache<T>,
        sample: &CorpusSample,
        compute: impl FnOnce(&CorpusSample) -> Result<T>,
    ) -> Result<Arc<T>> {
        let id = &sample.record.image_id;
        if self.cache_enabled {
            if let Some(hit) = cache.read().expect("cache lock poisoned").get(id) {
                return Ok(Arc::clone(hit));
            }
        }
        let value = Arc::new(compute(sample)?);
        if self.cache_enabled {
            cache
                .write()
                .expect("cache lock poisoned")
                .entry(id.clone())
                .or_insert_with(|| Arc::clone(&value));
        }
        Ok(value)
    }

    pub fn annotation(&self, image_id: &str) -> Option<ArtifactAnnotation> {
        self.annotations.lock().expect("store lock poisoned").get(image_id).cloned()
    }

    /// Replace the record for one image and rewrite the store on disk. The
    /// lock is held across the write so concurrent updates land in order.
    pub fn store_annotation(&self, annotation: ArtifactAnnotation) -> Result<()> {
        let mut store = self.annotations.lock().expect("store lock poisoned");
        let previous = store.insert(annotation.image_id.clone(), annotation.clone());
        let all: Vec<ArtifactAnnotation> = store.values().cloned().collect();
        if let Err(e) = persist(&all, &self.annotations_path) {
            match previous {
                Some(p) => store.insert(p.image_id.clone(), p),
                None => store.remove(&annotation.image_id),
            };
            return Err(e);
        }
        Ok(())
    }
}

/// Write to a sibling temporary file, then rename over the target.
fn persist(annotations: &[ArtifactAnnotation], path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    write_annotations(annotations, &tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
