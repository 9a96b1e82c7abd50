//! Cross-seed grid over trap-set bias, selection settings and baselines.
//!
//! For every (bias factor, seed) a trap split is built, a model is trained
//! on its train stratum, and each method scores the test stratum one image
//! at a time. Replica features are computed once per image and shared by
//! the baseline and all selection cells.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusSample};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::eval::report::{AnnotationSource, EvalReport, Method, ReportRow};
use crate::keypoints::{sample_from_artifacts, sample_from_mask};
use crate::model::tta::{average_probabilities, replica_features};
use crate::model::{noisecrop, AugmentationPolicy, NoiseStats, SplitModel, TrainConfig};
use crate::selection::{tts_select, KeypointSet, SelectionConfig};
use crate::trapset::{build_trap_split, Stratum, TrapSplitSpec};

/// One selection setting. `n_keypoints` is the total count, split equally
/// between positives and negatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtsCell {
    pub n_keypoints: usize,
    pub source: AnnotationSource,
    pub alpha: f64,
    #[serde(default = "default_keep_fraction")]
    pub keep_fraction: f64,
}

fn default_keep_fraction() -> f64 {
    SelectionConfig::DEFAULT_KEEP_FRACTION
}

fn default_true() -> bool {
    true
}

fn default_replicas() -> usize {
    AugmentationPolicy::DEFAULT_REPLICAS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub bias_factors: Vec<f64>,
    #[serde(default)]
    pub tts: Vec<TtsCell>,
    #[serde(default = "default_true")]
    pub baseline: bool,
    #[serde(default = "default_true")]
    pub noisecrop: bool,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub train: TrainConfig,
    /// Train/val/test fractions of the trap split.
    #[serde(default = "default_fractions")]
    pub fractions: (f64, f64, f64),
}

fn default_fractions() -> (f64, f64, f64) {
    (0.6, 0.1, 0.3)
}

impl Default for AblationGrid {
    /// The keypoint-count, source and alpha sweep at bias 1.
    fn default() -> Self {
        let mut tts = Vec::new();
        for source in [AnnotationSource::SegmMask, AnnotationSource::Artifacts] {
            for alpha in [0.2, 0.4] {
                for n_keypoints in [2, 10, 20, 40] {
                    tts.push(TtsCell {
                        n_keypoints,
                        source,
                        alpha,
                        keep_fraction: SelectionConfig::DEFAULT_KEEP_FRACTION,
                    });
                }
            }
        }
        Self {
            bias_factors: vec![1.0],
            tts,
            baseline: true,
            noisecrop: true,
            replicas: AugmentationPolicy::DEFAULT_REPLICAS,
            train: TrainConfig::default(),
            fractions: default_fractions(),
        }
    }
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.bias_factors.is_empty() || (self.tts.is_empty() && !self.baseline && !self.noisecrop) {
            return Err(Error::Config("the grid has no cells".into()));
        }
        for cell in &self.tts {
            if cell.n_keypoints < 2 || cell.n_keypoints % 2 != 0 {
                return Err(Error::Config(format!(
                    "n_keypoints must be a positive even total, got {}",
                    cell.n_keypoints
                )));
            }
            SelectionConfig::new(cell.alpha, cell.keep_fraction)?;
        }
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be at least 1".into()));
        }
        let (tr, va, te) = self.fractions;
        for &b in &self.bias_factors {
            TrapSplitSpec::new(b, 0).with_fractions(tr, va, te).validate()?;
        }
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let grid: Self = serde_json::from_str(text)?;
        grid.validate()?;
        Ok(grid)
    }
}

/// Identifies a column of per-image scores.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Column {
    Baseline,
    Tts(usize),
    NoiseCrop,
}

/// Per-image probability of melanoma for every column; a column fails as a
/// whole on its first error.
struct Scores {
    values: Vec<Result<Vec<f64>>>,
}

fn columns(grid: &AblationGrid) -> Vec<Column> {
    let mut cols = Vec::new();
    if grid.baseline {
        cols.push(Column::Baseline);
    }
    cols.extend((0..grid.tts.len()).map(Column::Tts));
    if grid.noisecrop {
        cols.push(Column::NoiseCrop);
    }
    cols
}

fn keypoints(sample: &CorpusSample, cell: &TtsCell, seed: u64) -> Result<KeypointSet> {
    let mask = sample.mask.as_ref().ok_or_else(|| {
        Error::Precondition(format!("{} has no segmentation mask", sample.record.image_id))
    })?;
    let per_side = cell.n_keypoints / 2;
    match (cell.source, &sample.annotation) {
        (AnnotationSource::Artifacts, Some(ann)) if !ann.points.is_empty() => {
            sample_from_artifacts(mask, ann, per_side, seed)
        }
        // No annotated artifact in view: negatives come from the background.
        _ => sample_from_mask(mask, per_side, seed),
    }
}

/// Scores a single test image under every column.
fn score_image(
    model: &SplitModel,
    sample: &CorpusSample,
    grid: &AblationGrid,
    policy: &AugmentationPolicy,
    stats: &NoiseStats,
    seed: u64,
    cols: &[Column],
) -> Vec<Result<f64>> {
    let melanoma = crate::trapset::Label::Melanoma.index();
    let clean = model.features(&sample.image);
    let replicas = replica_features(model, &sample.image, policy);
    cols.iter()
        .map(|col| -> Result<f64> {
            let replicas = replicas.as_ref().map_err(clone_err)?;
            match *col {
                Column::Baseline => Ok(average_probabilities(model, replicas, None)?[melanoma]),
                Column::Tts(i) => {
                    let cell = &grid.tts[i];
                    let keys = keypoints(sample, cell, seed)?;
                    let cfg = SelectionConfig::new(cell.alpha, cell.keep_fraction)?;
                    let clean = clean.as_ref().map_err(clone_err)?;
                    let sel = tts_select(clean, &keys, &cfg)?;
                    Ok(average_probabilities(model, replicas, Some(&sel.mask))?[melanoma])
                }
                Column::NoiseCrop => {
                    let mask = sample.mask.as_ref().ok_or_else(|| {
                        Error::Precondition(format!("{} has no segmentation mask", sample.record.image_id))
                    })?;
                    let cropped = noisecrop(&sample.image, mask, stats, seed)?;
                    let feats = replica_features(model, &cropped, policy)?;
                    Ok(average_probabilities(model, &feats, None)?[melanoma])
                }
            }
        })
        .collect()
}

fn clone_err(e: &Error) -> Error {
    Error::Precondition(e.to_string())
}

/// Everything measured for one (bias factor, seed) run.
struct RunOutcome {
    per_column: Vec<Result<f64>>,
}

fn run_once(corpus: &Corpus, grid: &AblationGrid, bias: f64, seed: u64, cols: &[Column]) -> Result<RunOutcome> {
    let (tr, va, te) = grid.fractions;
    let spec = TrapSplitSpec::new(bias, seed).with_fractions(tr, va, te);
    let split = build_trap_split(&corpus.records(), &spec)?;
    let pick = |stratum| -> Vec<&CorpusSample> {
        split
            .ids(stratum)
            .into_iter()
            .map(|id| corpus.get(id).expect("split ids come from the corpus"))
            .collect()
    };
    let train: Vec<_> = pick(Stratum::Train).iter().map(|s| s.labeled()).collect();
    let val: Vec<_> = pick(Stratum::Val).iter().map(|s| s.labeled()).collect();
    let test = pick(Stratum::Test);

    let cfg = TrainConfig {
        seed,
        ..grid.train.clone()
    };
    let outcome = crate::model::train_erm(&train, &val, &cfg)?;
    log::info!(
        "bias {bias} seed {seed}: trained {} epochs, best epoch {} val AUC {:?}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_val_auc
    );
    let model = outcome.model;
    let stats = NoiseStats::from_images(train.iter().map(|s| &s.image))?;
    let policy = AugmentationPolicy::standard(grid.replicas, seed);

    let labels: Vec<bool> = test.iter().map(|s| s.record.label.is_positive()).collect();
    let mut table: Scores = Scores {
        values: cols.iter().map(|_| Ok(Vec::with_capacity(test.len()))).collect(),
    };
    for (i, sample) in test.iter().enumerate() {
        let image_seed = seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(i as u64);
        for (slot, score) in table.values.iter_mut().zip(score_image(
            &model,
            sample,
            grid,
            &policy,
            &stats,
            image_seed,
            cols,
        )) {
            match (slot.as_mut(), score) {
                (Ok(v), Ok(s)) => v.push(s),
                (Ok(_), Err(e)) => {
                    *slot = Err(Error::Precondition(format!("{}: {e}", sample.record.image_id)))
                }
                (Err(_), _) => {}
            }
        }
    }
    let per_column = table
        .values
        .into_iter()
        .map(|scores| scores.and_then(|s| auc(&s, &labels)))
        .collect();
    Ok(RunOutcome { per_column })
}

fn empty_row(grid: &AblationGrid, col: Column, bias_factor: f64) -> ReportRow {
    let (method, cell) = match col {
        Column::Baseline => (Method::BaselineTta, None),
        Column::Tts(i) => (Method::Tts, Some(grid.tts[i])),
        Column::NoiseCrop => (Method::NoiseCrop, None),
    };
    ReportRow {
        method,
        n_keypoints: cell.map(|c| c.n_keypoints),
        annotation_source: cell.map(|c| c.source),
        alpha: cell.map(|c| c.alpha),
        keep_fraction: cell.map(|c| c.keep_fraction),
        bias_factor,
        auc_mean: f64::NAN,
        auc_std: f64::NAN,
        n_seeds: 0,
        incomplete: true,
        seed_aucs: Vec::new(),
        errors: Vec::new(),
    }
}

/// Runs every grid cell for every seed. Failures are recorded on the
/// affected rows and the run continues.
pub fn run_ablation(corpus: &Corpus, grid: &AblationGrid, seeds: &[u64]) -> Result<EvalReport> {
    grid.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let cols = columns(grid);
    let mut rows: BTreeMap<(usize, usize), ReportRow> = BTreeMap::new();
    for (bi, &bias) in grid.bias_factors.iter().enumerate() {
        for (ci, &col) in cols.iter().enumerate() {
            rows.insert((bi, ci), empty_row(grid, col, bias));
        }
        for &seed in seeds {
            match run_once(corpus, grid, bias, seed, &cols) {
                Ok(run) => {
                    for (ci, result) in run.per_column.into_iter().enumerate() {
                        let row = rows.get_mut(&(bi, ci)).expect("row exists");
                        match result {
                            Ok(v) => row.seed_aucs.push((seed, v)),
                            Err(e) => row.errors.push(format!("seed {seed}: {e}")),
                        }
                    }
                }
                Err(e) => {
                    log::warn!("bias {bias} seed {seed} failed: {e}");
                    for ci in 0..cols.len() {
                        rows.get_mut(&(bi, ci))
                            .expect("row exists")
                            .errors
                            .push(format!("seed {seed}: {e}"));
                    }
                }
            }
        }
    }
    let rows = rows
        .into_values()
        .map(|mut r| {
            r.aggregate();
            r
        })
        .collect();
    Ok(EvalReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CnnConfig, ConvSpec};
    use crate::synth::{generate, SynthConfig};

    fn tiny_grid() -> AblationGrid {
        AblationGrid {
            bias_factors: vec![1.0],
            tts: vec![
                TtsCell {
                    n_keypoints: 4,
                    source: AnnotationSource::Artifacts,
                    alpha: 0.2,
                    keep_fraction: 1.0,
                },
                TtsCell {
                    n_keypoints: 2,
                    source: AnnotationSource::SegmMask,
                    alpha: 0.4,
                    keep_fraction: 0.5,
                },
            ],
            baseline: true,
            noisecrop: true,
            replicas: 3,
            train: TrainConfig {
                epochs: 2,
                cnn: CnnConfig {
                    input_size: (16, 16),
                    in_channels: 3,
                    layers: vec![
                        ConvSpec {
                            out_channels: 4,
                            pool: true,
                        },
                        ConvSpec {
                            out_channels: 4,
                            pool: false,
                        },
                    ],
                },
                ..TrainConfig::default()
            },
            fractions: (0.6, 0.1, 0.3),
        }
    }

    fn corpus() -> Corpus {
        Corpus::from_synth(
            generate(&SynthConfig {
                samples: 60,
                seed: 2,
                ..SynthConfig::default()
            })
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn one_seed_gives_one_row_per_cell() {
        let report = run_ablation(&corpus(), &tiny_grid(), &[7]).unwrap();
        assert_eq!(report.rows.len(), 4);
        for r in &report.rows {
            assert_eq!(r.n_seeds, 1, "{r:?}");
            assert!(!r.incomplete);
            assert!((0.0..=1.0).contains(&r.auc_mean));
            assert_eq!(r.auc_std, 0.0);
        }
        let base = report.find(Method::BaselineTta, 1.0, None, None, None).unwrap();
        let identity = report.find(Method::Tts, 1.0, Some(4), None, None).unwrap();
        assert!((base.auc_mean - identity.auc_mean).abs() < 1e-6);
    }

    #[test]
    fn failures_are_recorded_per_cell() {
        let mut c = corpus().samples().cloned().collect::<Vec<_>>();
        for s in c.iter_mut() {
            s.mask = None;
        }
        let corpus = Corpus::new(c).unwrap();
        let report = run_ablation(&corpus, &tiny_grid(), &[1]).unwrap();
        let base = report.find(Method::BaselineTta, 1.0, None, None, None).unwrap();
        assert!(!base.incomplete);
        let nc = report.find(Method::NoiseCrop, 1.0, None, None, None).unwrap();
        assert!(nc.incomplete && nc.n_seeds == 0 && !nc.errors.is_empty());
        assert!(!report.is_complete());
    }

    #[test]
    fn aggregation_is_recomputable_and_csv_written() {
        let report = run_ablation(&corpus(), &tiny_grid(), &[1, 2]).unwrap();
        for r in &report.rows {
            let vals: Vec<f64> = r.seed_aucs.iter().map(|s| s.1).collect();
            let (m, s) = crate::eval::mean_std(&vals);
            assert_eq!((m, s), (r.auc_mean, r.auc_std));
        }
        let dir = tempfile::tempdir().unwrap();
        report.write_csv(&dir.path().join("r.csv")).unwrap();
        report.write_bias_sweep_csv(&dir.path().join("b.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(text.starts_with("method,n_keypoints,annotation_source,alpha"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn grid_json_defaults() {
        let g = AblationGrid::from_json(
            r#"{"bias_factors":[0.5,1.0],"tts":[{"n_keypoints":40,"source":"artifacts","alpha":0.2}]}"#,
        )
        .unwrap();
        assert_eq!(g.tts[0].keep_fraction, 0.1);
        assert!(g.baseline && g.noisecrop);
        assert_eq!(g.replicas, 50);
        assert!(AblationGrid::from_json(r#"{"bias_factors":[]}"#).is_err());
        assert!(AblationGrid::from_json(r#"{"bias_factors":[1.0],"tts":[{"n_keypoints":3,"source":"artifacts","alpha":0.2}]}"#).is_err());
    }
}
