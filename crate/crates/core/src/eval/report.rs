use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::mean_std;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    /// Negatives sampled from the background of the lesion mask.
    SegmMask,
    /// Negatives sampled from annotated artifact points.
    Artifacts,
}

impl AnnotationSource {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnotationSource::SegmMask => "segm_mask",
            AnnotationSource::Artifacts => "artifacts",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BaselineTta,
    Tts,
    NoiseCrop,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::BaselineTta => "baseline_tta",
            Method::Tts => "tts",
            Method::NoiseCrop => "noisecrop",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One grid cell aggregated over seeds. Selection fields are `None` for
/// methods that do not use keypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub n_keypoints: Option<usize>,
    pub annotation_source: Option<AnnotationSource>,
    pub alpha: Option<f64>,
    pub keep_fraction: Option<f64>,
    pub bias_factor: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub n_seeds: usize,
    /// Some seed failed for this cell; see `errors`.
    pub incomplete: bool,
    pub seed_aucs: Vec<(u64, f64)>,
    pub errors: Vec<String>,
}

impl ReportRow {
    pub(crate) fn aggregate(&mut self) {
        let values: Vec<f64> = self.seed_aucs.iter().map(|&(_, v)| v).collect();
        let (mean, std) = mean_std(&values);
        self.auc_mean = mean;
        self.auc_std = std;
        self.n_seeds = values.len();
        self.incomplete = !self.errors.is_empty() || values.is_empty();
    }

    /// Short series name, e.g. `tts/artifacts/k40/a0.2/l0.1`.
    pub fn series(&self) -> String {
        match (self.n_keypoints, self.annotation_source, self.alpha, self.keep_fraction) {
            (Some(k), Some(src), Some(a), Some(l)) => {
                format!("{}/{}/k{k}/a{a}/l{l}", self.method, src.as_str())
            }
            _ => self.method.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| !r.incomplete)
    }

    /// First row matching every given field.
    pub fn find(
        &self,
        method: Method,
        bias_factor: f64,
        n_keypoints: Option<usize>,
        source: Option<AnnotationSource>,
        alpha: Option<f64>,
    ) -> Option<&ReportRow> {
        self.rows.iter().find(|r| {
            r.method == method
                && r.bias_factor == bias_factor
                && (n_keypoints.is_none() || r.n_keypoints == n_keypoints)
                && (source.is_none() || r.annotation_source == source)
                && (alpha.is_none() || r.alpha == alpha)
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "method",
            "n_keypoints",
            "annotation_source",
            "alpha",
            "keep_fraction",
            "bias_factor",
            "auc_mean",
            "auc_std",
            "n_seeds",
            "incomplete",
            "seed_aucs",
        ])?;
        for r in &self.rows {
            let seeds = r
                .seed_aucs
                .iter()
                .map(|(s, v)| format!("{s}:{v:.6}"))
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                r.method.as_str().to_string(),
                opt(r.n_keypoints),
                opt(r.annotation_source.map(|s| s.as_str())),
                opt(r.alpha),
                opt(r.keep_fraction),
                r.bias_factor.to_string(),
                format!("{:.6}", r.auc_mean),
                format!("{:.6}", r.auc_std),
                r.n_seeds.to_string(),
                r.incomplete.to_string(),
                seeds,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long-format table for plotting AUC against bias factor:
    /// `series,bias_factor,auc_mean,auc_std,n_seeds`.
    pub fn write_bias_sweep_csv(&self, path: &Path) -> Result<()> {
        let mut rows: Vec<&ReportRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.series().cmp(&b.series()).then(a.bias_factor.total_cmp(&b.bias_factor)));
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["series", "bias_factor", "auc_mean", "auc_std", "n_seeds"])?;
        for r in rows {
            w.write_record([
                r.series(),
                r.bias_factor.to_string(),
                format!("{:.6}", r.auc_mean),
                format!("{:.6}", r.auc_std),
                r.n_seeds.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
