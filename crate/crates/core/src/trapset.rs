//! Trap-set construction: train/val/test partitions in which artifact–label
//! associations are amplified in train and reversed in test.
//!
//! Construction runs in two phases. A deterministic greedy pass ranks the
//! samples of each class by how many artifacts agree with the label and
//! sends the most agreeing ones to the training pool and the least agreeing
//! ones to test. Then, per sample, the bias factor is the probability of
//! keeping that greedy assignment; otherwise the sample takes a random free
//! slot. Validation is carved at random from the training pool.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    Melanoma,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Melanoma
    }

    pub fn index(self) -> usize {
        match self {
            Label::Benign => 0,
            Label::Melanoma => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Melanoma => "melanoma",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "melanoma" | "1" => Ok(Label::Melanoma),
            "benign" | "0" => Ok(Label::Benign),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// Every artifact type tracked for splitting, including the ones that are
/// not keypoint-annotated (hair, gel bubbles, gel borders).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Artifact {
    DarkCorner,
    Ruler,
    InkMarking,
    Patch,
    Hair,
    GelBubble,
    GelBorder,
}

impl Artifact {
    pub const ALL: [Artifact; 7] = [
        Artifact::DarkCorner,
        Artifact::Ruler,
        Artifact::InkMarking,
        Artifact::Patch,
        Artifact::Hair,
        Artifact::GelBubble,
        Artifact::GelBorder,
    ];
    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Artifact::DarkCorner => "dark_corner",
            Artifact::Ruler => "ruler",
            Artifact::InkMarking => "ink_marking",
            Artifact::Patch => "patch",
            Artifact::Hair => "hair",
            Artifact::GelBubble => "gel_bubble",
            Artifact::GelBorder => "gel_border",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_id: String,
    pub label: Label,
    pub artifacts: [bool; Artifact::COUNT],
}

impl SampleRecord {
    pub fn has(&self, a: Artifact) -> bool {
        self.artifacts[a.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Train,
    Val,
    Test,
}

impl Stratum {
    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Train => "train",
            Stratum::Val => "val",
            Stratum::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrapSplitSpec {
    pub bias_factor: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl TrapSplitSpec {
    pub fn new(bias_factor: f64, seed: u64) -> Self {
        Self {
            bias_factor,
            train_fraction: 0.6,
            val_fraction: 0.1,
            test_fraction: 0.3,
            seed,
        }
    }

    pub fn with_fractions(mut self, train: f64, val: f64, test: f64) -> Self {
        self.train_fraction = train;
        self.val_fraction = val;
        self.test_fraction = test;
        self
    }

    /// Train and test fractions must be positive; validation may be zero.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.bias_factor) {
            return Err(Error::Config(format!(
                "bias_factor must lie in [0, 1], got {}",
                self.bias_factor
            )));
        }
        let fractions = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fractions.iter().any(|f| !f.is_finite() || *f < 0.0)
            || self.train_fraction <= 0.0
            || self.test_fraction <= 0.0
        {
            return Err(Error::Config(format!(
                "train/test fractions must be positive and val non-negative, got {fractions:?}"
            )));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Signed association of one artifact with the melanoma label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiEntry {
    pub artifact: Artifact,
    pub phi: f64,
    /// Artifact or label constant within the stratum; `phi` is reported as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrapSplit {
    pub assignment: BTreeMap<String, Stratum>,
    pub achieved_train_correlations: Vec<PhiEntry>,
    pub achieved_test_correlations: Vec<PhiEntry>,
}

impl TrapSplit {
    pub fn stratum_of(&self, image_id: &str) -> Option<Stratum> {
        self.assignment.get(image_id).copied()
    }

    /// Ids in a stratum, sorted.
    pub fn ids(&self, stratum: Stratum) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, s)| **s == stratum)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn train_phi(&self, a: Artifact) -> f64 {
        self.achieved_train_correlations[a.index()].phi
    }

    pub fn test_phi(&self, a: Artifact) -> f64 {
        self.achieved_test_correlations[a.index()].phi
    }
}

/// Phi coefficient between an artifact and the melanoma label over `records`.
pub fn phi(records: &[&SampleRecord], artifact: Artifact) -> PhiEntry {
    let mut n = [[0.0f64; 2]; 2];
    for r in records {
        n[usize::from(r.has(artifact))][r.label.index()] += 1.0;
    }
    let present = n[1][0] + n[1][1];
    let absent = n[0][0] + n[0][1];
    let positive = n[0][1] + n[1][1];
    let negative = n[0][0] + n[1][0];
    let denom = present * absent * positive * negative;
    if denom == 0.0 {
        return PhiEntry {
            artifact,
            phi: 0.0,
            degenerate: true,
        };
    }
    PhiEntry {
        artifact,
        phi: (n[1][1] * n[0][0] - n[1][0] * n[0][1]) / denom.sqrt(),
        degenerate: false,
    }
}

fn phi_table(records: &[&SampleRecord]) -> Vec<PhiEntry> {
    Artifact::ALL.iter().map(|&a| phi(records, a)).collect()
}

/// Artifacts that vary across the dataset.
fn active_artifacts(records: &[SampleRecord]) -> Vec<Artifact> {
    Artifact::ALL
        .into_iter()
        .filter(|&a| {
            let present = records.iter().filter(|r| r.has(a)).count();
            present > 0 && present < records.len()
        })
        .collect()
}

/// Net number of active artifacts whose presence agrees with the label.
fn agreement(record: &SampleRecord, active: &[Artifact]) -> i32 {
    active
        .iter()
        .map(|&a| if record.has(a) == record.label.is_positive() { 1 } else { -1 })
        .sum()
}

#[derive(Debug, Clone, Copy)]
struct ClassQuota {
    pool: usize,
    val: usize,
    test: usize,
}

fn class_quota(n: usize, spec: &TrapSplitSpec) -> ClassQuota {
    let test = (spec.test_fraction * n as f64).round() as usize;
    let val = (spec.val_fraction * n as f64).round() as usize;
    ClassQuota {
        pool: n - test.min(n),
        val,
        test: test.min(n),
    }
}

#[cfg(test)]
/// Artifacts whose association can be positive in the training pool and
/// negative in test at the same time, given the per-class quotas. Opposition
/// is only attainable for these.
fn opposable_artifacts(
    records: &[SampleRecord],
    classes: &[Vec<usize>; 2],
    quotas: &[ClassQuota; 2],
) -> Vec<Artifact> {
    let (ben, mel) = (Label::Benign.index(), Label::Melanoma.index());
    active_artifacts(records)
        .into_iter()
        .filter(|&a| {
            let with = |c: usize| classes[c].iter().filter(|&&i| records[i].has(a)).count() as f64;
            let (km, kb) = (with(mel), with(ben));
            let (pm, pb) = (quotas[mel].pool as f64, quotas[ben].pool as f64);
            let (tm, tb) = (quotas[mel].test as f64, quotas[ben].test as f64);
            // Most melanoma artifacts and fewest benign artifacts in the pool.
            let xm = km.min(pm);
            let xb = (kb - tb).max(0.0);
            xm / pm > xb / pb && (km - xm) / tm < (kb - xb) / tb
        })
        .collect()
}

/// Greedy assignment alone: `true` = training pool, `false` = test.
///
/// Within each class, samples are ranked by label agreement (ties by input
/// order); the top of the ranking fills the training pool quota and the rest
/// go to test.
fn solver_assignment(
    records: &[SampleRecord],
    classes: &[Vec<usize>; 2],
    quotas: &[ClassQuota; 2],
) -> Vec<bool> {
    let active = active_artifacts(records);
    let mut to_pool = vec![false; records.len()];
    for (members, quota) in classes.iter().zip(quotas) {
        let mut ranked = members.clone();
        ranked.sort_by_key(|&i| (std::cmp::Reverse(agreement(&records[i], &active)), i));
        for &i in ranked.iter().take(quota.pool) {
            to_pool[i] = true;
        }
    }
    to_pool
}

pub fn build_trap_split(records: &[SampleRecord], spec: &TrapSplitSpec) -> Result<TrapSplit> {
    spec.validate()?;
    let mut classes: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, r) in records.iter().enumerate() {
        classes[r.label.index()].push(i);
    }
    if classes.iter().any(|c| c.len() < 2) {
        return Err(Error::Precondition(format!(
            "need at least 2 samples per class, got benign={} melanoma={}",
            classes[0].len(),
            classes[1].len()
        )));
    }
    if active_artifacts(records).is_empty() {
        return Err(Error::Precondition("every artifact column is constant".into()));
    }
    {
        let mut seen = std::collections::HashSet::new();
        if let Some(r) = records.iter().find(|r| !seen.insert(r.image_id.as_str())) {
            return Err(Error::Precondition(format!("duplicate image_id {:?}", r.image_id)));
        }
    }

    let quotas = [
        class_quota(classes[0].len(), spec),
        class_quota(classes[1].len(), spec),
    ];
    for (label, q) in [Label::Benign, Label::Melanoma].iter().zip(&quotas) {
        if q.test == 0 || q.pool <= q.val {
            return Err(Error::Config(format!(
                "fractions leave an empty train or test stratum for class {label} ({q:?})"
            )));
        }
    }
    if spec.val_fraction > 0.0 && quotas.iter().all(|q| q.val == 0) {
        return Err(Error::Config("val_fraction > 0 but the validation stratum is empty".into()));
    }

    let solver = solver_assignment(records, &classes, &quotas);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut to_pool = vec![false; records.len()];
    for (members, quota) in classes.iter().zip(&quotas) {
        let mut order = members.clone();
        order.shuffle(&mut rng);
        let mut free_pool = quota.pool;
        let mut free_test = quota.test;
        for i in order {
            let follow = rng.gen::<f64>() < spec.bias_factor;
            let pool = if follow && solver[i] && free_pool > 0 {
                true
            } else if follow && !solver[i] && free_test > 0 {
                false
            } else {
                rng.gen_range(0..free_pool + free_test) < free_pool
            };
            if pool {
                free_pool -= 1;
            } else {
                free_test -= 1;
            }
            to_pool[i] = pool;
        }
    }

    let mut assignment = BTreeMap::new();
    for (members, quota) in classes.iter().zip(&quotas) {
        let mut pool: Vec<usize> = members.iter().copied().filter(|&i| to_pool[i]).collect();
        pool.shuffle(&mut rng);
        for (rank, &i) in pool.iter().enumerate() {
            let s = if rank < quota.val { Stratum::Val } else { Stratum::Train };
            assignment.insert(records[i].image_id.clone(), s);
        }
        for &i in members.iter().filter(|&&i| !to_pool[i]) {
            assignment.insert(records[i].image_id.clone(), Stratum::Test);
        }
    }

    let mut split = TrapSplit {
        assignment,
        achieved_train_correlations: Vec::new(),
        achieved_test_correlations: Vec::new(),
    };
    let report = correlation_report(&split, records)?;
    split.achieved_train_correlations = report.train;
    split.achieved_test_correlations = report.test;
    Ok(split)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub train: Vec<PhiEntry>,
    pub val: Vec<PhiEntry>,
    pub test: Vec<PhiEntry>,
}

impl CorrelationReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["artifact", "stratum", "phi", "degenerate"])?;
        for (stratum, rows) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for e in rows.iter() {
                w.write_record([
                    e.artifact.as_str(),
                    stratum,
                    &format!("{:.6}", e.phi),
                    if e.degenerate { "1" } else { "0" },
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Phi of every artifact within each stratum.
pub fn correlation_report(split: &TrapSplit, records: &[SampleRecord]) -> Result<CorrelationReport> {
    let mut by: [Vec<&SampleRecord>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for r in records {
        let s = split.stratum_of(&r.image_id).ok_or_else(|| {
            Error::Precondition(format!("image {:?} is not covered by the split", r.image_id))
        })?;
        by[s as usize].push(r);
    }
    Ok(CorrelationReport {
        train: phi_table(&by[0]),
        val: phi_table(&by[1]),
        test: phi_table(&by[2]),
    })
}

/// Sample metadata CSV: `image_id,label,<artifact columns...>`. Artifact
/// columns that are absent are read as all-zero.
pub fn read_metadata_csv(path: &Path) -> Result<Vec<SampleRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut id_col = None;
    let mut label_col = None;
    let mut artifact_cols = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        match h.trim() {
            "image_id" => id_col = Some(i),
            "label" => label_col = Some(i),
            other => match Artifact::from_name(other) {
                Some(a) => artifact_cols.push((i, a)),
                None => {
                    return Err(Error::Parse {
                        record: 0,
                        message: format!("unknown column {other:?}"),
                    })
                }
            },
        }
    }
    let (id_col, label_col) = match (id_col, label_col) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Parse {
                record: 0,
                message: "header needs image_id and label columns".into(),
            })
        }
    };
    let mut out = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = |message: String| Error::Parse { record: n + 1, message };
        let label = row[label_col].parse::<Label>().map_err(bad)?;
        let mut artifacts = [false; Artifact::COUNT];
        for &(i, a) in &artifact_cols {
            artifacts[a.index()] = match row[i].trim() {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("{} must be 0 or 1, got {other:?}", a.as_str()))),
            };
        }
        out.push(SampleRecord {
            image_id: row[id_col].to_string(),
            label,
            artifacts,
        });
    }
    Ok(out)
}

pub fn write_metadata_csv(records: &[SampleRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["image_id", "label"];
    header.extend(Artifact::ALL.iter().map(|a| a.as_str()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.image_id.clone(), r.label.to_string()];
        row.extend(r.artifacts.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Split assignment CSV: `image_id,stratum`, sorted by id.
pub fn write_split_csv(split: &TrapSplit, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "stratum"])?;
    for (id, s) in &split.assignment {
        w.write_record([id.as_str(), s.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: usize, label: Label, flags: &[Artifact]) -> SampleRecord {
        let mut artifacts = [false; Artifact::COUNT];
        for a in flags {
            artifacts[a.index()] = true;
        }
        SampleRecord {
            image_id: format!("s{id:03}"),
            label,
            artifacts,
        }
    }

    /// 4 melanoma + 4 benign; the ruler agrees with the label on half of each class.
    fn toy_table() -> Vec<SampleRecord> {
        use Artifact::Ruler;
        vec![
            record(0, Label::Melanoma, &[Ruler]),
            record(1, Label::Melanoma, &[]),
            record(2, Label::Melanoma, &[Ruler]),
            record(3, Label::Melanoma, &[]),
            record(4, Label::Benign, &[]),
            record(5, Label::Benign, &[Ruler]),
            record(6, Label::Benign, &[]),
            record(7, Label::Benign, &[Ruler]),
        ]
    }

    fn random_table(n: usize, seed: u64) -> Vec<SampleRecord> {
        random_table_with(n, seed, Artifact::COUNT)
    }

    /// Random labels; the first `planted` artifact columns are present with
    /// probability 0.3, the rest are always absent.
    fn random_table_with(n: usize, seed: u64, planted: usize) -> Vec<SampleRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = if rng.gen_bool(0.5) { Label::Melanoma } else { Label::Benign };
                let mut artifacts = [false; Artifact::COUNT];
                for a in artifacts.iter_mut().take(planted) {
                    *a = rng.gen_bool(0.3);
                }
                SampleRecord { image_id: format!("r{i:05}"), label, artifacts }
            })
            .collect()
    }

    #[test]
    fn toy_table_full_bias() {
        let records = toy_table();
        let spec = TrapSplitSpec::new(1.0, 7).with_fractions(0.5, 0.0, 0.5);
        let split = build_trap_split(&records, &spec).unwrap();
        for r in &records {
            let aligned = r.has(Artifact::Ruler) == r.label.is_positive();
            let expected = if aligned { Stratum::Train } else { Stratum::Test };
            assert_eq!(split.stratum_of(&r.image_id), Some(expected), "{}", r.image_id);
        }
        assert_eq!(split.train_phi(Artifact::Ruler), 1.0);
        assert_eq!(split.test_phi(Artifact::Ruler), -1.0);
        assert!(split.achieved_train_correlations[Artifact::Hair.index()].degenerate);
    }

    #[test]
    fn forty_samples_full_bias_opposes_covered_artifacts() {
        let records = random_table_with(40, 11, 3);
        let spec = TrapSplitSpec::new(1.0, 3);
        let split = build_trap_split(&records, &spec).unwrap();
        let classes = {
            let mut c: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
            for (i, r) in records.iter().enumerate() {
                c[r.label.index()].push(i);
            }
            c
        };
        let quotas = [class_quota(classes[0].len(), &spec), class_quota(classes[1].len(), &spec)];
        let solver = solver_assignment(&records, &classes, &quotas);
        for (i, r) in records.iter().enumerate() {
            let s = split.stratum_of(&r.image_id).unwrap();
            assert_eq!(s != Stratum::Test, solver[i]);
        }
        // Exhaustive check of the ranking: every test sample agrees with the
        // label on no more artifacts than any pool sample of its class.
        let active = active_artifacts(&records);
        for members in &classes {
            let pool_min = members.iter().filter(|&&i| solver[i]).map(|&i| agreement(&records[i], &active)).min().unwrap();
            let test_max = members.iter().filter(|&&i| !solver[i]).map(|&i| agreement(&records[i], &active)).max().unwrap();
            assert!(pool_min >= test_max);
        }
        let active = opposable_artifacts(&records, &classes, &quotas);
        assert!(!active.is_empty());
        for &a in &active {
            let (tr, te) = (split.train_phi(a), split.test_phi(a));
            assert!(tr >= 0.0 && te <= 0.0, "{a:?}: train {tr} test {te}");
        }
        let dominant = active
            .iter()
            .copied()
            .max_by(|&a, &b| split.train_phi(a).total_cmp(&split.train_phi(b)))
            .unwrap();
        assert!(split.train_phi(dominant) > 0.0 && split.test_phi(dominant) < 0.0);
    }

    #[test]
    fn partition_sizes_respect_fractions() {
        let records = random_table(257, 5);
        for bias in [0.0, 0.5, 1.0] {
            let split = build_trap_split(&records, &TrapSplitSpec::new(bias, 1)).unwrap();
            assert_eq!(split.assignment.len(), records.len());
            for label in [Label::Benign, Label::Melanoma] {
                let members: Vec<_> = records.iter().filter(|r| r.label == label).collect();
                let n = members.len() as f64;
                for (stratum, frac) in [(Stratum::Train, 0.6), (Stratum::Val, 0.1), (Stratum::Test, 0.3)] {
                    let count = members.iter().filter(|r| split.stratum_of(&r.image_id) == Some(stratum)).count() as f64;
                    assert!((count - frac * n).abs() <= 1.0, "{label} {stratum:?} {count} vs {}", frac * n);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let records = random_table(120, 2);
        let spec = TrapSplitSpec::new(0.6, 99);
        assert_eq!(build_trap_split(&records, &spec).unwrap(), build_trap_split(&records, &spec).unwrap());
        let other = build_trap_split(&records, &TrapSplitSpec { seed: 100, ..spec }).unwrap();
        assert_ne!(build_trap_split(&records, &spec).unwrap().assignment, other.assignment);
    }

    #[test]
    fn configuration_errors() {
        let records = random_table(60, 4);
        assert!(matches!(
            build_trap_split(&records, &TrapSplitSpec::new(0.5, 0).with_fractions(0.7, 0.3, 0.0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_trap_split(&records, &TrapSplitSpec::new(1.5, 0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_trap_split(&records, &TrapSplitSpec::new(0.5, 0).with_fractions(0.5, 0.1, 0.3)),
            Err(Error::Config(_))
        ));
        let tiny: Vec<_> = toy_table().into_iter().take(5).collect();
        assert!(matches!(build_trap_split(&tiny, &TrapSplitSpec::new(0.5, 0)), Err(Error::Precondition(_))));
        let constant: Vec<_> = toy_table()
            .into_iter()
            .map(|mut r| {
                r.artifacts = [false; Artifact::COUNT];
                r
            })
            .collect();
        assert!(matches!(build_trap_split(&constant, &TrapSplitSpec::new(0.5, 0)), Err(Error::Precondition(_))));
    }

    #[test]
    fn constant_artifact_is_degenerate() {
        let records: Vec<_> = toy_table()
            .into_iter()
            .map(|mut r| {
                r.artifacts[Artifact::Patch.index()] = true;
                r
            })
            .collect();
        let refs: Vec<_> = records.iter().collect();
        let e = phi(&refs, Artifact::Patch);
        assert!(e.degenerate);
        assert_eq!(e.phi, 0.0);
    }

    #[test]
    fn phi_closed_form() {
        // 2x2 table: present&mel=3, present&ben=1, absent&mel=1, absent&ben=3
        let mut records = Vec::new();
        for i in 0..3 {
            records.push(record(i, Label::Melanoma, &[Artifact::Ruler]));
            records.push(record(10 + i, Label::Benign, &[]));
        }
        records.push(record(20, Label::Benign, &[Artifact::Ruler]));
        records.push(record(21, Label::Melanoma, &[]));
        let refs: Vec<_> = records.iter().collect();
        approx::assert_abs_diff_eq!(phi(&refs, Artifact::Ruler).phi, (9.0 - 1.0) / 16.0, epsilon = 1e-12);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = random_table(20, 8);
        let path = dir.path().join("meta.csv");
        write_metadata_csv(&records, &path).unwrap();
        assert_eq!(read_metadata_csv(&path).unwrap(), records);

        let split = build_trap_split(&records, &TrapSplitSpec::new(0.5, 0)).unwrap();
        let out = dir.path().join("split.csv");
        write_split_csv(&split, &out).unwrap();
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 21);
        assert!(text.starts_with("image_id,stratum\n"));
    }

    #[test]
    fn csv_rejects_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.csv");
        std::fs::write(&path, "image_id,label,ruler\na,melanoma,1\nb,carcinoma,0\n").unwrap();
        assert!(matches!(read_metadata_csv(&path), Err(Error::Parse { record: 2, .. })));
        std::fs::write(&path, "image_id,label,ruler\na,melanoma,2\n").unwrap();
        assert!(matches!(read_metadata_csv(&path), Err(Error::Parse { record: 1, .. })));
        std::fs::write(&path, "image_id,label,sticker\n").unwrap();
        assert!(matches!(read_metadata_csv(&path), Err(Error::Parse { record: 0, .. })));
    }
}
