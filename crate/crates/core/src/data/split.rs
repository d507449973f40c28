//! Instance and feature splits for transfer experiments.
//!
//! Pretrain tables list their features as `[pretrain-only…, overlap…]` and
//! downstream tables as `[overlap…, downstream-only…]`, so the last `s`
//! pretrain features line up with the first `s` downstream features.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::table::DatasetTable;
use crate::error::{bail, Error, Result};

pub const TEST_FRACTION: f64 = 0.2;
pub const VALIDATION_FRACTION: f64 = 0.2;
pub const PRETRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapLevel {
    Low,
    Medium,
    High,
}

impl OverlapLevel {
    fn ratio(self) -> f64 {
        match self {
            OverlapLevel::Low => 0.33,
            OverlapLevel::Medium => 0.5,
            OverlapLevel::High => 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureCounts {
    /// Pretrain feature count.
    pub d: usize,
    /// Downstream feature count.
    pub d_t: usize,
    /// Shared feature count.
    pub s: usize,
}

/// Preset (d, d_t, s) triples, looked up by lowercase dataset name.
pub fn preset_counts(dataset: &str, level: OverlapLevel) -> Option<FeatureCounts> {
    use OverlapLevel::*;
    let c = |d, d_t, s| Some(FeatureCounts { d, d_t, s });
    match (dataset.to_ascii_lowercase().as_str(), level) {
        ("higgs", Low) => c(17, 17, 6),
        ("higgs", Medium) => c(18, 18, 8),
        ("higgs", High) => c(20, 20, 12),
        ("eye", Low) => c(16, 15, 5),
        ("eye", Medium) => c(17, 17, 8),
        ("eye", High) => c(19, 18, 11),
        ("jannis", Low) => c(34, 34, 14),
        ("jannis", Medium) => c(36, 36, 18),
        ("jannis", High) => c(38, 38, 22),
        ("colon", Medium) => c(13, 12, 7),
        ("clave", Medium) => c(11, 10, 5),
        ("cardio", Medium) => c(7, 7, 3),
        ("htru", Medium) => c(6, 5, 3),
        ("breast", Medium) => c(20, 19, 10),
        ("ailerons", Medium) => c(26, 26, 12),
        ("elevators", Medium) => c(12, 12, 6),
        ("super", Medium) => c(54, 54, 27),
        ("volume", Medium) => c(35, 35, 17),
        _ => None,
    }
}

/// Counts for a table of `total` features that uses every feature:
/// `s = ⌈r·d_t⌉`, `d = total − d_t + s`, with `d_t` chosen to balance `d`
/// and `d_t` (ties prefer `d ≥ d_t`).
pub fn generic_counts(total: usize, level: OverlapLevel) -> Result<FeatureCounts> {
    if total < 2 {
        bail!(
            InvalidArgument,
            "a transfer split needs at least 2 features, got {total}"
        );
    }
    let r = level.ratio();
    let mut best: Option<(usize, bool, FeatureCounts)> = None;
    for d_t in 1..=total {
        let s = ((r * d_t as f64).ceil() as usize).clamp(1, d_t);
        let d = total - d_t + s;
        let key = (d.abs_diff(d_t), d < d_t);
        if best.is_none_or(|(gap, below, _)| key < (gap, below)) {
            best = Some((key.0, key.1, FeatureCounts { d, d_t, s }));
        }
    }
    Ok(best.expect("total >= 2").2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapRequest {
    Level {
        level: OverlapLevel,
        #[serde(default)]
        dataset: Option<String>,
    },
    Counts(FeatureCounts),
    /// Original column indices, in the order they appear in each table.
    Explicit {
        pretrain: Vec<usize>,
        downstream: Vec<usize>,
    },
}

/// Pairs of (downstream index, pretrain index) for shared features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapMap {
    pub pairs: Vec<(usize, usize)>,
    pub d: usize,
    pub d_t: usize,
}

impl OverlapMap {
    pub fn new(pairs: Vec<(usize, usize)>, d: usize, d_t: usize) -> Result<Self> {
        let mut down: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut pre: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        down.sort_unstable();
        pre.sort_unstable();
        let unique = |v: &[usize]| v.windows(2).all(|w| w[0] != w[1]);
        if !unique(&down) || !unique(&pre) {
            bail!(InvalidArgument, "overlap indices must be unique on both sides");
        }
        if down.last().is_some_and(|&i| i >= d_t) || pre.last().is_some_and(|&i| i >= d) {
            bail!(InvalidArgument, "overlap index out of range for d={d}, d_t={d_t}");
        }
        Ok(Self { pairs, d, d_t })
    }

    /// Pairs features with equal names.
    pub fn by_name(pretrain: &[String], downstream: &[String]) -> Result<Self> {
        let pairs = downstream
            .iter()
            .enumerate()
            .filter_map(|(i, n)| pretrain.iter().position(|p| p == n).map(|j| (i, j)))
            .collect();
        Self::new(pairs, pretrain.len(), downstream.len())
    }

    pub fn s(&self) -> usize {
        self.pairs.len()
    }

    pub fn ratio(&self) -> f64 {
        self.s() as f64 / self.d_t as f64
    }

    pub fn pretrain_index(&self, downstream: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == downstream).map(|p| p.1)
    }
}

/// Everything needed to rebuild a split from the full table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub pretrain_features: Vec<usize>,
    pub downstream_features: Vec<usize>,
    pub pretrain_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
    pub pool_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

impl SplitManifest {
    pub fn plan(full: &DatasetTable, request: &OverlapRequest, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = full.n_features();
        let (pretrain_features, downstream_features) = match request {
            OverlapRequest::Explicit { pretrain, downstream } => (pretrain.clone(), downstream.clone()),
            OverlapRequest::Level { level, dataset } => {
                let counts = match dataset.as_deref().and_then(|name| preset_counts(name, *level)) {
                    Some(c) => c,
                    None => generic_counts(total, *level)?,
                };
                choose_features(total, counts, &mut rng)?
            }
            OverlapRequest::Counts(counts) => choose_features(total, *counts, &mut rng)?,
        };

        let n = full.n_rows();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let n_test = (TEST_FRACTION * n as f64).round() as usize;
        let rest = n - n_test;
        let n_val = (VALIDATION_FRACTION * rest as f64).round() as usize;
        let train = rest - n_val;
        let n_pre = (PRETRAIN_FRACTION * train as f64).round() as usize;
        let mut take = |k: usize| -> Vec<usize> {
            let mut part: Vec<usize> = order.drain(..k).collect();
            part.sort_unstable();
            part
        };
        let manifest = Self {
            seed,
            pretrain_features,
            downstream_features,
            test_rows: take(n_test),
            validation_rows: take(n_val),
            pretrain_rows: take(n_pre),
            pool_rows: take(train - n_pre),
        };
        manifest.check(full)?;
        Ok(manifest)
    }

    pub fn check(&self, full: &DatasetTable) -> Result<()> {
        let total = full.n_features();
        for list in [&self.pretrain_features, &self.downstream_features] {
            if list.is_empty() {
                bail!(InvalidArgument, "feature lists must be non-empty");
            }
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != list.len() || sorted.last().is_some_and(|&j| j >= total) {
                bail!(InvalidArgument, "feature lists must be unique indices below {total}");
            }
        }
        let mut rows: Vec<usize> = [
            &self.pretrain_rows,
            &self.validation_rows,
            &self.pool_rows,
            &self.test_rows,
        ]
        .into_iter()
        .flatten()
        .copied()
        .collect();
        rows.sort_unstable();
        if rows != (0..full.n_rows()).collect::<Vec<_>>() {
            bail!(
                InvalidArgument,
                "row lists must partition the {} table rows",
                full.n_rows()
            );
        }
        if self.pretrain_rows.is_empty() || self.test_rows.is_empty() || self.pool_rows.is_empty() {
            bail!(Data, "table with {} rows is too small to split", full.n_rows());
        }
        Ok(())
    }

    pub fn overlap(&self) -> Result<OverlapMap> {
        let pairs = self
            .downstream_features
            .iter()
            .enumerate()
            .filter_map(|(i, f)| self.pretrain_features.iter().position(|p| p == f).map(|j| (i, j)))
            .collect();
        OverlapMap::new(pairs, self.pretrain_features.len(), self.downstream_features.len())
    }

    pub fn apply(&self, full: &DatasetTable) -> Result<TransferSplit> {
        self.check(full)?;
        let pre = full.select_features(&self.pretrain_features);
        let down = full.select_features(&self.downstream_features);
        Ok(TransferSplit {
            pretrain: pre.select_rows(&self.pretrain_rows),
            validation: pre.select_rows(&self.validation_rows),
            downstream_pool: down.select_rows(&self.pool_rows),
            test: down.select_rows(&self.test_rows),
            overlap: self.overlap()?,
            manifest: self.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn choose_features(total: usize, c: FeatureCounts, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if c.s > c.d.min(c.d_t) {
        bail!(
            InvalidArgument,
            "overlap s={} exceeds min(d={}, d_t={})",
            c.s,
            c.d,
            c.d_t
        );
    }
    if c.d == 0 || c.d_t == 0 {
        bail!(InvalidArgument, "d and d_t must be positive");
    }
    let needed = c.d + c.d_t - c.s;
    if needed > total {
        bail!(
            InvalidArgument,
            "split needs {needed} distinct features, table has {total}"
        );
    }
    let mut perm: Vec<usize> = (0..total).collect();
    perm.shuffle(rng);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let shared = sorted(&perm[..c.s]);
    let pre_only = sorted(&perm[c.s..c.d]);
    let down_only = sorted(&perm[c.d..needed]);
    let pretrain = pre_only.iter().chain(&shared).copied().collect();
    let downstream = shared.iter().chain(&down_only).copied().collect();
    Ok((pretrain, downstream))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferSplit {
    pub pretrain: DatasetTable,
    pub validation: DatasetTable,
    pub downstream_pool: DatasetTable,
    pub test: DatasetTable,
    pub overlap: OverlapMap,
    pub manifest: SplitManifest,
}

pub fn make_transfer_split(full: &DatasetTable, request: &OverlapRequest, seed: u64) -> Result<TransferSplit> {
    SplitManifest::plan(full, request, seed)?.apply(full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::table::{Cell, FeatureSpec, Labels, TaskKind};

    fn numeric_table(rows: usize, features: usize) -> DatasetTable {
        DatasetTable::new(
            (0..features).map(|j| FeatureSpec::numerical(format!("f{j}"))).collect(),
            (0..rows)
                .map(|i| (0..features).map(|j| Cell::Num((i * features + j) as f64)).collect())
                .collect(),
            Labels::Class((0..rows).map(|i| i % 2).collect()),
            TaskKind::Binary,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn dataset_presets() {
        let eye = |l| preset_counts("Eye", l).unwrap();
        assert_eq!(eye(OverlapLevel::Medium), FeatureCounts { d: 17, d_t: 17, s: 8 });
        let ratios: Vec<u32> = [OverlapLevel::Low, OverlapLevel::Medium, OverlapLevel::High]
            .into_iter()
            .map(|l| (100.0 * eye(l).s as f64 / eye(l).d_t as f64).round() as u32)
            .collect();
        assert_eq!(ratios, [33, 47, 61]);
        for l in [OverlapLevel::Low, OverlapLevel::Medium, OverlapLevel::High] {
            let c = eye(l);
            assert_eq!(c.d + c.d_t - c.s, 26);
            let h = preset_counts("higgs", l).unwrap();
            assert_eq!(h.d + h.d_t - h.s, 28);
        }
        assert!(preset_counts("higgs_small", OverlapLevel::Medium).is_none());
    }

    #[test]
    fn generic_counts_balance() {
        assert_eq!(
            generic_counts(6, OverlapLevel::Medium).unwrap(),
            FeatureCounts { d: 4, d_t: 4, s: 2 }
        );
        for total in 2..60 {
            for level in [OverlapLevel::Low, OverlapLevel::Medium, OverlapLevel::High] {
                let c = generic_counts(total, level).unwrap();
                assert_eq!(c.d + c.d_t - c.s, total);
                assert!(c.s >= 1 && c.s <= c.d.min(c.d_t));
            }
        }
    }

    #[test]
    fn full_overlap_gives_identical_feature_sets() {
        let t = numeric_table(50, 6);
        let split = make_transfer_split(&t, &OverlapRequest::Counts(FeatureCounts { d: 6, d_t: 6, s: 6 }), 3).unwrap();
        assert_eq!(split.pretrain.schema, split.test.schema);
        assert_eq!(split.overlap.s(), 6);
    }

    #[test]
    fn instance_fractions() {
        let t = numeric_table(100, 6);
        let m = SplitManifest::plan(&t, &OverlapRequest::Counts(FeatureCounts { d: 4, d_t: 4, s: 2 }), 1).unwrap();
        assert_eq!(m.test_rows.len(), 20);
        assert_eq!(m.validation_rows.len(), 16);
        assert_eq!(m.pretrain_rows.len(), 51);
        assert_eq!(m.pool_rows.len(), 13);
    }

    #[test]
    fn overlap_too_large_is_rejected() {
        let t = numeric_table(30, 6);
        let req = OverlapRequest::Counts(FeatureCounts { d: 3, d_t: 4, s: 4 });
        assert!(make_transfer_split(&t, &req, 0).is_err());
    }

    #[test]
    fn shared_features_line_up() {
        let t = numeric_table(40, 10);
        let split = make_transfer_split(&t, &OverlapRequest::Counts(FeatureCounts { d: 6, d_t: 5, s: 3 }), 9).unwrap();
        let o = &split.overlap;
        assert_eq!(o.pairs, vec![(0, 3), (1, 4), (2, 5)]);
        for &(i, j) in &o.pairs {
            assert_eq!(split.test.schema[i], split.pretrain.schema[j]);
        }
    }
}
