use serde::{Deserialize, Serialize};

use super::table::{Cell, DatasetTable, Labels};
use crate::error::{bail, Result};
use crate::numerics::exact_sum;

/// Standard deviations are floored here so constant columns map to zero.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    /// Mean and population std of `values`.
    pub fn fit(values: &[f64]) -> Option<Self> {
        Self::fit_filled(values, 0)
    }

    /// Statistics of `observed` after `missing` extra cells are filled with
    /// the observed mean: the mean is unchanged, the variance shrinks.
    pub fn fit_filled(observed: &[f64], missing: usize) -> Option<Self> {
        if observed.is_empty() {
            return None;
        }
        let mean = exact_sum(observed.iter().copied()) / observed.len() as f64;
        let n = (observed.len() + missing) as f64;
        let var = exact_sum(observed.iter().map(|x| (x - mean) * (x - mean))) / n;
        Some(Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        })
    }

    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn restore(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Per-feature statistics (`None` for categorical features) and, for
/// regression, target statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub features: Vec<Option<ColumnStats>>,
    pub target: Option<ColumnStats>,
}

impl PreprocessStats {
    pub fn fit(train: &DatasetTable) -> Result<Self> {
        let mut features = Vec::with_capacity(train.n_features());
        for (j, spec) in train.schema.iter().enumerate() {
            if !spec.is_numerical() {
                features.push(None);
                continue;
            }
            let present: Vec<f64> = train
                .rows
                .iter()
                .filter_map(|r| match r[j] {
                    Cell::Num(x) => Some(x),
                    _ => None,
                })
                .collect();
            if present.iter().any(|x| !x.is_finite()) {
                bail!(Data, "numerical column '{}' contains non-finite values", spec.name);
            }
            match ColumnStats::fit_filled(&present, train.n_rows() - present.len()) {
                Some(s) => features.push(Some(s)),
                None => bail!(Data, "numerical column '{}' has no observed training values", spec.name),
            }
        }
        let target = match &train.labels {
            Labels::Target(v) => ColumnStats::fit(v),
            Labels::Class(_) => None,
        };
        Ok(Self { features, target })
    }

    /// Fills missing numerical cells with the training mean, then standardizes.
    pub fn apply(&self, table: &DatasetTable) -> Result<DatasetTable> {
        if table.n_features() != self.features.len() {
            bail!(
                Schema,
                "table has {} features, statistics cover {}",
                table.n_features(),
                self.features.len()
            );
        }
        let mut out = table.clone();
        for row in &mut out.rows {
            for (j, cell) in row.iter_mut().enumerate() {
                match (self.features[j], *cell) {
                    (Some(s), Cell::Num(x)) => *cell = Cell::Num(s.standardize(x)),
                    (Some(s), Cell::Missing) => *cell = Cell::Num(s.standardize(s.mean)),
                    (None, Cell::Cat(_)) => {}
                    (None, Cell::Missing) => {
                        bail!(
                            Data,
                            "categorical feature '{}' has a missing cell",
                            table.schema[j].name
                        )
                    }
                    _ => bail!(
                        Schema,
                        "feature '{}' does not match the fitted kind",
                        table.schema[j].name
                    ),
                }
            }
        }
        if let (Some(s), Labels::Target(v)) = (self.target, &mut out.labels) {
            v.iter_mut().for_each(|y| *y = s.standardize(*y));
        }
        Ok(out)
    }

    /// Maps standardized regression outputs back to the original scale.
    pub fn restore_target(&self, z: f64) -> f64 {
        self.target.map_or(z, |s| s.restore(z))
    }
}

/// Fits statistics on `train` and applies them to `train` and every table in `others`.
pub fn preprocess(
    train: &DatasetTable,
    others: &[&DatasetTable],
) -> Result<(DatasetTable, Vec<DatasetTable>, PreprocessStats)> {
    for other in others {
        if other.schema != train.schema {
            bail!(Schema, "preprocess requires one shared schema");
        }
    }
    let stats = PreprocessStats::fit(train)?;
    let train_out = stats.apply(train)?;
    let others_out = others.iter().map(|t| stats.apply(t)).collect::<Result<_>>()?;
    Ok((train_out, others_out, stats))
}
