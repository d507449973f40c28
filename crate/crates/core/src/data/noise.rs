use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::preprocess::ColumnStats;
use super::table::{Cell, DatasetTable};
use crate::error::{bail, Result};

/// Adds `Normal(0, ratio·σ_j)` to every observed numerical cell, where `σ_j`
/// is the column's population std. Categorical columns are an error unless
/// `skip_categorical` is set; missing cells stay missing.
pub fn add_gaussian_noise(table: &DatasetTable, ratio: f64, seed: u64, skip_categorical: bool) -> Result<DatasetTable> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        bail!(
            InvalidArgument,
            "noise ratio must be finite and non-negative, got {ratio}"
        );
    }
    if !skip_categorical {
        if let Some(f) = table.schema.iter().find(|f| !f.is_numerical()) {
            bail!(
                InvalidArgument,
                "feature '{}' is categorical; noise applies to numerical features",
                f.name
            );
        }
    }
    let mut out = table.clone();
    if ratio == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (j, spec) in table.schema.iter().enumerate() {
        if !spec.is_numerical() {
            continue;
        }
        let present: Vec<f64> = table
            .rows
            .iter()
            .filter_map(|r| match r[j] {
                Cell::Num(x) => Some(x),
                _ => None,
            })
            .collect();
        let Some(stats) = ColumnStats::fit(&present) else {
            continue;
        };
        let normal = Normal::new(0.0, ratio * stats.std)
            .map_err(|e| crate::Error::InvalidArgument(format!("noise distribution: {e}")))?;
        for row in &mut out.rows {
            if let Cell::Num(x) = &mut row[j] {
                *x += normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::table::{FeatureSpec, Labels, TaskKind};

    fn alternating(n: usize) -> DatasetTable {
        // values ±2 → population std 2
        DatasetTable::new(
            vec![FeatureSpec::numerical("a")],
            (0..n)
                .map(|i| vec![Cell::Num(if i % 2 == 0 { 2.0 } else { -2.0 })])
                .collect(),
            Labels::Class((0..n).map(|i| i % 2).collect()),
            TaskKind::Binary,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let t = alternating(10);
        assert_eq!(add_gaussian_noise(&t, 0.0, 1, false).unwrap(), t);
    }

    #[test]
    fn noise_scale_follows_column_std() {
        let n = 100_000;
        let t = alternating(n);
        let noisy = add_gaussian_noise(&t, 0.1, 5, false).unwrap();
        let deltas: Vec<f64> = noisy
            .rows
            .iter()
            .zip(&t.rows)
            .map(|(a, b)| match (a[0], b[0]) {
                (Cell::Num(x), Cell::Num(y)) => x - y,
                _ => unreachable!(),
            })
            .collect();
        let sd = ColumnStats::fit(&deltas).unwrap().std;
        assert!((sd - 0.2).abs() / 0.2 < 0.02, "noise std {sd}");
    }

    #[test]
    fn categorical_requires_skip() {
        let t = DatasetTable::new(
            vec![FeatureSpec::categorical("c", ["x", "y"])],
            vec![vec![Cell::Cat(0)], vec![Cell::Cat(1)]],
            Labels::Class(vec![0, 1]),
            TaskKind::Binary,
            vec![],
        )
        .unwrap();
        assert!(add_gaussian_noise(&t, 0.1, 0, false).is_err());
        assert_eq!(add_gaussian_noise(&t, 0.1, 0, true).unwrap(), t);
    }
}
