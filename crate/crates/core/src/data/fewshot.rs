use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::table::DatasetTable;
use crate::error::{bail, Result};

/// Row indices of a few-shot sample: `shots` rows per class (class-major
/// order) for classification, `shots` rows in total for regression.
pub fn few_shot_indices(pool: &DatasetTable, shots: usize, seed: u64) -> Result<Vec<usize>> {
    if shots == 0 {
        bail!(InvalidArgument, "shots must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match pool.rows_by_class() {
        Some(by_class) => {
            let mut picked = Vec::with_capacity(shots * by_class.len());
            for (c, mut rows) in by_class.into_iter().enumerate() {
                if rows.len() < shots {
                    bail!(Data, "class {c} has {} rows in the pool, {shots} requested", rows.len());
                }
                rows.shuffle(&mut rng);
                picked.extend_from_slice(&rows[..shots]);
            }
            Ok(picked)
        }
        None => {
            if pool.n_rows() < shots {
                bail!(Data, "pool has {} rows, {shots} requested", pool.n_rows());
            }
            let mut rows: Vec<usize> = (0..pool.n_rows()).collect();
            rows.shuffle(&mut rng);
            rows.truncate(shots);
            Ok(rows)
        }
    }
}

pub fn sample_few_shot(pool: &DatasetTable, shots: usize, seed: u64) -> Result<DatasetTable> {
    Ok(pool.select_rows(&few_shot_indices(pool, shots, seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::table::{Cell, FeatureSpec, Labels, TaskKind};

    fn pool(labels: Labels, task: TaskKind) -> DatasetTable {
        let n = labels.len();
        DatasetTable::new(
            vec![FeatureSpec::numerical("a")],
            (0..n).map(|i| vec![Cell::Num(i as f64)]).collect(),
            labels,
            task,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn class_balanced_counts() {
        let p = pool(
            Labels::Class((0..60).map(|i| i % 3).collect()),
            TaskKind::for_classes(3),
        );
        let s = sample_few_shot(&p, 5, 1).unwrap();
        assert_eq!(s.n_rows(), 15);
        assert!(s.rows_by_class().unwrap().iter().all(|r| r.len() == 5));
        let b = pool(Labels::Class((0..10).map(|i| i % 2).collect()), TaskKind::Binary);
        assert_eq!(sample_few_shot(&b, 1, 0).unwrap().n_rows(), 2);
    }

    #[test]
    fn regression_takes_shots_rows() {
        let p = pool(Labels::Target((0..20).map(f64::from).collect()), TaskKind::Regression);
        assert_eq!(sample_few_shot(&p, 5, 4).unwrap().n_rows(), 5);
    }

    #[test]
    fn reproducible_and_checked() {
        let p = pool(Labels::Class((0..40).map(|i| i % 2).collect()), TaskKind::Binary);
        assert_eq!(few_shot_indices(&p, 3, 7).unwrap(), few_shot_indices(&p, 3, 7).unwrap());
        assert!(few_shot_indices(&p, 21, 7).is_err());
        assert!(few_shot_indices(&p, 0, 7).is_err());
    }
}
