use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{bail, Result};
use crate::numerics::exact_sum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Rmse,
}

impl MetricKind {
    pub fn for_task(task: &TaskKind) -> Self {
        if task.is_regression() {
            MetricKind::Rmse
        } else {
            MetricKind::Accuracy
        }
    }

    pub fn higher_is_better(self) -> bool {
        self == MetricKind::Accuracy
    }
}

/// Fraction of predicted class indices equal to the labels.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Root mean squared error.
pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_lengths(preds.len(), targets.len())?;
    let sq = exact_sum(preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)));
    Ok((sq / preds.len() as f64).sqrt())
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        bail!(InvalidArgument, "{a} predictions for {b} labels");
    }
    if a == 0 {
        bail!(InvalidArgument, "metric of an empty prediction set");
    }
    Ok(())
}

/// Mean and population standard deviation, both from correctly rounded sums.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        bail!(InvalidArgument, "mean of no values");
    }
    let n = values.len() as f64;
    let mean = exact_sum(values.iter().copied()) / n;
    let var = exact_sum(values.iter().map(|v| (v - mean) * (v - mean))) / n;
    Ok((mean, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(accuracy(&[1, 1, 0, 0], &[1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spread() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert_eq!((m, s), (5.0, 2.0));
        let (a, _) = mean_std(&[0.1, 0.2, 0.3]).unwrap();
        let (b, _) = mean_std(&[0.3, 0.1, 0.2]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
