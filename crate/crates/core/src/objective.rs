//! Instance-token combination, batch class centers and the contrastive token
//! regularizer (CTR).
//!
//! With instance tokens `T_i`, labels `y_i` and centers `S_c` of the `C`
//! classes present in the batch:
//!
//! ```text
//! vanilla            (1/N) Σ_i ‖T_i − S_{y_i}‖²
//! hardest            (1/N) Σ_i min_{c≠y_i} ‖T_i − S_c‖²
//! all_hard           (1/(N(C−1))) Σ_i Σ_{c≠y_i} ‖T_i − S_c‖²
//! vanilla_plus_hard  (1/N) Σ_i (‖T_i − S_{y_i}‖² − (1/(C−1)) Σ_{c≠y_i} ‖T_i − S_c‖²)
//! ```
//!
//! Centers are computed from the live tokens, so gradients reach `T_i`
//! through both terms.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::{exact_sum, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    #[default]
    Average,
    Concat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtrVariant {
    #[default]
    Vanilla,
    Hardest,
    AllHard,
    VanillaPlusHard,
}

impl CtrVariant {
    pub fn min_classes(self) -> usize {
        match self {
            CtrVariant::Vanilla => 1,
            _ => 2,
        }
    }
}

/// Column mean of a `d × k` token matrix. Each column is summed with
/// correct rounding, so any row permutation gives the same bits.
pub fn combine_average(tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = tokens.first() else {
        bail!(InvalidArgument, "cannot combine an empty token set");
    };
    let k = first.len();
    if tokens.iter().any(|t| t.len() != k) {
        bail!(InvalidArgument, "token rows differ in length");
    }
    let d = tokens.len() as f64;
    Ok((0..k).map(|c| exact_sum(tokens.iter().map(|t| t[c])) / d).collect())
}

pub fn combine_concat(tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        bail!(InvalidArgument, "cannot combine an empty token set");
    }
    Ok(tokens.concat())
}

/// Graph version of the combination: `[B·d, k]` → `[B, k]` (average) or `[B, d·k]` (concat).
pub fn combine(g: &mut Graph, tokens: Var, batch: usize, d: usize, mode: CombineMode) -> Var {
    match mode {
        CombineMode::Average => g.group_mean(tokens, d),
        CombineMode::Concat => {
            let k = g.shape(tokens)[1];
            g.reshape(tokens, vec![batch, d * k])
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassCenters {
    /// Present class labels, ascending.
    pub classes: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl ClassCenters {
    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .map(|p| self.centers[p].as_slice())
    }
}

/// Present classes in ascending order with their member counts.
fn present_classes(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let counts = classes
        .iter()
        .map(|c| labels.iter().filter(|&&y| y == *c).count())
        .collect();
    (classes, counts)
}

pub fn class_centers(tokens: &[Vec<f64>], labels: &[usize]) -> Result<ClassCenters> {
    if tokens.is_empty() {
        bail!(InvalidArgument, "class centers need a non-empty batch");
    }
    if tokens.len() != labels.len() {
        bail!(InvalidArgument, "{} tokens but {} labels", tokens.len(), labels.len());
    }
    let (classes, counts) = present_classes(labels);
    let centers = classes
        .iter()
        .map(|&c| {
            let members: Vec<Vec<f64>> = tokens
                .iter()
                .zip(labels)
                .filter(|(_, &y)| y == c)
                .map(|(t, _)| t.clone())
                .collect();
            combine_average(&members)
        })
        .collect::<Result<_>>()?;
    Ok(ClassCenters {
        classes,
        centers,
        counts,
    })
}

/// Appends the CTR term for instance tokens `tokens: [N, k]` to the graph.
pub fn ctr_graph(g: &mut Graph, tokens: Var, labels: &[usize], variant: CtrVariant) -> Result<Var> {
    let n = g.shape(tokens)[0];
    if n == 0 || n != labels.len() {
        bail!(InvalidArgument, "{n} instance tokens but {} labels", labels.len());
    }
    let (classes, counts) = present_classes(labels);
    let c = classes.len();
    if c < variant.min_classes() {
        bail!(
            InvalidArgument,
            "{variant:?} needs at least 2 classes in the batch, found {c}"
        );
    }
    let own: Vec<usize> = labels.iter().map(|y| classes.binary_search(y).unwrap()).collect();
    let mut avg = vec![0.0; c * n];
    for (i, &p) in own.iter().enumerate() {
        avg[p * n + i] = 1.0 / counts[p] as f64;
    }
    let avg = g.constant(vec![c, n], avg);
    let centers = g.matmul(avg, tokens);
    let dist = g.pairwise_sq_dist(tokens, centers);

    let inv_n = 1.0 / n as f64;
    let mut w = vec![0.0; n * c];
    match variant {
        CtrVariant::Vanilla => {
            for (i, &p) in own.iter().enumerate() {
                w[i * c + p] = inv_n;
            }
        }
        CtrVariant::Hardest => {
            let dv = g.value(dist);
            for (i, &p) in own.iter().enumerate() {
                let nearest = (0..c)
                    .filter(|&j| j != p)
                    .min_by(|&a, &b| dv[i * c + a].total_cmp(&dv[i * c + b]))
                    .expect("at least two classes");
                w[i * c + nearest] = inv_n;
            }
        }
        CtrVariant::AllHard | CtrVariant::VanillaPlusHard => {
            let sign = if variant == CtrVariant::AllHard { 1.0 } else { -1.0 };
            let off = sign * inv_n / (c - 1) as f64;
            for (i, &p) in own.iter().enumerate() {
                for j in 0..c {
                    w[i * c + j] = if j == p {
                        if variant == CtrVariant::AllHard {
                            0.0
                        } else {
                            inv_n
                        }
                    } else {
                        off
                    };
                }
            }
        }
    }
    Ok(g.weighted_sum(dist, w))
}

/// CTR value for a batch of instance tokens.
pub fn ctr_loss(tokens: &[Vec<f64>], labels: &[usize], variant: CtrVariant) -> Result<f64> {
    if tokens.is_empty() {
        bail!(InvalidArgument, "ctr_loss needs a non-empty batch");
    }
    let t = Tensor::from_rows(tokens)?;
    let mut g = Graph::new();
    let v = g.leaf(&t);
    let out = ctr_graph(&mut g, v, labels, variant)?;
    Ok(g.scalar(out))
}

/// Two pseudo-classes from a regression target: index 0 (class "1") for
/// values strictly above the median, index 1 (class "2") otherwise.
pub fn pseudo_labels_regression(targets: &[f64]) -> Result<Vec<usize>> {
    if targets.len() < 2 {
        bail!(
            InvalidArgument,
            "pseudo-labels need at least 2 targets, got {}",
            targets.len()
        );
    }
    if targets.iter().any(|t| t.is_nan()) {
        bail!(Numeric, "NaN regression target");
    }
    let mut sorted = targets.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
    };
    Ok(targets.iter().map(|&t| if t > median { 0 } else { 1 }).collect())
}

/// Supervision for the task loss.
#[derive(Clone, Copy, Debug)]
pub enum TaskTarget<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

/// Cross-entropy for classes, mean squared error for values.
pub fn task_loss(g: &mut Graph, output: Var, target: TaskTarget<'_>) -> Result<Var> {
    let rows = g.shape(output)[0];
    match target {
        TaskTarget::Classes(y) => {
            if y.len() != rows {
                bail!(Contract, "{rows} outputs but {} labels", y.len());
            }
            let c = g.shape(output)[1];
            if let Some(bad) = y.iter().find(|&&v| v >= c) {
                bail!(Contract, "label {bad} out of {c} outputs");
            }
            Ok(g.cross_entropy(output, y))
        }
        TaskTarget::Values(t) => {
            if g.value(output).len() != t.len() {
                bail!(Contract, "{} outputs but {} targets", g.value(output).len(), t.len());
            }
            Ok(g.mse(output, t))
        }
    }
}

/// `task_loss + β·CTR`. With `β = 0` the CTR term is not built at all.
pub fn training_objective(
    g: &mut Graph,
    output: Var,
    target: TaskTarget<'_>,
    instance_tokens: Var,
    ctr_labels: &[usize],
    beta: f64,
    variant: CtrVariant,
) -> Result<Var> {
    if !(beta >= 0.0 && beta.is_finite()) {
        bail!(InvalidArgument, "beta must be finite and non-negative, got {beta}");
    }
    let loss = task_loss(g, output, target)?;
    if beta == 0.0 {
        return Ok(loss);
    }
    let ctr = ctr_graph(g, instance_tokens, ctr_labels, variant)?;
    let weighted = g.scale(ctr, beta);
    Ok(g.add(loss, weighted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combination_examples() {
        let t = vec![vec![1.0, 3.0], vec![3.0, 1.0]];
        assert_eq!(combine_average(&t).unwrap(), vec![2.0, 2.0]);
        assert_eq!(combine_concat(&t).unwrap(), vec![1.0, 3.0, 3.0, 1.0]);
        let swapped = vec![t[1].clone(), t[0].clone()];
        assert_ne!(combine_concat(&swapped).unwrap(), combine_concat(&t).unwrap());
        assert_eq!(combine_average(&[vec![0.3, -7.0]]).unwrap(), vec![0.3, -7.0]);
        assert!(combine_average(&[]).is_err());
        assert_eq!(
            combine_concat(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn centers() {
        let c = class_centers(&[vec![0.0, 0.0], vec![2.0, 2.0]], &[0, 0]).unwrap();
        assert_eq!(c.get(0).unwrap(), &[1.0, 1.0]);
        let c = class_centers(&[vec![0.0, 1.0], vec![2.0, 2.0], vec![4.0, 0.0]], &[3, 1, 3]).unwrap();
        assert_eq!(c.classes, vec![1, 3]);
        assert_eq!(c.counts, vec![1, 2]);
        assert_eq!(c.get(1).unwrap(), &[2.0, 2.0]);
        assert_eq!(c.get(3).unwrap(), &[2.0, 0.5]);
    }

    #[test]
    fn ctr_examples() {
        let same = [vec![0.0, 0.0], vec![2.0, 2.0]];
        assert_eq!(ctr_loss(&same, &[0, 0], CtrVariant::Vanilla).unwrap(), 2.0);
        let apart = [vec![0.0, 0.0], vec![4.0, 0.0]];
        assert_eq!(ctr_loss(&apart, &[0, 1], CtrVariant::Vanilla).unwrap(), 0.0);
        assert_eq!(ctr_loss(&apart, &[0, 1], CtrVariant::Hardest).unwrap(), 16.0);
        assert_eq!(ctr_loss(&apart, &[0, 1], CtrVariant::AllHard).unwrap(), 16.0);
        assert_eq!(ctr_loss(&apart, &[0, 1], CtrVariant::VanillaPlusHard).unwrap(), -16.0);
        assert!(ctr_loss(&same, &[0, 0], CtrVariant::Hardest).is_err());
        assert!(ctr_loss(&same, &[0, 0], CtrVariant::AllHard).is_err());
    }

    #[test]
    fn pseudo_labels() {
        assert_eq!(pseudo_labels_regression(&[0.1, 0.5, 0.9]).unwrap(), vec![1, 1, 0]);
        assert_eq!(pseudo_labels_regression(&[3.0; 4]).unwrap(), vec![1; 4]);
        assert_eq!(
            pseudo_labels_regression(&[1.0, 2.0, 3.0, 4.0]).unwrap(),
            vec![1, 1, 0, 0]
        );
        assert!(pseudo_labels_regression(&[1.0]).is_err());
    }

    #[test]
    fn objective_composition() {
        let mut g = Graph::new();
        let logits = g.constant(vec![2, 2], vec![0.3, -0.2, 1.0, 0.5]);
        let tokens = g.constant(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]);
        let bare = task_loss(&mut g, logits, TaskTarget::Classes(&[0, 1])).unwrap();
        let zero = training_objective(
            &mut g,
            logits,
            TaskTarget::Classes(&[0, 1]),
            tokens,
            &[0, 0],
            0.0,
            CtrVariant::Vanilla,
        )
        .unwrap();
        assert_eq!(g.scalar(zero), g.scalar(bare));
        let one = training_objective(
            &mut g,
            logits,
            TaskTarget::Classes(&[0, 1]),
            tokens,
            &[0, 0],
            1.0,
            CtrVariant::Vanilla,
        )
        .unwrap();
        assert!((g.scalar(one) - (g.scalar(bare) + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_and_zero_ctr() {
        let mut g = Graph::new();
        let pred = g.constant(vec![2, 1], vec![1.5, -0.5]);
        let tokens = g.constant(vec![2, 1], vec![0.0, 3.0]);
        let obj = training_objective(
            &mut g,
            pred,
            TaskTarget::Values(&[1.5, -0.5]),
            tokens,
            &[0, 1],
            1.0,
            CtrVariant::Vanilla,
        )
        .unwrap();
        assert_eq!(g.scalar(obj), 0.0);
    }
}
