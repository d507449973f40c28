use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Cell, DatasetTable, Labels};
use crate::error::{bail, Result};
use crate::models::Mode;
use crate::numerics::{exact_mean, AdamW, Graph, Var};
use crate::objective::{pseudo_labels_regression, training_objective, CtrVariant, TaskTarget};

use super::config::StageConfig;
use super::network::{BatchForward, Network};

/// Task targets plus the labels the contrastive term groups by. Regression
/// targets use median pseudo-labels over the whole training table.
#[derive(Clone, Debug)]
pub struct Supervision {
    pub labels: Labels,
    pub ctr_labels: Vec<usize>,
}

impl Supervision {
    pub fn from_table(table: &DatasetTable) -> Result<Self> {
        let ctr_labels = match &table.labels {
            Labels::Class(y) => y.clone(),
            Labels::Target(t) if t.len() >= 2 => pseudo_labels_regression(t)?,
            Labels::Target(t) => vec![1; t.len()],
        };
        Ok(Self {
            labels: table.labels.clone(),
            ctr_labels,
        })
    }
}

/// Objective and validation settings for one call to [`train`].
#[derive(Clone, Copy, Debug)]
pub struct TrainSpec<'a> {
    pub stage: &'a StageConfig,
    pub beta: f64,
    pub variant: CtrVariant,
    /// Keeps the epoch with the best score on this table.
    pub validation: Option<&'a DatasetTable>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training objective of each epoch, as seen by the optimizer.
    pub epoch_objective: Vec<f64>,
    /// Validation score after each epoch (accuracy, or negative RMSE).
    pub validation_score: Vec<f64>,
    /// Epoch whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    /// Eval-mode objective over the training table before and after training.
    pub initial_objective: f64,
    pub final_objective: f64,
    pub skipped_batches: usize,
}

/// Accuracy for classification, negative RMSE (model scale) for regression.
pub fn score(net: &Network, table: &DatasetTable, jobs: usize) -> Result<f64> {
    let out = net.predict(table, jobs)?;
    let width = net.out_dim();
    match &table.labels {
        Labels::Class(y) => {
            let hits = out
                .chunks(width)
                .zip(y)
                .filter(|(row, &label)| argmax(row) == label)
                .count();
            Ok(hits as f64 / y.len().max(1) as f64)
        }
        Labels::Target(t) => {
            let sq: Vec<f64> = out.iter().zip(t).map(|(p, y)| (p - y) * (p - y)).collect();
            Ok(-exact_mean(&sq).unwrap_or(0.0).sqrt())
        }
    }
}

/// Index of the largest value; ties go to the first.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn batch_objective(
    net: &Network,
    g: &mut Graph,
    rows: &[&[Cell]],
    idx: &[usize],
    sup: &Supervision,
    beta: f64,
    variant: CtrVariant,
    mode: &mut Mode<'_>,
) -> Result<(Var, BatchForward)> {
    let f = net.forward_rows(g, rows, mode)?;
    let ctr: Vec<usize> = idx.iter().map(|&i| sup.ctr_labels[i]).collect();
    let mut present = ctr.clone();
    present.sort_unstable();
    present.dedup();
    let beta = if present.len() < variant.min_classes() {
        0.0
    } else {
        beta
    };
    let instance = g.group_mean(f.tokens, net.tokenizer.n_features());
    let obj = match &sup.labels {
        Labels::Class(y) => {
            let y: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            training_objective(
                g,
                f.forward.output,
                TaskTarget::Classes(&y),
                instance,
                &ctr,
                beta,
                variant,
            )?
        }
        Labels::Target(t) => {
            let t: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            training_objective(
                g,
                f.forward.output,
                TaskTarget::Values(&t),
                instance,
                &ctr,
                beta,
                variant,
            )?
        }
    };
    Ok((obj, f))
}

/// Eval-mode objective averaged over batches of `batch_size` rows.
pub fn objective_value(
    net: &Network,
    table: &DatasetTable,
    batch_size: usize,
    beta: f64,
    variant: CtrVariant,
) -> Result<f64> {
    let sup = Supervision::from_table(table)?;
    let order: Vec<usize> = (0..table.n_rows()).collect();
    let mut values = Vec::new();
    for idx in order.chunks(batch_size.max(1)) {
        let rows: Vec<&[Cell]> = idx.iter().map(|&i| table.rows[i].as_slice()).collect();
        let mut g = Graph::new();
        let (obj, _) = batch_objective(net, &mut g, &rows, idx, &sup, beta, variant, &mut Mode::Eval)?;
        values.push(g.scalar(obj));
    }
    Ok(exact_mean(&values).unwrap_or(0.0))
}

/// Mini-batch AdamW over `table`, reshuffled each epoch from `seed`.
pub fn train(net: &mut Network, table: &DatasetTable, spec: &TrainSpec<'_>, seed: u64) -> Result<TrainLog> {
    net.tokenizer.check_schema(&table.schema)?;
    let n = table.n_rows();
    if n == 0 {
        bail!(Data, "cannot train on an empty table");
    }
    let needs_pairs = !net.model.batch_norm_states().is_empty();
    if needs_pairs && n < 2 {
        bail!(Data, "batch-norm models need at least 2 training rows");
    }
    let batch_size = spec.stage.batch_size.min(n).max(1);
    let sup = Supervision::from_table(table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(spec.stage.optimizer());
    let mut log = TrainLog {
        initial_objective: objective_value(net, table, batch_size, spec.beta, spec.variant)?,
        ..TrainLog::default()
    };
    let mut best: Option<(f64, Network)> = None;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=spec.stage.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut seen = 0usize;
        for idx in order.chunks(batch_size) {
            if needs_pairs && idx.len() < 2 {
                log.skipped_batches += 1;
                continue;
            }
            let rows: Vec<&[Cell]> = idx.iter().map(|&i| table.rows[i].as_slice()).collect();
            let mut g = Graph::new();
            let (obj, f) = {
                let mut mode = Mode::Train(&mut rng);
                batch_objective(net, &mut g, &rows, idx, &sup, spec.beta, spec.variant, &mut mode)?
            };
            let value = g.scalar(obj);
            if !value.is_finite() {
                bail!(Numeric, "training objective became {value} in epoch {epoch}");
            }
            let grads = g.backward(obj)?;
            net.zero_grad();
            net.accumulate(&grads, &f.bindings)?;
            net.step(&mut opt)?;
            net.model.update_running_stats(&f.forward.batch_stats);
            sum += value * idx.len() as f64;
            seen += idx.len();
        }
        if !net.all_finite() {
            bail!(Numeric, "parameters became non-finite in epoch {epoch}");
        }
        log.epoch_objective
            .push(if seen > 0 { sum / seen as f64 } else { f64::NAN });
        if let Some(v) = spec.validation {
            let s = score(net, v, 1)?;
            log.validation_score.push(s);
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, net.clone()));
                log.best_epoch = epoch;
            }
        }
    }
    match best {
        Some((_, kept)) => *net = kept,
        None if spec.validation.is_none() => log.best_epoch = spec.stage.epochs,
        None => {}
    }
    net.zero_grad();
    log.final_objective = objective_value(net, table, batch_size, spec.beta, spec.variant)?;
    Ok(log)
}
