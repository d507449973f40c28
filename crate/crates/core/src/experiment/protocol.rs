use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{few_shot_indices, OverlapLevel, OverlapRequest, TransferSplit};
use crate::error::{bail, Error, Result};
use crate::parallel;
use crate::seed::{derive, stream};
use crate::transfer::{finetune, pretrain, train_from_scratch, Checkpoint, PipelineConfig};

use super::metrics::{mean_std, MetricKind};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    /// Pre-train with the configured β, transfer tokens, fine-tune.
    #[default]
    Tabtoken,
    /// Train the downstream model on the few-shot set alone, without CTR.
    Scratch,
    /// Pre-train and fine-tune with β = 0.
    VanillaPretrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentPlan {
    /// Rows per class (classification) or in total (regression).
    pub shots: usize,
    pub n_subsets: usize,
    pub n_seeds: usize,
    pub pipeline: PipelineKind,
    pub overlap: OverlapRequest,
    pub config: PipelineConfig,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            shots: 5,
            n_subsets: 30,
            n_seeds: 10,
            pipeline: PipelineKind::Tabtoken,
            overlap: OverlapRequest::Level {
                level: OverlapLevel::Medium,
                dataset: None,
            },
            config: PipelineConfig::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 {
            bail!(Config, "shots must be positive");
        }
        if self.n_subsets == 0 || self.n_seeds == 0 {
            bail!(Config, "n_subsets and n_seeds must be at least 1");
        }
        self.config.validate()
    }

    /// Configuration actually used by the downstream stage.
    pub fn stage_config(&self) -> PipelineConfig {
        match self.pipeline {
            PipelineKind::Tabtoken => self.config.clone(),
            PipelineKind::Scratch | PipelineKind::VanillaPretrain => PipelineConfig {
                beta: 0.0,
                ..self.config.clone()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub subset_id: usize,
    pub seed_id: usize,
    pub seed: u64,
    /// Hex SHA-256 of the few-shot pool indices.
    pub subset_hash: String,
    pub metric: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub plan: ExperimentPlan,
    pub master_seed: u64,
    pub data_seed: u64,
    pub run_seed: u64,
    pub pretrain_seed: Option<u64>,
    pub metric: MetricKind,
    pub records: Vec<RunRecord>,
    pub mean: f64,
    pub std: f64,
    pub runtime: f64,
}

impl MetricsReport {
    pub fn metrics(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.metric).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn subset_hash(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for i in indices {
        h.update((*i as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Few-shot pool indices of subset `id`. Every pipeline draws the same subsets
/// for the same master seed.
pub fn subset_indices(split: &TransferSplit, shots: usize, master_seed: u64, id: usize) -> Result<Vec<usize>> {
    let seed = derive(derive(master_seed, stream::DATA), id as u64);
    few_shot_indices(&split.downstream_pool, shots, seed)
}

pub fn run_seed(master_seed: u64, seed_id: usize) -> u64 {
    derive(derive(master_seed, stream::RUNS), seed_id as u64)
}

/// Pre-trains for a plan unless a checkpoint is supplied; scratch plans need none.
pub fn pretrain_for(split: &TransferSplit, plan: &ExperimentPlan, master_seed: u64) -> Result<Option<Checkpoint>> {
    if plan.pipeline == PipelineKind::Scratch {
        return Ok(None);
    }
    let cfg = plan.stage_config();
    pretrain(
        &split.pretrain,
        &split.validation,
        &cfg,
        derive(master_seed, stream::PRETRAIN),
    )
    .map(Some)
}

/// Runs every (subset, seed) pair of the plan and evaluates on the test table.
/// Records come back in (subset, seed) order whatever `jobs` is.
pub fn run_protocol(
    split: &TransferSplit,
    plan: &ExperimentPlan,
    master_seed: u64,
    jobs: usize,
    pretrained: Option<&Checkpoint>,
) -> Result<MetricsReport> {
    plan.validate()?;
    let started = Instant::now();
    let owned;
    let pretrained = match (plan.pipeline, pretrained) {
        (PipelineKind::Scratch, _) => None,
        (_, Some(c)) => Some(c),
        (_, None) => {
            owned = pretrain_for(split, plan, master_seed)?;
            owned.as_ref()
        }
    };
    let cfg = plan.stage_config();
    let subsets = (0..plan.n_subsets)
        .map(|i| subset_indices(split, plan.shots, master_seed, i))
        .collect::<Result<Vec<_>>>()?;
    let runs: Vec<(usize, usize)> = (0..plan.n_subsets)
        .flat_map(|i| (0..plan.n_seeds).map(move |j| (i, j)))
        .collect();
    let records = parallel::map(&runs, jobs, |&(i, j)| {
        let t0 = Instant::now();
        let fewshot = split.downstream_pool.select_rows(&subsets[i]);
        let seed = run_seed(master_seed, j);
        let chk = match pretrained {
            Some(p) => finetune(p, &fewshot, &split.overlap, &cfg, seed)?,
            None => train_from_scratch(&fewshot, &cfg, seed)?,
        };
        let metric = chk.evaluate(&split.test, 1)?;
        Ok(RunRecord {
            subset_id: i,
            seed_id: j,
            seed,
            subset_hash: subset_hash(&subsets[i]),
            metric,
            wall_time: t0.elapsed().as_secs_f64(),
        })
    })?;
    let values: Vec<f64> = records.iter().map(|r| r.metric).collect();
    let (mean, std) = mean_std(&values)?;
    Ok(MetricsReport {
        plan: plan.clone(),
        master_seed,
        data_seed: derive(master_seed, stream::DATA),
        run_seed: derive(master_seed, stream::RUNS),
        pretrain_seed: pretrained.map(|p| p.record.seeds.master),
        metric: MetricKind::for_task(&split.test.task),
        records,
        mean,
        std,
        runtime: started.elapsed().as_secs_f64(),
    })
}
