use serde::{Deserialize, Serialize};

use crate::data::{preprocess, DatasetTable, FeatureKind, FeatureSpec, OverlapMap};
use crate::error::{bail, Result};
use crate::models::{ModelDims, TopModel};
use crate::numerics::exact_mean;
use crate::seed::{derive, stream};
use crate::tokenizer::FeatureTokenizer;

use super::checkpoint::Checkpoint;
use super::config::PipelineConfig;
use super::network::{Network, Reweight};
use super::train::{train, TrainLog, TrainSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
    ReweightFinetune,
    Scratch,
}

/// Seeds of every random stream one stage drew from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub master: u64,
    pub tokenizer: u64,
    pub model: u64,
    pub training: u64,
    pub new_tokens: u64,
}

impl StageSeeds {
    pub fn from_master(master: u64) -> Self {
        Self {
            master,
            tokenizer: derive(master, stream::TOKENIZER),
            model: derive(master, stream::MODEL),
            training: derive(master, stream::TRAINING),
            new_tokens: derive(master, stream::NEW_TOKENS),
        }
    }
}

/// How a checkpoint was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: Stage,
    pub config: PipelineConfig,
    pub seeds: StageSeeds,
    pub log: TrainLog,
    /// Parameters copied from the pre-trained top layer.
    #[serde(default)]
    pub warm_started: Vec<String>,
    /// Token rows copied from the pre-trained tokenizer.
    #[serde(default)]
    pub transferred_rows: usize,
}

fn dims(cfg: &PipelineConfig, table: &DatasetTable) -> ModelDims {
    ModelDims {
        k: cfg.token_dim,
        d: table.n_features(),
        out: table.task.output_dim(),
        combine: cfg.combine,
    }
}

/// Trains tokenizer and top layer on the pre-training table, keeping the
/// epoch with the best validation score. Both tables are raw; statistics
/// come from `train_raw`.
pub fn pretrain(
    train_raw: &DatasetTable,
    validation_raw: &DatasetTable,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let (train_table, others, stats) = preprocess(train_raw, &[validation_raw])?;
    let tokenizer = FeatureTokenizer::init(
        &train_table.schema,
        cfg.token_dim,
        StageSeeds::from_master(seed).tokenizer,
    )?;
    let model = TopModel::init(
        cfg.model.clone(),
        dims(cfg, &train_table),
        StageSeeds::from_master(seed).model,
    )?;
    let mut net = Network::new(tokenizer, None, model)?;
    let spec = TrainSpec {
        stage: &cfg.pretrain,
        beta: cfg.beta,
        variant: cfg.variant,
        validation: Some(&others[0]),
    };
    let log = train(&mut net, &train_table, &spec, StageSeeds::from_master(seed).training)?;
    Checkpoint::new(
        net,
        train_raw,
        stats,
        TrainRecord {
            stage: Stage::Pretrain,
            config: cfg.clone(),
            seeds: StageSeeds::from_master(seed),
            log,
            warm_started: Vec::new(),
            transferred_rows: 0,
        },
    )
}

/// Mean of all pre-trained token rows.
pub fn mean_token(tokenizer: &FeatureTokenizer) -> Vec<f64> {
    let n = tokenizer.n_rows();
    (0..tokenizer.k())
        .map(|c| {
            let col: Vec<f64> = (0..n).map(|r| tokenizer.row(r)[c]).collect();
            exact_mean(&col).unwrap_or(0.0)
        })
        .collect()
}

/// Downstream tokenizer: rows of shared features are copied from the
/// pre-trained tokenizer and frozen; every other row starts at the mean
/// pre-trained token and is trainable. Shared categorical features match
/// categories by label. Returns the tokenizer and the number of copied rows.
pub fn build_finetune_tokenizer(
    pretrained: &FeatureTokenizer,
    schema: &[FeatureSpec],
    overlap: &OverlapMap,
) -> Result<(FeatureTokenizer, usize)> {
    if overlap.d != pretrained.n_features() || overlap.d_t != schema.len() {
        bail!(
            Contract,
            "overlap map is for d={}, d_t={} but tokenizers have {} and {} features",
            overlap.d,
            overlap.d_t,
            pretrained.n_features(),
            schema.len()
        );
    }
    let k = pretrained.k();
    let mean = mean_token(pretrained);
    let mut data = Vec::new();
    let mut frozen = Vec::new();
    let mut copied = 0;
    for (j, spec) in schema.iter().enumerate() {
        let source = overlap.pretrain_index(j).map(|p| (p, &pretrained.schema()[p]));
        let rows = pretrained_rows(pretrained, spec, source)?;
        for r in rows {
            match r {
                Some(src) => {
                    data.extend_from_slice(pretrained.row(src));
                    frozen.push(true);
                    copied += 1;
                }
                None => {
                    data.extend_from_slice(&mean);
                    frozen.push(false);
                }
            }
        }
    }
    debug_assert_eq!(data.len(), frozen.len() * k);
    Ok((FeatureTokenizer::from_parts(schema.to_vec(), k, data, frozen)?, copied))
}

/// For each token row of `spec`, the pre-trained row it copies, if any.
fn pretrained_rows(
    pretrained: &FeatureTokenizer,
    spec: &FeatureSpec,
    source: Option<(usize, &FeatureSpec)>,
) -> Result<Vec<Option<usize>>> {
    let width = spec.cardinality().unwrap_or(1);
    let Some((p, src)) = source else {
        return Ok(vec![None; width]);
    };
    let base = pretrained.rows_of(p).start;
    match (&spec.kind, &src.kind) {
        (FeatureKind::Numerical, FeatureKind::Numerical) => Ok(vec![Some(base)]),
        (FeatureKind::Categorical { categories }, FeatureKind::Categorical { categories: old }) => Ok(categories
            .iter()
            .map(|c| old.iter().position(|o| o == c).map(|i| base + i))
            .collect()),
        _ => bail!(
            Schema,
            "shared feature '{}' is {} downstream but {} in pre-training",
            spec.name,
            kind_name(&spec.kind),
            kind_name(&src.kind)
        ),
    }
}

fn kind_name(kind: &FeatureKind) -> &'static str {
    match kind {
        FeatureKind::Numerical => "numerical",
        FeatureKind::Categorical { .. } => "categorical",
    }
}

fn downstream_model(
    cfg: &PipelineConfig,
    table: &DatasetTable,
    source: Option<&TopModel>,
    seed: u64,
) -> Result<(TopModel, Vec<String>)> {
    let mut model = TopModel::init(cfg.model.clone(), dims(cfg, table), StageSeeds::from_master(seed).model)?;
    let copied = match source {
        Some(src) if cfg.warm_start && src.config.name() == cfg.model.name() => model.warm_start_from(src),
        _ => Vec::new(),
    };
    model.apply_tuning_mode(cfg.tuning_mode)?;
    Ok((model, copied))
}

fn finetune_spec(cfg: &PipelineConfig) -> TrainSpec<'_> {
    TrainSpec {
        stage: &cfg.finetune,
        beta: cfg.beta,
        variant: cfg.variant,
        validation: None,
    }
}

/// Fine-tunes on a raw few-shot table with transferred tokens. The few-shot
/// table supplies the preprocessing statistics.
pub fn finetune(
    pretrained: &Checkpoint,
    fewshot_raw: &DatasetTable,
    overlap: &OverlapMap,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if cfg.token_dim != pretrained.network.tokenizer.k() {
        bail!(
            Config,
            "token_dim {} differs from the pre-trained k={}",
            cfg.token_dim,
            pretrained.network.tokenizer.k()
        );
    }
    let (table, _, stats) = preprocess(fewshot_raw, &[])?;
    let (tokenizer, transferred) = build_finetune_tokenizer(&pretrained.network.tokenizer, &table.schema, overlap)?;
    let (model, warm) = downstream_model(cfg, &table, Some(&pretrained.network.model), seed)?;
    let mut net = Network::new(tokenizer, None, model)?;
    let log = train(
        &mut net,
        &table,
        &finetune_spec(cfg),
        StageSeeds::from_master(seed).training,
    )?;
    Checkpoint::new(
        net,
        fewshot_raw,
        stats,
        TrainRecord {
            stage: Stage::Finetune,
            config: cfg.clone(),
            seeds: StageSeeds::from_master(seed),
            log,
            warm_started: warm,
            transferred_rows: transferred,
        },
    )
}

/// Trains a fresh tokenizer and top layer on the raw few-shot table.
pub fn train_from_scratch(fewshot_raw: &DatasetTable, cfg: &PipelineConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let (table, _, stats) = preprocess(fewshot_raw, &[])?;
    let tokenizer = FeatureTokenizer::init(&table.schema, cfg.token_dim, StageSeeds::from_master(seed).tokenizer)?;
    let (model, _) = downstream_model(cfg, &table, None, seed)?;
    let mut net = Network::new(tokenizer, None, model)?;
    let log = train(
        &mut net,
        &table,
        &finetune_spec(cfg),
        StageSeeds::from_master(seed).training,
    )?;
    Checkpoint::new(
        net,
        fewshot_raw,
        stats,
        TrainRecord {
            stage: Stage::Scratch,
            config: cfg.clone(),
            seeds: StageSeeds::from_master(seed),
            log,
            warm_started: Vec::new(),
            transferred_rows: 0,
        },
    )
}

/// Fine-tunes with every downstream token row expressed as a learned
/// combination of the frozen pre-trained rows and `n_new` fresh tokens.
/// The tokenizer table holds the materialized combination afterwards.
pub fn reweight_finetune(
    pretrained: &Checkpoint,
    fewshot_raw: &DatasetTable,
    n_new: usize,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let k = pretrained.network.tokenizer.k();
    if cfg.token_dim != k {
        bail!(Config, "token_dim {} differs from the pre-trained k={k}", cfg.token_dim);
    }
    let (table, _, stats) = preprocess(fewshot_raw, &[])?;
    let rows: usize = table.schema.iter().map(|f| f.cardinality().unwrap_or(1)).sum();
    let mut tokenizer = FeatureTokenizer::from_parts(table.schema.clone(), k, vec![0.0; rows * k], vec![false; rows])?;
    tokenizer.table_mut().set_requires_grad(false);
    let library = pretrained.network.tokenizer.table().clone();
    let reweight = Reweight::init(library, n_new, rows, StageSeeds::from_master(seed).new_tokens)?;
    let (model, warm) = downstream_model(cfg, &table, Some(&pretrained.network.model), seed)?;
    let mut net = Network::new(tokenizer, Some(reweight), model)?;
    net.materialize_reweight();
    let log = train(
        &mut net,
        &table,
        &finetune_spec(cfg),
        StageSeeds::from_master(seed).training,
    )?;
    net.materialize_reweight();
    Checkpoint::new(
        net,
        fewshot_raw,
        stats,
        TrainRecord {
            stage: Stage::ReweightFinetune,
            config: cfg.clone(),
            seeds: StageSeeds::from_master(seed),
            log,
            warm_started: warm,
            transferred_rows: 0,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_fourclass, make_transfer_split, Cell, OverlapRequest, TransferSplit};
    use crate::models::{MlpConfig, ModelConfig, TransformerConfig, TuningMode};
    use crate::transfer::StageConfig;

    fn small_cfg(model: ModelConfig) -> PipelineConfig {
        let stage = |epochs| StageConfig {
            epochs,
            batch_size: 64,
            learning_rate: 1e-2,
            weight_decay: 2e-4,
        };
        PipelineConfig {
            token_dim: 4,
            model,
            pretrain: stage(3),
            finetune: stage(5),
            ..PipelineConfig::default()
        }
    }

    fn tiny_transformer() -> ModelConfig {
        ModelConfig::Transformer(TransformerConfig {
            layers: 1,
            heads: 2,
            ..TransformerConfig::default()
        })
    }

    fn split() -> TransferSplit {
        let full = gen_synthetic_fourclass(400, 3).unwrap();
        let req = OverlapRequest::Explicit {
            pretrain: vec![2, 3, 0, 1],
            downstream: vec![0, 1, 4, 5],
        };
        make_transfer_split(&full, &req, 5).unwrap()
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let s = split();
        let mut cfg = small_cfg(ModelConfig::Linear);
        cfg.beta = 0.0;
        cfg.pretrain.epochs = 0;
        let chk = pretrain(&s.pretrain, &s.validation, &cfg, 9).unwrap();
        let seeds = StageSeeds::from_master(9);
        let init = FeatureTokenizer::init(chk.schema(), 4, seeds.tokenizer).unwrap();
        assert_eq!(chk.network.tokenizer.table().data(), init.table().data());
        assert_eq!(chk.record.log.best_epoch, 0);
        assert_eq!(chk.record.log.initial_objective, chk.record.log.final_objective);
    }

    #[test]
    fn pretraining_lowers_the_objective() {
        let s = split();
        let mut cfg = small_cfg(ModelConfig::Mlp(MlpConfig {
            layers: 1,
            hidden: 16,
            dropout: 0.0,
        }));
        cfg.pretrain.epochs = 20;
        let chk = pretrain(&s.pretrain, &s.validation, &cfg, 1).unwrap();
        let log = &chk.record.log;
        assert!(log.final_objective < log.initial_objective, "{log:?}");
        assert_eq!(log.validation_score.len(), 20);
        let best = log.validation_score[log.best_epoch - 1];
        assert!(log.validation_score.iter().all(|&v| v <= best));
    }

    #[test]
    fn finetune_freezes_transferred_rows() {
        let s = split();
        let cfg = small_cfg(tiny_transformer());
        let chk = pretrain(&s.pretrain, &s.validation, &cfg, 1).unwrap();
        let fewshot = crate::data::sample_few_shot(&s.downstream_pool, 5, 2).unwrap();
        let tuned = finetune(&chk, &fewshot, &s.overlap, &cfg, 4).unwrap();
        let t = &tuned.network.tokenizer;
        // x1, x2 are shared: 8 rows copied from pre-training, unchanged after training
        assert_eq!(tuned.record.transferred_rows, 8);
        for j in 0..2 {
            let p = s.overlap.pretrain_index(j).unwrap();
            for (r, q) in t.rows_of(j).zip(chk.network.tokenizer.rows_of(p)) {
                assert!(t.frozen()[r]);
                assert_eq!(t.row(r), chk.network.tokenizer.row(q));
            }
        }
        let m = mean_token(&chk.network.tokenizer);
        assert!((8..16).any(|r| t.row(r) != m.as_slice()), "unseen rows should train");
        assert!(!tuned.record.warm_started.is_empty());

        let again = finetune(&chk, &fewshot, &s.overlap, &cfg, 4).unwrap();
        assert_eq!(again, tuned);
    }

    #[test]
    fn fix_top_layer_changes_only_unseen_tokens() {
        let s = split();
        let mut cfg = small_cfg(tiny_transformer());
        let chk = pretrain(&s.pretrain, &s.validation, &cfg, 1).unwrap();
        cfg.tuning_mode = TuningMode::FixTopLayer;
        let fewshot = crate::data::sample_few_shot(&s.downstream_pool, 5, 2).unwrap();
        let tuned = finetune(&chk, &fewshot, &s.overlap, &cfg, 4).unwrap();
        for (a, b) in tuned.network.model.params().iter().zip(chk.network.model.params()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
        let mut zero = cfg.clone();
        zero.finetune.epochs = 0;
        let start = finetune(&chk, &fewshot, &s.overlap, &zero, 4).unwrap();
        let t0 = &start.network.tokenizer;
        let t1 = &tuned.network.tokenizer;
        for r in 0..t1.n_rows() {
            assert_eq!(t0.row(r) == t1.row(r), t0.frozen()[r], "row {r}");
        }
    }

    #[test]
    fn reweighting_shapes_and_materialization() {
        let s = split();
        let cfg = small_cfg(ModelConfig::Linear);
        let chk = pretrain(&s.pretrain, &s.validation, &cfg, 1).unwrap();
        let fewshot = crate::data::sample_few_shot(&s.downstream_pool, 5, 2).unwrap();
        let tuned = reweight_finetune(&chk, &fewshot, 2, &cfg, 4).unwrap();
        let r = tuned.network.reweight.as_ref().unwrap();
        assert_eq!(r.weights.shape(), &[16, 18]);
        assert_eq!(r.new_tokens.as_ref().unwrap().shape(), &[2, 4]);
        assert_eq!(r.library.data(), chk.network.tokenizer.table().data());
        assert_eq!(tuned.network.tokenizer.table().data(), r.materialize().as_slice());

        let none = reweight_finetune(&chk, &fewshot, 0, &cfg, 4).unwrap();
        assert!(none.network.reweight.as_ref().unwrap().new_tokens.is_none());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let s = split();
        let cfg = small_cfg(tiny_transformer());
        let chk = pretrain(&s.pretrain, &s.validation, &cfg, 1).unwrap();
        let back = Checkpoint::from_json(&chk.to_json().unwrap()).unwrap();
        assert_eq!(back, chk);
        let rows = s.validation.select_rows(&(0..50).collect::<Vec<_>>());
        let a = chk.predict_raw(&rows, 1).unwrap();
        let b = back.predict_raw(&rows, 1).unwrap();
        assert_eq!(a, b);
        let fewshot = crate::data::sample_few_shot(&s.downstream_pool, 3, 2).unwrap();
        let rw = reweight_finetune(&chk, &fewshot, 1, &small_cfg(ModelConfig::Linear), 4).unwrap();
        assert!(rw.record.warm_started.is_empty());
        assert_eq!(Checkpoint::from_json(&rw.to_json().unwrap()).unwrap(), rw);
    }

    fn tok(schema: Vec<FeatureSpec>, k: usize) -> FeatureTokenizer {
        let rows: usize = schema.iter().map(|f| f.cardinality().unwrap_or(1)).sum();
        let data = (0..rows * k).map(|i| i as f64).collect();
        FeatureTokenizer::from_parts(schema, k, data, vec![false; rows]).unwrap()
    }

    #[test]
    fn transfer_rules() {
        let pre = tok(
            vec![
                FeatureSpec::numerical("a"),
                FeatureSpec::categorical("c", ["x", "y"]),
                FeatureSpec::numerical("gone"),
            ],
            2,
        );
        // rows: a=[0,1] c.x=[2,3] c.y=[4,5] gone=[6,7]; mean = [3,4]
        assert_eq!(mean_token(&pre), vec![3.0, 4.0]);
        let down = vec![
            FeatureSpec::categorical("c", ["y", "z"]),
            FeatureSpec::numerical("a"),
            FeatureSpec::numerical("new"),
        ];
        let overlap = OverlapMap::new(vec![(0, 1), (1, 0)], 3, 3).unwrap();
        let (t, copied) = build_finetune_tokenizer(&pre, &down, &overlap).unwrap();
        assert_eq!(copied, 2);
        assert_eq!(t.table().data(), &[4.0, 5.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
        assert_eq!(t.frozen(), &[true, false, true, false]);
        let z = t
            .tokenize_instance(&[Cell::Cat(0), Cell::Num(2.0), Cell::Num(1.0)])
            .unwrap();
        assert_eq!(z, vec![vec![4.0, 5.0], vec![0.0, 2.0], vec![3.0, 4.0]]);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let pre = tok(vec![FeatureSpec::numerical("a")], 2);
        let down = vec![FeatureSpec::categorical("a", ["x"])];
        let overlap = OverlapMap::new(vec![(0, 0)], 1, 1).unwrap();
        assert!(build_finetune_tokenizer(&pre, &down, &overlap).is_err());
        let wrong = OverlapMap::new(vec![], 2, 1).unwrap();
        assert!(build_finetune_tokenizer(&pre, &down, &wrong).is_err());
    }
}
