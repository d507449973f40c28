use approx::assert_relative_eq;
use tabtoken::data::{
    gen_synthetic_fourclass, load_csv, make_transfer_split, sample_few_shot, save_csv, OverlapMap, OverlapRequest,
    SchemaHint, TransferSplit,
};
use tabtoken::experiment::{mean_std, run_protocol, ExperimentPlan, PipelineKind};
use tabtoken::models::{MlpConfig, ModelConfig};
use tabtoken::transfer::{finetune, pretrain, Checkpoint, PipelineConfig, StageConfig};

fn split() -> TransferSplit {
    let full = gen_synthetic_fourclass(600, 21).unwrap();
    let request = OverlapRequest::Explicit {
        pretrain: vec![2, 3, 0, 1],
        downstream: vec![0, 1, 4, 5],
    };
    make_transfer_split(&full, &request, 21).unwrap()
}

fn config() -> PipelineConfig {
    PipelineConfig {
        token_dim: 4,
        model: ModelConfig::Mlp(MlpConfig {
            layers: 1,
            hidden: 8,
            dropout: 0.1,
        }),
        pretrain: StageConfig {
            epochs: 3,
            batch_size: 64,
            ..StageConfig::pretrain_default()
        },
        finetune: StageConfig {
            epochs: 3,
            ..StageConfig::finetune_default()
        },
        ..PipelineConfig::default()
    }
}

fn plan(pipeline: PipelineKind) -> ExperimentPlan {
    ExperimentPlan {
        shots: 2,
        n_subsets: 3,
        n_seeds: 2,
        pipeline,
        overlap: OverlapRequest::Explicit {
            pretrain: vec![2, 3, 0, 1],
            downstream: vec![0, 1, 4, 5],
        },
        config: config(),
    }
}

#[test]
fn finetuning_is_deterministic_per_seed() {
    let s = split();
    let chk = pretrain(&s.pretrain, &s.validation, &config(), 1).unwrap();
    let few = sample_few_shot(&s.downstream_pool, 3, 2).unwrap();
    let a = finetune(&chk, &few, &s.overlap, &config(), 9).unwrap();
    let b = finetune(&chk, &few, &s.overlap, &config(), 9).unwrap();
    let c = finetune(&chk, &few, &s.overlap, &config(), 10).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_ne!(a.to_json().unwrap(), c.to_json().unwrap());
}

#[test]
fn shared_features_carry_their_pretrained_tokens() {
    let s = split();
    let chk = pretrain(&s.pretrain, &s.validation, &config(), 1).unwrap();
    let few = sample_few_shot(&s.downstream_pool, 3, 2).unwrap();
    let tuned = finetune(&chk, &few, &s.overlap, &config(), 3).unwrap();
    let names = |t: &[tabtoken::data::FeatureSpec]| t.iter().map(|f| f.name.clone()).collect::<Vec<_>>();
    let by_name = OverlapMap::by_name(&names(chk.schema()), &names(tuned.schema())).unwrap();
    assert_eq!(by_name, s.overlap);
    let (pre, post) = (&chk.network.tokenizer, &tuned.network.tokenizer);
    for &(down, up) in &s.overlap.pairs {
        let (rd, ru) = (post.rows_of(down), pre.rows_of(up));
        assert_eq!(rd.len(), ru.len());
        for (a, b) in rd.zip(ru) {
            assert_eq!(post.row(a), pre.row(b));
            assert!(post.frozen()[a]);
        }
    }
    assert_eq!(tuned.record.transferred_rows, 8);
}

#[test]
fn protocol_is_job_invariant_and_pairs_subsets() {
    let s = split();
    let tab = plan(PipelineKind::Tabtoken);
    let seq = run_protocol(&s, &tab, 4, 1, None).unwrap();
    let par = run_protocol(&s, &tab, 4, 3, None).unwrap();
    let scratch = run_protocol(&s, &plan(PipelineKind::Scratch), 4, 2, None).unwrap();
    assert_eq!(seq.records.len(), 6);
    for ((a, b), c) in seq.records.iter().zip(&par.records).zip(&scratch.records) {
        assert_eq!((a.subset_id, a.seed_id, a.seed), (b.subset_id, b.seed_id, b.seed));
        assert_eq!(a.metric.to_bits(), b.metric.to_bits());
        assert_eq!(a.subset_hash, c.subset_hash);
        assert_eq!(a.seed, c.seed);
    }
    let (mean, std) = mean_std(&seq.metrics()).unwrap();
    assert_eq!(mean.to_bits(), seq.mean.to_bits());
    assert_relative_eq!(std, seq.std);
}

#[test]
fn reusing_a_checkpoint_matches_internal_pretraining() {
    let s = split();
    let tab = plan(PipelineKind::Tabtoken);
    let internal = run_protocol(&s, &tab, 5, 1, None).unwrap();
    let chk = tabtoken::experiment::pretrain_for(&s, &tab, 5).unwrap().unwrap();
    let reused = run_protocol(&s, &tab, 5, 1, Some(&chk)).unwrap();
    assert_eq!(internal.metrics(), reused.metrics());
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = split();
    let csv = dir.path().join("pool.csv");
    save_csv(&s.downstream_pool, &csv).unwrap();
    let back = load_csv(&csv, &SchemaHint::from_table(&s.downstream_pool), "label").unwrap();
    assert_eq!(back.rows, s.downstream_pool.rows);
    assert_eq!(back.labels, s.downstream_pool.labels);

    let chk = pretrain(&s.pretrain, &s.validation, &config(), 1).unwrap();
    let path = dir.path().join("chk.json");
    chk.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, chk);
    assert_eq!(
        loaded.evaluate(&s.validation, 1).unwrap(),
        chk.evaluate(&s.validation, 1).unwrap()
    );
    assert!(chk.evaluate(&s.test, 1).is_err());
    assert!(Checkpoint::load(&dir.path().join("missing.json")).is_err());
}
