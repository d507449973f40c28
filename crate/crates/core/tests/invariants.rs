use proptest::collection::vec;
use proptest::prelude::*;
use tabtoken::data::{
    few_shot_indices, gen_synthetic_fourclass, Cell, DatasetTable, FeatureCounts, FeatureSpec, Labels, OverlapRequest,
    SplitManifest, TaskKind,
};
use tabtoken::numerics::{exact_sum, AdamW, AdamWConfig, ParamSlot, Tensor};
use tabtoken::objective::{combine_average, ctr_loss, CtrVariant};
use tabtoken::seed::{derive, stream};
use tabtoken::tokenizer::FeatureTokenizer;

fn tokens(n: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    vec(vec(-50.0..50.0f64, k), n)
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #[test]
    fn numerical_tokens_scale_linearly(x in -1e3..1e3f64, a in -10.0..10.0f64, seed in any::<u64>()) {
        let schema = [FeatureSpec::numerical("x")];
        let tok = FeatureTokenizer::init(&schema, 3, seed).unwrap();
        let t = tok.tokenize_instance(&[Cell::Num(x)]).unwrap();
        let ta = tok.tokenize_instance(&[Cell::Num(a * x)]).unwrap();
        for (u, v) in t[0].iter().zip(&ta[0]) {
            prop_assert!((a * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn categorical_tokens_are_table_rows(c in 0usize..5, seed in any::<u64>()) {
        let schema = [FeatureSpec::categorical("c", ["a", "b", "c", "d", "e"])];
        let tok = FeatureTokenizer::init(&schema, 4, seed).unwrap();
        let t = tok.tokenize_instance(&[Cell::Cat(c)]).unwrap();
        prop_assert_eq!(t[0].as_slice(), tok.row(tok.rows_of(0).start + c));
    }

    #[test]
    fn average_ignores_token_order((rows, perm) in (1usize..12).prop_flat_map(|n| (tokens(n, 3), permutation(n)))) {
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let a = combine_average(&rows).unwrap();
        let b = combine_average(&shuffled).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn exact_sum_ignores_order((xs, perm) in (0usize..40).prop_flat_map(|n| (vec(-1e12..1e12f64, n), permutation(n)))) {
        let shuffled: Vec<f64> = perm.iter().map(|&i| xs[i]).collect();
        prop_assert_eq!(exact_sum(xs.iter().copied()).to_bits(), exact_sum(shuffled).to_bits());
    }

    #[test]
    fn ctr_is_translation_invariant(rows in tokens(9, 2), shift in vec(-100.0..100.0f64, 2)) {
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0] + shift[0], r[1] + shift[1]]).collect();
        for variant in [CtrVariant::Vanilla, CtrVariant::Hardest, CtrVariant::AllHard, CtrVariant::VanillaPlusHard] {
            let a = ctr_loss(&rows, &labels, variant).unwrap();
            let b = ctr_loss(&moved, &labels, variant).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{variant:?}: {a} vs {b}");
            // the vanilla+hard form subtracts inter-class distances and may go negative
            prop_assert!(a >= 0.0 || variant == CtrVariant::VanillaPlusHard);
        }
    }

    #[test]
    fn adamw_never_touches_frozen_rows(
        init in vec(-1.0..1.0f64, 12),
        grads in vec(vec(-5.0..5.0f64, 12), 1..6),
        frozen in vec(any::<bool>(), 4),
    ) {
        let mut t = Tensor::new(vec![4, 3], init.clone()).unwrap().requires_grad(true);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.1, ..AdamWConfig::default() });
        for g in &grads {
            t.zero_grad();
            t.accumulate_grad(g).unwrap();
            opt.step(&mut [ParamSlot::with_frozen_rows(&mut t, &frozen)]).unwrap();
        }
        for (r, &f) in frozen.iter().enumerate() {
            if f {
                prop_assert_eq!(t.row(r), &init[r * 3..r * 3 + 3]);
                prop_assert!(opt.first_moment(0).unwrap()[r * 3..r * 3 + 3].iter().all(|&m| m == 0.0));
            }
        }
    }

    #[test]
    fn seed_streams_are_distinct(master in any::<u64>()) {
        let streams = [
            stream::TOKENIZER, stream::MODEL, stream::TRAINING, stream::NEW_TOKENS,
            stream::PRETRAIN, stream::DATA, stream::RUNS,
        ];
        let mut seeds: Vec<u64> = streams.iter().map(|&s| derive(master, s)).collect();
        seeds.sort_unstable();
        seeds.dedup();
        prop_assert_eq!(seeds.len(), streams.len());
        prop_assert_eq!(derive(master, stream::MODEL), derive(master, stream::MODEL));
    }
}

fn numeric_table(rows: usize, features: usize) -> DatasetTable {
    DatasetTable::new(
        (0..features).map(|j| FeatureSpec::numerical(format!("f{j}"))).collect(),
        (0..rows)
            .map(|i| (0..features).map(|j| Cell::Num((i * features + j) as f64)).collect())
            .collect(),
        Labels::Class((0..rows).map(|i| i % 3).collect()),
        TaskKind::for_classes(3),
        vec!["a".into(), "b".into(), "c".into()],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_rows_and_counts_features(
        rows in 60usize..200,
        (d, d_t, s) in (2usize..6).prop_flat_map(|d| (Just(d), 2usize..6)).prop_flat_map(|(d, d_t)| (Just(d), Just(d_t), 1..=d.min(d_t))),
        seed in any::<u64>(),
    ) {
        let features = d + d_t - s;
        let full = numeric_table(rows, features);
        let request = OverlapRequest::Counts(FeatureCounts { d, d_t, s });
        let m = SplitManifest::plan(&full, &request, seed).unwrap();
        let mut all: Vec<usize> = [&m.pretrain_rows, &m.validation_rows, &m.pool_rows, &m.test_rows]
            .into_iter()
            .flatten()
            .copied()
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), n, "row groups overlap");
        prop_assert!(all.iter().all(|&r| r < rows));
        prop_assert_eq!(m.pretrain_features.len(), d);
        prop_assert_eq!(m.downstream_features.len(), d_t);
        let shared = m.pretrain_features.iter().filter(|f| m.downstream_features.contains(f)).count();
        prop_assert_eq!(shared, s);
        prop_assert_eq!(m.overlap().unwrap().s(), s);
        prop_assert_eq!(&SplitManifest::plan(&full, &request, seed).unwrap(), &m);
    }

    #[test]
    fn few_shot_draws_are_balanced_and_distinct(shots in 1usize..8, seed in any::<u64>()) {
        let pool = gen_synthetic_fourclass(200, 3).unwrap();
        let idx = few_shot_indices(&pool, shots, seed).unwrap();
        prop_assert_eq!(idx.len(), 4 * shots);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), idx.len());
        let labels = pool.labels.classes().unwrap();
        for c in 0..4 {
            prop_assert_eq!(idx.iter().filter(|&&i| labels[i] == c).count(), shots);
        }
    }
}
