mod common;

use hired::tensor_io::generate_synthetic_dump;
use hired::{
    run_hired, select_tokens, visual_content_scores, Aggregation, Budget, EngineConfig,
    FeatureImportance,
};
use proptest::prelude::*;
use rand::SeedableRng;

fn importance_strategy() -> impl Strategy<Value = Vec<f32>> {
    // coarse values so ties are common
    proptest::collection::vec((0u8..8).prop_map(|v| v as f32 / 8.0), 1..=16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn top_k_matches_sort_oracle(f in importance_strategy(), n in 0usize..20) {
        let got = select_tokens(&FeatureImportance(f.clone()), n);
        prop_assert_eq!(got, common::oracle_top_k(&f, n));
    }

    #[test]
    fn top_k_scale_invariant(f in importance_strategy(), n in 0usize..20) {
        let base = FeatureImportance(f);
        let kept = select_tokens(&base, n);
        for c in [0.5f32, 2.0, 10.0] {
            prop_assert_eq!(&select_tokens(&base.scaled(c), n), &kept);
        }
    }

    #[test]
    fn top_k_permutation_equivariant(
        perm in Just((0..16).collect::<Vec<usize>>()).prop_shuffle(),
        n in 0usize..=16,
    ) {
        // distinct values: f[j] = j + 1
        let f: Vec<f32> = (0..16).map(|j| (j + 1) as f32).collect();
        let kept = select_tokens(&FeatureImportance(f.clone()), n);
        // token j moves to position perm[j]
        let mut permuted = vec![0f32; 16];
        for (j, &p) in perm.iter().enumerate() {
            permuted[p] = f[j];
        }
        let mut expected: Vec<usize> = kept.iter().map(|&j| perm[j]).collect();
        expected.sort();
        prop_assert_eq!(select_tokens(&FeatureImportance(permuted), n), expected);
    }
}

#[test]
fn engine_matches_straight_line_oracle_on_seed_1() {
    let dump = generate_synthetic_dump(1, 4, 2, 4, &[0, 22]).unwrap();
    let cfg = EngineConfig {
        budget: Budget::Tokens(4),
        ..EngineConfig::default()
    };
    let (plan, result) = run_hired(&dump, &dump.layout().unwrap(), &cfg).unwrap();
    let oracle = common::oracle_alg1(&dump, 4, 0.5, 0, 22);
    assert_eq!(plan.allocations().collect::<Vec<_>>(), oracle.budgets);
    let kept: Vec<Vec<usize>> = result
        .partitions
        .iter()
        .map(|p| p.kept_indices.clone())
        .collect();
    assert_eq!(kept, oracle.kept);
    assert_eq!(result.total_kept, 4);
    assert_eq!(plan.n_full, 2);
}

#[test]
fn uniform_attention_gives_equal_scores() {
    let heads = 3;
    let mut dump = generate_synthetic_dump(2, 4, heads, 576, &[0, 22]).unwrap();
    dump = dump.scaled(0.0);
    let meta = dump.meta().clone();
    let tensors = dump
        .partitions()
        .iter()
        .map(|p| {
            let mut t = p.tensor.clone();
            t.data_mut().iter_mut().for_each(|v| *v = 1.0 / 576.0);
            t
        })
        .collect();
    let dump = hired::AttentionDump::new(meta, tensors).unwrap();
    let layout = dump.layout().unwrap();
    let s = visual_content_scores(&dump, &layout, 0, Aggregation::Sum).unwrap();
    let expected = heads as f32 * 144.0 / 576.0;
    for v in s.as_slice() {
        assert!((v - expected).abs() < 1e-4, "{v} vs {expected}");
    }
    assert!(s.as_slice().windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn scores_scale_linearly() {
    let dump = generate_synthetic_dump(3, 4, 2, 16, &[0, 22]).unwrap();
    let layout = dump.layout().unwrap();
    let base = visual_content_scores(&dump, &layout, 0, Aggregation::Sum).unwrap();
    let scaled = visual_content_scores(&dump.scaled(10.0), &layout, 0, Aggregation::Sum).unwrap();
    for (a, b) in base.as_slice().iter().zip(scaled.as_slice()) {
        assert!((b - 10.0 * a).abs() <= 1e-5 * b.abs());
    }
}

#[test]
fn random_instances_match_oracle() {
    use rand::Rng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..300 {
        let dump = common::random_small_dump(&mut rng, false);
        let capacity = (dump.k() + 1) * dump.tokens_per_partition();
        let budget = rng.gen_range(0..=capacity);
        let alpha = [0.0, 0.5, 1.0, rng.gen::<f64>()][rng.gen_range(0..4)];
        let cfg = EngineConfig {
            budget: Budget::Tokens(budget),
            alpha,
            ..EngineConfig::default()
        };
        let (plan, result) = run_hired(&dump, &dump.layout().unwrap(), &cfg).unwrap();
        let oracle = common::oracle_alg1(&dump, budget, alpha, 0, 22);
        assert_eq!(plan.allocations().collect::<Vec<_>>(), oracle.budgets);
        let kept: Vec<_> = result
            .partitions
            .iter()
            .map(|p| p.kept_indices.clone())
            .collect();
        assert_eq!(kept, oracle.kept);
        assert_eq!(result.total_kept, budget);
    }
}

#[test]
fn full_capacity_is_identity_for_any_dump() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let dump = common::random_small_dump(&mut rng, false);
        let cfg = EngineConfig::with_budget(Budget::Fraction(1.0));
        let (_, result) = run_hired(&dump, &dump.layout().unwrap(), &cfg).unwrap();
        let all: Vec<usize> = (0..dump.tokens_per_partition()).collect();
        assert!(result.partitions.iter().all(|p| p.kept_indices == all));
    }
}
