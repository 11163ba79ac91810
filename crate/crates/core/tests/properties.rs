//! Randomized invariant checks across module boundaries.

use dml_core::data::{assign_folds, Dataset};
use dml_core::forest::{ForestModel, ForestParams};
use dml_core::policy::{evaluate_policy, search_exact, PolicyNode, PolicyTreeModel};
use dml_core::scores::{ate_scores, mean_effect, ScoreSet};
use dml_core::stats::quantile;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset_with_arms(n: usize, arms: usize, min_per_arm: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::<f64>::zeros((n, 2));
    for v in x.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    // deal the guaranteed block cyclically, then draw the rest at random
    let labels: Vec<i64> = (0..n)
        .map(|i| {
            if i < arms * min_per_arm {
                (i % arms) as i64
            } else {
                rng.gen_range(0..arms) as i64
            }
        })
        .collect();
    let y = Array1::from_iter((0..n).map(|i| x[[i, 0]] + 0.1 * i as f64));
    Dataset::new(
        y,
        &labels,
        x.clone(),
        vec!["x0".into(), "x1".into()],
        x,
        vec!["z0".into(), "z1".into()],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn folds_partition_and_balance(
        n in 20usize..200,
        arms in 2usize..5,
        k in 2usize..6,
        seed in 0u64..1_000,
    ) {
        let ds = dataset_with_arms(n, arms, k, seed);
        let folds = assign_folds(&ds, k, seed).unwrap();
        prop_assert_eq!(folds.fold.len(), n);
        prop_assert!(folds.fold.iter().all(|&f| f < k));

        let mut sizes = vec![0usize; k];
        for &f in &folds.fold {
            sizes[f] += 1;
        }
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        prop_assert!(max - min <= 1, "total sizes {:?}", sizes);

        for arm in 0..arms {
            let mut arm_sizes = vec![0usize; k];
            for i in 0..n {
                if ds.w[i] == arm {
                    arm_sizes[folds.fold[i]] += 1;
                }
            }
            let (lo, hi) = (arm_sizes.iter().min().unwrap(), arm_sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "arm {} sizes {:?}", arm, arm_sizes);
        }
    }

    #[test]
    fn smoother_weights_form_a_simplex_and_reproduce_predictions(
        n in 20usize..60,
        seed in 0u64..500,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::<f64>::zeros((n, 2));
        for v in x.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let y = Array1::from_iter((0..n).map(|i| x[[i, 0]] * 2.0 + rng.gen_range(-0.2..0.2)));
        let params = ForestParams {
            num_trees: 20,
            min_leaf: 3,
            subsample_fraction: 0.7,
            ..ForestParams::default()
        }
        .with_seed(seed);
        let model = ForestModel::fit(x.view(), y.view(), &params).unwrap();

        let probe = x.row(seed as usize % n);
        let w = model.weights_at(probe).unwrap();
        prop_assert!(w.weights.iter().all(|&v| v >= 0.0));
        let total: f64 = w.weights.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-10, "weights sum {}", total);

        let recomposed: f64 = w
            .indices
            .iter()
            .zip(&w.weights)
            .map(|(&i, &a)| a * y[i])
            .sum();
        let direct = model.predict(probe).unwrap();
        prop_assert!((recomposed - direct).abs() < 1e-10);
    }

    #[test]
    fn contrast_scores_are_antisymmetric(
        n in 10usize..80,
        arms in 2usize..4,
        seed in 0u64..500,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gamma = Array2::<f64>::zeros((n, arms));
        for v in gamma.iter_mut() {
            *v = rng.gen_range(-3.0..3.0);
        }
        let scores = ScoreSet { gamma };
        let fwd = ate_scores(&scores, 1, 0).unwrap();
        let rev = ate_scores(&scores, 0, 1).unwrap();
        for i in 0..n {
            prop_assert_eq!(fwd.delta[i], -rev.delta[i]);
        }
        let est_f = mean_effect(&fwd.delta.to_vec()).unwrap();
        let est_r = mean_effect(&rev.delta.to_vec()).unwrap();
        prop_assert!((est_f.point + est_r.point).abs() < 1e-12);
        prop_assert!((est_f.se - est_r.se).abs() < 1e-12);
    }

    #[test]
    fn quantiles_are_monotone_and_bounded(
        values in prop::collection::vec(-100.0f64..100.0, 1..60),
        p1 in 0.0f64..1.0,
        p2 in 0.0f64..1.0,
    ) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        let q_lo = quantile(&values, lo);
        let q_hi = quantile(&values, hi);
        prop_assert!(q_lo <= q_hi, "quantile({}) = {} > quantile({}) = {}", lo, q_lo, hi, q_hi);
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(q_lo >= min && q_hi <= max);
    }

    #[test]
    fn policy_search_never_loses_to_a_single_leaf(
        n in 4usize..30,
        arms in 2usize..4,
        seed in 0u64..300,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gamma = Array2::<f64>::zeros((n, arms));
        for v in gamma.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let mut z = Array2::<f64>::zeros((n, 2));
        for v in z.iter_mut() {
            *v = rng.gen_range(0..6) as f64;
        }
        let scores = ScoreSet { gamma };
        let tree = search_exact(&scores, z.view(), 1).unwrap();
        let found = evaluate_policy(&scores, z.view(), &tree).unwrap();
        for arm in 0..arms {
            let leaf = PolicyTreeModel::new(1, PolicyNode::Leaf { arm }).unwrap();
            let fixed = evaluate_policy(&scores, z.view(), &leaf).unwrap();
            prop_assert!(
                found.value >= fixed.value - 1e-12,
                "search value {} below fixed arm {}: {}",
                found.value,
                arm,
                fixed.value
            );
        }
        let share_sum: f64 = found.shares.iter().sum();
        prop_assert!((share_sum - 1.0).abs() < 1e-12);
    }
}
