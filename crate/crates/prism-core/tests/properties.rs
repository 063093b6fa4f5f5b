//! Property tests for the estimator invariants: efficiency, symmetry,
//! unbiasedness, reconstruction monotonicity, table structure, and metric
//! invariances.

use proptest::prelude::*;

use prism_core::metrics::{auroc, ScoredLabel};
use prism_core::oracle::{DeterministicOracle, SyntheticModel};
use prism_core::rng::{seeded, substream};
use prism_core::shapley::{exact_shapley, logit, sigmoid, softmax, ClampCounter};
use prism_core::tabular::build_contrast_table;
use prism_core::types::{BackgroundSet, FactorId, FactorValue, Instance, TaskSpec};

fn game_value<'a>(
    weights: &'a [f64],
    interactions: &'a [(usize, usize, f64)],
) -> impl Fn(&BackgroundSet) -> f64 + 'a {
    move |s: &BackgroundSet| {
        let mut total: f64 = s.iter().map(|j| weights[j]).sum();
        for &(a, b, c) in interactions {
            if s.contains(a) && s.contains(b) {
                total += c;
            }
        }
        total
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn efficiency_telescopes_exactly(
        weights in prop::collection::vec(-2.0f64..2.0, 2..7),
        coeffs in prop::collection::vec(-1.0f64..1.0, 0..4),
    ) {
        let m = weights.len();
        let interactions: Vec<(usize, usize, f64)> = coeffs
            .iter()
            .enumerate()
            .map(|(idx, &c)| (idx % m, (idx + 1) % m, c))
            .filter(|(a, b, _)| a != b)
            .collect();
        let v = game_value(&weights, &interactions);
        let sum: f64 = (0..m).map(|i| exact_shapley(&v, m, i).unwrap()).sum();
        // the excluded index m is outside 0..m, so this is the full set
        let full = BackgroundSet::new((0..m).collect::<Vec<_>>(), m).unwrap();
        let expected = v(&full) - v(&BackgroundSet::empty());
        prop_assert!((sum - expected).abs() < 1e-10);
    }

    #[test]
    fn symmetric_factors_get_equal_values(
        shared_weight in -1.5f64..1.5,
        other_weight in -1.5f64..1.5,
        coupling in -1.0f64..1.0,
    ) {
        // factors 0 and 1 are interchangeable: same weight, same coupling to factor 2
        let weights = [shared_weight, shared_weight, other_weight];
        let interactions = [(0usize, 2usize, coupling), (1, 2, coupling)];
        let v = game_value(&weights, &interactions);
        let phi0 = exact_shapley(&v, 3, 0).unwrap();
        let phi1 = exact_shapley(&v, 3, 1).unwrap();
        prop_assert!((phi0 - phi1).abs() < 1e-10);
    }

    #[test]
    fn logit_sigmoid_round_trip(p in 1e-6f64..=0.999999) {
        let back = sigmoid(logit(p, 1e-6).unwrap());
        prop_assert!((back - p).abs() <= 1e-12);
    }

    #[test]
    fn probability_increases_with_total_logit(z1 in -30.0f64..30.0, dz in 1e-6f64..10.0) {
        prop_assert!(sigmoid(z1 + dz) > sigmoid(z1));
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-20.0f64..20.0, 2..6),
        shift in -10.0f64..10.0,
    ) {
        let base = softmax(&logits);
        prop_assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        let moved = softmax(&shifted);
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn contrast_tables_keep_pairs_adjacent(
        m in 2usize..7,
        factor in 0usize..7,
        k in 1usize..12,
        seed in 0u64..500,
    ) {
        let factor = factor % m;
        let x = Instance::new((0..m).map(|j| FactorValue::numeric(j as f64 + 1.0)).collect());
        let r = prism_core::types::ReferenceInstance::new(
            (0..m).map(|_| FactorValue::numeric(0.0)).collect(),
        );
        let mut rng = seeded(seed);
        let id = FactorId { index: factor, name: format!("f{factor}") };
        let table = build_contrast_table(&x, factor, &r, k, &mut rng, id).unwrap();
        prop_assert_eq!(table.rows().len(), 2 * k);
        for pair in 0..k {
            let with = &table.rows()[2 * pair];
            let without = &table.rows()[2 * pair + 1];
            prop_assert_eq!(with.pair_id, pair);
            prop_assert_eq!(without.pair_id, pair);
            // arms differ exactly at the factor of interest
            for j in 0..m {
                if j == factor {
                    prop_assert_ne!(&with.row_values[j], &without.row_values[j]);
                } else {
                    prop_assert_eq!(&with.row_values[j], &without.row_values[j]);
                }
            }
        }
    }

    #[test]
    fn auroc_is_invariant_under_monotone_transforms(
        points in prop::collection::vec((0.01f64..0.99, 0u8..2), 8..60),
    ) {
        let data: Vec<ScoredLabel> = points.iter().map(|&(s, l)| ScoredLabel::new(s, l)).collect();
        let positives = data.iter().filter(|d| d.label == 1).count();
        prop_assume!(positives > 0 && positives < data.len());
        let base = auroc(&data).unwrap();

        let affine: Vec<ScoredLabel> =
            data.iter().map(|d| ScoredLabel::new(3.0 * d.score + 7.0, d.label)).collect();
        prop_assert!((auroc(&affine).unwrap() - base).abs() < 1e-10);

        let logits: Vec<ScoredLabel> = data
            .iter()
            .map(|d| ScoredLabel::new(logit(d.score, 1e-9).unwrap(), d.label))
            .collect();
        prop_assert!((auroc(&logits).unwrap() - base).abs() < 1e-10);
    }

    #[test]
    fn auroc_flip_identity_for_tie_free_scores(
        seed in 0u64..1000,
        n in 8usize..60,
    ) {
        use rand::Rng;
        let mut rng = seeded(seed);
        // distinct scores by construction
        let mut data: Vec<ScoredLabel> = (0..n)
            .map(|i| ScoredLabel::new(i as f64 + rng.gen::<f64>() * 0.5, u8::from(rng.gen_bool(0.5))))
            .collect();
        let positives = data.iter().filter(|d| d.label == 1).count();
        prop_assume!(positives > 0 && positives < data.len());
        let forward = auroc(&data).unwrap();
        for d in &mut data {
            d.label = 1 - d.label;
        }
        let flipped = auroc(&data).unwrap();
        prop_assert!((forward + flipped - 1.0).abs() < 1e-10);
    }
}

/// Mean of the sampled estimator over many independent seeds stays within
/// three combined standard errors of the exact value.
#[tokio::test]
async fn estimator_is_unbiased_across_seeds() {
    let model = SyntheticModel::additive(0.2, vec![0.8, -0.5, 0.3, 0.6])
        .with_interaction(0, 1, 0.7)
        .with_interaction(2, 3, -0.4);
    let oracle = DeterministicOracle::new(model.clone());
    let task = TaskSpec::synthetic("t", 4);
    let x = Instance::new((0..4).map(|_| FactorValue::numeric(1.0)).collect());
    let clamps = ClampCounter::new();

    let value = |s: &BackgroundSet| {
        let row = prism_core::oracle::QueryRow {
            values: x
                .values
                .iter()
                .enumerate()
                .map(|(j, v)| s.contains(j).then(|| v.clone()))
                .collect(),
        };
        logit(model.row_probability(&row), 1e-6).unwrap()
    };
    let exact = exact_shapley(value, 4, 0).unwrap();

    let seeds = 200;
    let k = 50;
    let mut estimates = Vec::with_capacity(seeds);
    let mut variance_sum = 0.0;
    for seed in 0..seeds {
        let mut rng = substream(seed as u64, &["unbiased"]);
        let est = prism_core::shapley::estimate_shapley(
            &oracle, &task, &x, 0, k, &mut rng, "x", &clamps,
        )
        .await
        .unwrap();
        variance_sum += est.std_error.unwrap().powi(2);
        estimates.push(est.phi);
    }
    let mean = estimates.iter().sum::<f64>() / seeds as f64;
    let combined_se = variance_sum.sqrt() / seeds as f64;
    assert!(
        (mean - exact).abs() <= 3.0 * combined_se,
        "mean {mean} vs exact {exact} (3se = {})",
        3.0 * combined_se
    );
}
