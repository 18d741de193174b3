mod common;

use common::*;
use ndarray::Array2;
use npeff::eval::{
    avg_max_cosine, coeff_cosine_matrix, convergence_trace, histogram, kl_ratio, kmeans_baseline,
    ratio_of_means, sample_background, top_examples, tuning_purity,
};
use npeff::lrm::{decompose_observed, FactorizerConfig};
use npeff::pef::{preprocess, ColumnIndexMap};
use npeff::perturb::{apply_delta, Sign};
use npeff::sandbox::{generate_planted_pefs, Activation, PlantedSpec, SandboxModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Top-k by full sort of `(value desc, index asc)` pairs.
fn sort_oracle(col: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = col.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    pairs.into_iter().take(k).map(|p| p.1).collect()
}

fn blobs(seed: u64, k: usize, per: usize, dim: usize) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|c| (0..dim).map(|d| if d == c % dim { 20.0 * (1 + c / dim) as f64 } else { 0.0 }).collect())
        .collect();
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            rows.extend(center.iter().map(|v| v + rng.sample::<f64, _>(StandardNormal)));
            truth.push(c);
        }
    }
    (Array2::from_shape_vec((k * per, dim), rows).unwrap(), truth)
}

#[test]
fn kmeans_separates_blobs_exactly() {
    let (data, truth) = blobs(60, 4, 30, 5);
    let res = kmeans_baseline(&data, 4, 0, 100).unwrap();
    // clusters are a relabelling of the truth
    let mut map = vec![None; 4];
    for (i, &c) in res.assignments.iter().enumerate() {
        match map[c] {
            None => map[c] = Some(truth[i]),
            Some(t) => assert_eq!(t, truth[i]),
        }
    }
    let mut seen: Vec<usize> = map.into_iter().map(|t| t.unwrap()).collect();
    seen.sort_unstable();
    assert_eq!(seen, vec![0, 1, 2, 3]);
    for r in res.rankings() {
        assert_eq!(r.len(), 30);
    }
}

#[test]
fn kmeans_objective_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let data = random_matrix(&mut rng, 80, 4, 1.0);
    for seed in 0..5 {
        let res = kmeans_baseline(&data, 6, seed, 50).unwrap();
        for pair in res.objective_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{pair:?}");
        }
        // reported distances agree with the centroids
        for (i, &c) in res.assignments.iter().enumerate() {
            let d: f64 = data
                .row(i)
                .iter()
                .zip(res.centroids.row(c))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!((d - res.distances[i]).abs() <= 1e-9);
        }
    }
}

#[test]
fn kmeans_handles_duplicated_points() {
    // only two distinct points but four clusters: empty clusters get re-seeded
    let data = Array2::from_shape_vec(
        (8, 2),
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0, 5.0],
    )
    .unwrap();
    let res = kmeans_baseline(&data, 4, 3, 20).unwrap();
    assert_eq!(res.objective(), 0.0);
    assert!(res.distances.iter().all(|d| *d == 0.0));
    assert!(kmeans_baseline(&data, 9, 0, 5).is_err());
}

#[test]
fn random_labels_are_rarely_tuned() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let w = random_nonneg(&mut rng, 400, 50);
    let labels: Vec<i64> = (0..400).map(|_| rng.random_range(0..10)).collect();
    let purity = tuning_purity(&w, &labels, 16).unwrap();
    let tuned = purity.iter().filter(|p| p.tuned).count();
    assert_eq!(tuned, 0);
    let mean: f64 = purity.iter().map(|p| p.purity).sum::<f64>() / 50.0;
    assert!(mean < 0.5, "{mean}");
}

#[test]
fn planted_convergence_trace_rises_to_one() {
    let spec = PlantedSpec {
        num_components: 3,
        param_dim: 40,
        ranks_per_example: 1,
        num_examples: 40,
        noise_scale: 0.0,
        max_pairwise_cos: 0.3,
    };
    let inst = generate_planted_pefs(&spec, 5).unwrap();
    let set = preprocess(&inst.pefs, 10_000).unwrap();
    let mut config = FactorizerConfig::new(3);
    config.warmup_steps = 50;
    config.joint_steps = 400;
    let mut checkpoints = Vec::new();
    let dec = decompose_observed(&set, &ColumnIndexMap::identity(40), &config, |_, w| {
        checkpoints.push(w.clone())
    })
    .unwrap();
    checkpoints.push(dec.w.clone());
    let trace = convergence_trace(&checkpoints).unwrap();
    assert!((trace.last().unwrap() - 1.0).abs() <= 1e-12);
    // once W is being trained the trace climbs without large setbacks
    let joint: Vec<f64> = trace.iter().copied().skip(2).collect();
    for pair in joint.windows(2) {
        assert!(pair[1] >= pair[0] - 0.05, "{trace:?}");
    }
    assert!(avg_max_cosine(&dec.w, &inst.w_true).unwrap() >= 0.95);
}

#[test]
fn cosine_matrix_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let a = random_nonneg(&mut rng, 10, 3);
    let b = random_nonneg(&mut rng, 10, 4);
    let c = coeff_cosine_matrix(&a, &b).unwrap();
    assert_eq!(c.dim(), (3, 4));
    for i in 0..3 {
        for j in 0..4 {
            let want = abs_cos(&a.column(i).to_vec(), &b.column(j).to_vec());
            assert!((c[[i, j]] - want).abs() <= 1e-12);
        }
    }
    assert!((avg_max_cosine(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
}

#[test]
fn kl_ratio_of_targeted_change() {
    // a change to the bias of class 0 only matters for inputs where class 0
    // is uncertain; both signs give finite non-negative ratios
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let model = SandboxModel::random(vec![2, 3, 3], Activation::Tanh, &mut rng).unwrap();
    let inputs: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let w = random_nonneg(&mut rng, 30, 2);
    let mut delta = vec![0.0; model.num_params()];
    delta[model.bias_range(1).start] = 0.2;
    let bg = sample_background(30, 30, 0);
    for sign in [Sign::Plus, Sign::Minus] {
        let perturbed = apply_delta(&model, &delta, sign).unwrap();
        let r = kl_ratio(&model, &perturbed, &inputs, &w, 1, 5, &bg).unwrap();
        assert!(r.is_finite() && r > 0.0);
    }
    assert_eq!(kl_ratio(&model, &model, &inputs, &w, 0, 5, &bg).unwrap(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_examples_match_sort_oracle(seed in any::<u64>(), n in 1usize..40, k in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // few distinct values force ties
        let w = Array2::from_shape_fn((n, 2), |_| rng.random_range(0..4) as f64);
        let k = k.min(n);
        for j in 0..2 {
            let col = w.column(j).to_vec();
            prop_assert_eq!(top_examples(&w, j, k).unwrap(), sort_oracle(&col, k));
        }
    }

    #[test]
    fn purity_is_monotone_under_label_merging(seed in any::<u64>(), top_n in 1usize..20) {
        // merging labels can only raise purity
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_nonneg(&mut rng, 40, 3);
        let labels: Vec<i64> = (0..40).map(|_| rng.random_range(0..6)).collect();
        let merged: Vec<i64> = labels.iter().map(|l| l / 2).collect();
        let fine = tuning_purity(&w, &labels, top_n).unwrap();
        let coarse = tuning_purity(&w, &merged, top_n).unwrap();
        for (f, c) in fine.iter().zip(&coarse) {
            prop_assert!(c.purity >= f.purity);
            prop_assert!(!f.tuned || c.tuned);
        }
    }

    #[test]
    fn ratio_is_scale_and_order_invariant(
        seed in any::<u64>(),
        scale in 1e-3f64..1e3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let top = vec![3, 1, 7];
        let bg: Vec<usize> = (0..20).collect();
        let base = ratio_of_means(&values, &top, &bg).unwrap();
        let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
        prop_assert!((ratio_of_means(&scaled, &top, &bg).unwrap() - base).abs() <= 1e-9 * base);
        let mut shuffled = top.clone();
        shuffled.reverse();
        prop_assert!((ratio_of_means(&values, &shuffled, &bg).unwrap() - base).abs() <= 1e-12 * base);
    }

    #[test]
    fn histogram_counts_every_finite_value(seed in any::<u64>(), n in 0usize..100, bins in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        values.push(f64::INFINITY);
        let h = histogram(&values, bins);
        let total: usize = h.iter().map(|b| b.count).sum();
        prop_assert_eq!(total, n);
    }
}
