mod common;

use common::*;
use ndarray::Array2;
use npeff::pef::ColumnIndexMap;
use npeff::perturb::{
    apply_delta, build_lrm_perturbation, fwpa_perturb, probe_gradient, selectivity_scores,
    sign_pattern_with_direction, FwpaPlan, Sign,
};
use npeff::sandbox::{compute_lrm_pef, kl_divergence, Activation, SandboxModel};
use npeff::NpeffError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_model(seed: u64, dims: Vec<usize>) -> SandboxModel {
    SandboxModel::random(dims, Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn target_is_far_more_sensitive_than_rejected_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..10 {
        let g = random_matrix(&mut rng, 5, 50, 1.0);
        let p = build_lrm_perturbation(&g, &ColumnIndexMap::identity(50), 2, 0.35, 0.1).unwrap();
        let scores = selectivity_scores(&g, &p.reduced).unwrap();
        assert!(!p.rejected.is_empty());
        let worst = p.rejected.iter().map(|&k| scores[k]).fold(0.0f64, f64::max);
        assert!(scores[2] >= 1e6 * worst.max(1e-300), "{} vs {worst}", scores[2]);
    }
}

#[test]
fn kl_grows_quadratically_with_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for seed in 0..5 {
        let model = random_model(seed, vec![3, 4, 3]);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| gaussian(&mut rng, 3)).collect();
        let rows: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| compute_lrm_pef(&model, x, 0.0).unwrap().rows[0].clone())
            .collect();
        let m = model.num_params();
        let g = Array2::from_shape_vec((rows.len(), m), rows.concat()).unwrap();
        let p = build_lrm_perturbation(&g, &ColumnIndexMap::identity(m), 0, 0.35, 0.01).unwrap();
        let double: Vec<f64> = p.delta.iter().map(|v| 2.0 * v).collect();
        let x = &xs[0];
        let k1 = kl_divergence(&model, &apply_delta(&model, &p.delta, Sign::Plus).unwrap(), x).unwrap();
        let k2 = kl_divergence(&model, &apply_delta(&model, &double, Sign::Plus).unwrap(), x).unwrap();
        let ratio = k2 / k1;
        assert!((3.2..=4.8).contains(&ratio), "seed {seed}: {ratio}");
    }
}

#[test]
fn probe_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for seed in 0..5 {
        let model = random_model(10 + seed, vec![3, 3, 3]);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| gaussian(&mut rng, 3)).collect();
        let mut u = gaussian(&mut rng, model.num_params());
        let nu = dot(&u, &u).sqrt();
        u.iter_mut().for_each(|v| *v /= nu);
        let scale = 0.3;
        let grad = probe_gradient(&model, &xs, &u, scale).unwrap();
        let at: Vec<f64> = model.theta().iter().zip(&u).map(|(t, v)| t + scale * v).collect();
        // KL(p_theta || p_theta') summed over examples, reference frozen at theta
        let fd = finite_diff(&at, 1e-6, |t| {
            let q = model.with_theta(t.to_vec()).unwrap();
            xs.iter().map(|x| kl_divergence(&model, &q, x).unwrap()).sum()
        });
        for (a, b) in grad.iter().zip(&fd) {
            if b.abs() > 1e-8 {
                assert!((a - b).abs() / b.abs() <= 1e-4, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn opposite_probe_flips_signs() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let model = random_model(20, vec![3, 4, 3]);
    let xs: Vec<Vec<f64>> = (0..5).map(|_| gaussian(&mut rng, 3)).collect();
    let u = gaussian(&mut rng, model.num_params());
    let neg: Vec<f64> = u.iter().map(|v| -v).collect();
    let g = probe_gradient(&model, &xs, &u, 1e-3).unwrap();
    let plus = sign_pattern_with_direction(&model, &xs, &u, 1e-3).unwrap();
    let minus = sign_pattern_with_direction(&model, &xs, &neg, 1e-3).unwrap();
    let big = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for i in 0..g.len() {
        if g[i].abs() > 1e-3 * big {
            assert_eq!(plus[i], -minus[i], "coordinate {i}");
        }
    }
}

#[test]
fn degenerate_and_invalid_requests_fail() {
    let g = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 1.0, 1e-12]).unwrap();
    // the second row is nearly parallel to the first, so nothing is rejected
    assert!(build_lrm_perturbation(&g, &ColumnIndexMap::identity(2), 0, 0.35, 0.1).is_ok());
    let g = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, 0.7, 0.7]).unwrap();
    // rejecting both axes leaves nothing of the diagonal direction
    assert!(matches!(
        build_lrm_perturbation(&g, &ColumnIndexMap::identity(2), 2, 0.99, 0.1),
        Err(NpeffError::DegenerateDirection { component: 2 })
    ));
    assert!(matches!(
        build_lrm_perturbation(&g, &ColumnIndexMap::identity(2), 3, 0.35, 0.1),
        Err(NpeffError::ComponentIndex { index: 3, rank: 3 })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturbation_is_orthogonal_to_rejected(
        seed in any::<u64>(),
        r in 2usize..8,
        m in 8usize..40,
        threshold in 0.05f64..0.9,
        norm_target in 0.01f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_matrix(&mut rng, r, m, 1.0);
        let j = rng.random_range(0..r);
        let p = match build_lrm_perturbation(&g, &ColumnIndexMap::identity(m), j, threshold, norm_target) {
            Ok(p) => p,
            Err(NpeffError::DegenerateDirection { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        let d = &p.reduced;
        prop_assert!((dot(d, d).sqrt() - norm_target).abs() <= 1e-9);
        for &k in &p.rejected {
            let gk = g.row(k).to_vec();
            prop_assert!(dot(d, &gk).abs() <= 1e-8 * dot(&gk, &gk).sqrt());
            prop_assert!(abs_cos(&g.row(j).to_vec(), &gk) < threshold);
        }
        for k in 0..r {
            if k != j && !p.rejected.contains(&k) {
                prop_assert!(abs_cos(&g.row(j).to_vec(), &g.row(k).to_vec()) >= threshold);
            }
        }
    }

    #[test]
    fn expansion_places_values_at_kept_indices(seed in any::<u64>(), m in 3usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kept: Vec<usize> = (0..2 * m).filter(|_| rng.random::<f64>() < 0.6).collect();
        prop_assume!(kept.len() >= 2);
        let map = ColumnIndexMap::new(2 * m, kept.clone()).unwrap();
        let g = random_matrix(&mut rng, 2, kept.len(), 1.0);
        let p = build_lrm_perturbation(&g, &map, 0, 0.35, 0.1).unwrap();
        prop_assert_eq!(p.delta.len(), 2 * m);
        for i in 0..2 * m {
            match map.to_reduced(i) {
                Some(red) => prop_assert_eq!(p.delta[i], p.reduced[red]),
                None => prop_assert_eq!(p.delta[i], 0.0),
            }
        }
    }

    #[test]
    fn fwpa_is_a_coordinatewise_convex_combination(
        seed in any::<u64>(),
        m in 1usize..30,
        lambda in 0.0f64..=1.0,
        delta in 1e-3f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = gaussian(&mut rng, m);
        let plan = FwpaPlan {
            delta_mag: delta,
            lambda,
            sign_pattern: (0..m).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
            component_fisher: (0..m).map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random() }).collect(),
            model_fisher: (0..m).map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random() }).collect(),
            zero_guard: 1e-12,
        };
        let phi = fwpa_perturb(&theta, &plan).unwrap();
        for i in 0..m {
            let end = theta[i] + plan.sign_pattern[i] * delta;
            let (lo, hi) = if end < theta[i] { (end, theta[i]) } else { (theta[i], end) };
            prop_assert!(phi[i] >= lo - 1e-12 && phi[i] <= hi + 1e-12);
            if plan.component_fisher[i] == 0.0 && plan.model_fisher[i] > 0.0 && lambda < 1.0 {
                prop_assert!((phi[i] - theta[i]).abs() <= 1e-15);
            }
        }
    }
}
