//! Gaussian-process fits checked against dense direct-solve oracles.

mod common;

use bias_interrogator::gp::{select_hyperparams, GpModel, GridSpec, KernelParams};
use bias_interrogator::search_space::UnitPoint;
use common::{kernel_matrix, log_abs_det, oracle, oracle_posterior, random_points, unit_points};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn three_point_example_matches_direct_solve() {
    let xs = vec![vec![0.1], vec![0.5], vec![0.9]];
    let y = [0.0, 1.0, 0.0];
    let p = KernelParams::new(0.2, 1.0, 0.01).unwrap();
    let m = GpModel::fit(&unit_points(&xs), &y, p).unwrap();
    let o = oracle(&xs, &y, &p, m.jitter());
    let post = m.posterior(&UnitPoint::new(vec![0.5]).unwrap()).unwrap();
    let (mean, var) = oracle_posterior(&xs, &o, &p, &[0.5]);
    assert!((post.mean - mean).abs() <= 1e-8, "{} vs {mean}", post.mean);
    assert!((post.variance - var).abs() <= 1e-8, "{} vs {var}", post.variance);
    assert!((m.log_marginal_likelihood() - o.lml).abs() <= 1e-8);
}

#[test]
fn twenty_point_alpha_matches_direct_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let xs = random_points(&mut rng, 20, 5);
    let y: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
    let p = KernelParams::new(0.4, 1.0, 0.1).unwrap();
    let m = GpModel::fit(&unit_points(&xs), &y, p).unwrap();
    let o = oracle(&xs, &y, &p, m.jitter());
    let err = m
        .alpha()
        .iter()
        .zip(&o.alpha)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-8, "max abs alpha error {err}");
}

#[test]
fn random_instances_match_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6a05);
    for case in 0..50 {
        let n = rng.random_range(1..=30);
        let dim = rng.random_range(1..=10);
        let p = KernelParams::new(
            rng.random_range(0.1..1.0),
            rng.random_range(0.25..4.0),
            rng.random_range(0.01..0.5),
        )
        .unwrap();
        let xs = random_points(&mut rng, n, dim);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = GpModel::fit(&unit_points(&xs), &y, p).unwrap();
        let o = oracle(&xs, &y, &p, m.jitter());

        let lml_err = (m.log_marginal_likelihood() - o.lml).abs();
        assert!(lml_err <= 1e-8, "case {case}: LML error {lml_err}");
        for q in random_points(&mut rng, 5, dim) {
            let post = m.posterior(&UnitPoint::new(q.clone()).unwrap()).unwrap();
            let (mean, var) = oracle_posterior(&xs, &o, &p, &q);
            assert!(
                (post.mean - mean).abs() <= 1e-8,
                "case {case}: mean {} vs {mean}",
                post.mean
            );
            assert!(
                (post.variance - var).abs() <= 1e-8,
                "case {case}: var {} vs {var}",
                post.variance
            );
            assert!(post.variance <= p.signal_variance + p.noise_variance + 1e-6);
        }

        let dense = m.cholesky_dense();
        let target = m.regularized_kernel();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let llt: f64 = (0..n).map(|k| dense[i * n + k] * dense[j * n + k]).sum();
                num += (llt - target[i * n + j]).powi(2);
                den += target[i * n + j].powi(2);
            }
        }
        assert!((num / den).sqrt() <= 1e-6, "case {case}: reconstruction error");
    }
}

#[test]
fn zero_targets_leave_only_the_determinant_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs = random_points(&mut rng, 5, 3);
    let p = KernelParams::new(0.3, 1.0, 0.1).unwrap();
    let m = GpModel::fit(&unit_points(&xs), &[0.0; 5], p).unwrap();
    let k = kernel_matrix(&xs, p.lengthscale, p.signal_variance, p.noise_variance + m.jitter());
    let expected = -0.5 * log_abs_det(&k) - 2.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((m.log_marginal_likelihood() - expected).abs() <= 1e-8);
}

/// Grid-search recovery of the lengthscale used to draw the data.
#[test]
fn lengthscale_is_recovered_from_gp_draws() {
    let grid = GridSpec::default();
    let lengthscales = grid.lengthscales();
    let candidates = grid.expand().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1e57);
    let (n, dim, reps) = (60, 2, 50);
    let mut hits = 0;
    for rep in 0..reps {
        let true_idx = 3 + rep % 10;
        let ell = lengthscales[true_idx];
        let xs = random_points(&mut rng, n, dim);
        let k = kernel_matrix(&xs, ell, 1.0, 0.01);
        let l = common::cholesky(&k);
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|i| (0..=i).map(|j| l.at(i, j) * z[j]).sum()).collect();
        let chosen = select_hyperparams(&unit_points(&xs), &y, &candidates).unwrap();
        let idx = lengthscales
            .iter()
            .position(|&v| v == chosen.lengthscale)
            .expect("selection comes from the grid");
        if idx.abs_diff(true_idx) <= 1 {
            hits += 1;
        }
    }
    assert!(hits * 100 >= reps * 80, "recovered {hits} of {reps}");
}

#[test]
fn duplicated_inputs_without_noise_fit_after_jitter_escalation() {
    let xs = unit_points(&[vec![0.3, 0.3], vec![0.3, 0.3], vec![0.7, 0.1]]);
    let p = KernelParams::new(0.5, 1.0, 0.0).unwrap();
    let m = GpModel::fit(&xs, &[1.0, 1.0, 0.0], p).unwrap();
    assert!(m.jitter() >= 1e-8);
    assert!(m.jitter() <= 1e-2);
}
