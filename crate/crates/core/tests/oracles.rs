mod common;

use common::{jacobi_singular_values, phi, randn, rng};
use ndarray::{array, Array2};
use proptest::prelude::*;
use racl::lognormal::{normal_cdf, normal_quantile};
use racl::supernet::{constant_c, power_iteration, spectral_norm, SupernetSpec, SupernetWeights};

#[test]
fn jacobi_oracle_on_known_matrices() {
    let sv = jacobi_singular_values(&array![[3.0, 0.0], [0.0, -1.0]]);
    assert!((sv[0] - 3.0).abs() < 1e-14 && (sv[1] - 1.0).abs() < 1e-14);
    // Rank one: u v^T with |u| = 5, |v| = sqrt(2).
    let sv = jacobi_singular_values(&array![[3.0, 3.0], [4.0, 4.0], [0.0, 0.0]]);
    assert!((sv[0] - 5.0 * 2f64.sqrt()).abs() < 1e-13 && sv[1].abs() < 1e-13);
}

#[test]
fn power_iteration_examples() {
    assert!((spectral_norm(&Array2::eye(4)) - 1.0).abs() < 1e-14);
    let d = Array2::from_diag(&array![5.0, 2.0, 1.0]);
    assert!((spectral_norm(&d) - 5.0).abs() < 1e-12);
    assert_eq!(spectral_norm(&Array2::zeros((3, 3))), 0.0);
}

#[test]
fn power_iteration_matches_jacobi_on_random_matrices() {
    let mut r = rng(11);
    let mut checked = 0;
    while checked < 50 {
        let (m, n) = (r.random_range(2..=16), r.random_range(2..=16));
        let w = randn(m, n, &mut r);
        let sv = jacobi_singular_values(&w);
        if (sv[0] - sv[1]) / sv[0] < 0.05 {
            continue;
        }
        let est = power_iteration(&w, 20_000, 1e-15);
        assert!(((est.sigma - sv[0]) / sv[0]).abs() <= 1e-8, "{m}x{n}: {} vs {}", est.sigma, sv[0]);
        checked += 1;
    }
}

#[test]
fn constant_c_examples() {
    let spec = SupernetSpec::desk();
    let mut w = SupernetWeights::init(&spec, 0, 0.5).unwrap();
    let k = spec.classifier_in();
    let mut eye = Array2::zeros((k, spec.classes));
    for i in 0..spec.classes {
        eye[[i, i]] = 1.0;
    }
    w.classifier_w = eye.clone();
    assert!((constant_c(&w) - 2f64.sqrt()).abs() < 1e-12);
    eye[[0, 0]] = 2.0;
    w.classifier_w = eye;
    assert!((constant_c(&w) - 2.0 * 2f64.sqrt()).abs() < 1e-12);
    let w = SupernetWeights::init(&spec, 3, 0.5).unwrap();
    let sv = jacobi_singular_values(&w.classifier_w);
    assert!((constant_c(&w) / (2f64.sqrt() * sv[0]) - 1.0).abs() < 1e-8);
}

#[test]
fn phi_oracle_agrees_across_branches() {
    // Series and continued fraction meet at |z| = 2 sqrt 2.
    let z = 2.0 * 2f64.sqrt();
    let slope = (-z * z / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    assert!((phi(z + 1e-9) - phi(z - 1e-9) - 2e-9 * slope).abs() < 1e-14);
    assert!((phi(0.0) - 0.5).abs() < 1e-16);
    assert!((phi(1.959963984540054) - 0.975).abs() < 1e-14);
}

proptest! {
    #[test]
    fn normal_cdf_matches_independent_oracle(z in -8.0f64..8.0) {
        prop_assert!((normal_cdf(z) - phi(z)).abs() <= 1e-12);
    }

    #[test]
    fn quantile_matches_independent_oracle(p in 1e-9f64..(1.0 - 1e-9)) {
        let z = normal_quantile(p).unwrap();
        // |Phi(z) - p| is bounded by the oracle's own accuracy plus rounding of p.
        prop_assert!((phi(z) - p).abs() <= 1e-13 + 4.0 * f64::EPSILON * p);
    }
}

use rand::Rng;
