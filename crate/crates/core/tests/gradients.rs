use ndarray::Array2;
use proptest::prelude::*;

use racl::diffgraph::{Graph, Tensor};
use racl::verify::{grad_check_target, GradTarget};

#[test]
fn all_targets_within_tolerance() {
    for seed in [0, 1, 2] {
        for t in GradTarget::ALL {
            let rep = grad_check_target(t, seed).unwrap();
            assert!(rep.coords_checked > 0);
            assert!(rep.max_rel_err <= t.tolerance(), "{t:?} seed {seed}: {}", rep.max_rel_err);
        }
    }
}

#[test]
fn reports_are_deterministic() {
    for t in GradTarget::ALL {
        let a = grad_check_target(t, 7).unwrap();
        let b = grad_check_target(t, 7).unwrap();
        assert_eq!(a.per_tensor, b.per_tensor);
    }
}

fn matmul_ce_grads(x: &Tensor, w: &Tensor, y: &[usize]) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let xi = g.param(x.clone());
    let wi = g.param(w.clone());
    let z = g.matmul(xi, wi).unwrap();
    let r = g.relu(z);
    let loss = g.softmax_cross_entropy(r, y).unwrap();
    g.backward(loss).unwrap();
    (g.grad(xi).unwrap().clone(), g.grad(wi).unwrap().clone())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Mean softmax cross-entropy of `x W` has gradient `x^T (p - onehot) / n`.
    #[test]
    fn linear_ce_gradient_matches_closed_form(
        n in 1usize..6, d in 1usize..5, m in 2usize..5, seed: u64,
    ) {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let x = Array2::from_shape_fn((n, d), |_| next());
        let w = Array2::from_shape_fn((d, m), |_| next());
        let y: Vec<usize> = (0..n).map(|i| i % m).collect();

        let mut g = Graph::new();
        let xi = g.param(x.clone());
        let wi = g.param(w.clone());
        let z = g.matmul(xi, wi).unwrap();
        let loss = g.softmax_cross_entropy(z, &y).unwrap();
        g.backward(loss).unwrap();

        let z = x.dot(&w);
        let mut delta = Array2::zeros((n, m));
        for i in 0..n {
            let mx = z.row(i).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let tot: f64 = z.row(i).iter().map(|v| (v - mx).exp()).sum();
            for j in 0..m {
                delta[[i, j]] = ((z[[i, j]] - mx).exp() / tot - if j == y[i] { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        let want = x.t().dot(&delta);
        for (a, b) in g.grad(wi).unwrap().iter().zip(want.iter()) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
        let want_x = delta.dot(&w.t());
        for (a, b) in g.grad(xi).unwrap().iter().zip(want_x.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic(seed: u64) {
        let f = |i: usize, j: usize| ((seed as f64 + 1.0) * (i as f64 * 0.37 + j as f64 * 1.13)).sin();
        let x = Array2::from_shape_fn((5, 4), |(i, j)| f(i, j));
        let w = Array2::from_shape_fn((4, 3), |(i, j)| f(j + 7, i));
        let y = [0, 1, 2, 0, 1];
        prop_assert_eq!(matmul_ce_grads(&x, &w, &y), matmul_ce_grads(&x, &w, &y));
    }
}
