//! Largest singular value by power iteration.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffgraph::Tensor;
use crate::rng::{stream_rng, tags};

pub const DEFAULT_MAX_ITERS: usize = 5_000;
pub const DEFAULT_TOL: f64 = 1e-13;

/// Result of [`power_iteration`]: `sigma = |W v|` with `u = W v / sigma`.
#[derive(Debug, Clone)]
pub struct SpectralEstimate {
    pub sigma: f64,
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub iters: usize,
}

impl SpectralEstimate {
    /// Gradient of `sigma` with respect to `W` holding `u` and `v` fixed:
    /// the outer product `u v^T`.
    pub fn weight_grad(&self) -> Tensor {
        let (r, c) = (self.u.len(), self.v.len());
        Array2::from_shape_fn((r, c), |(i, j)| self.u[i] * self.v[j])
    }
}

fn normalize(v: &mut Array1<f64>) -> f64 {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        *v /= n;
    }
    n
}

/// Power iteration on `W^T W`.
///
/// Iterates `v <- normalize(W^T W v)` until the estimate `|W v|` changes by
/// at most `tol` relative, or `max_iters` is reached. The start vector is a
/// fixed pseudo-random direction so results are reproducible. An all-zero
/// matrix yields `sigma = 0`.
pub fn power_iteration(w: &Tensor, max_iters: usize, tol: f64) -> SpectralEstimate {
    let (rows, cols) = w.dim();
    let mut rng = stream_rng(0, tags::POWER_ITER, cols as u64);
    let mut v: Array1<f64> = Array1::from_shape_fn(cols, |_| rng.sample(StandardNormal));
    normalize(&mut v);
    if w.iter().all(|x| *x == 0.0) {
        return SpectralEstimate {
            sigma: 0.0,
            u: Array1::zeros(rows),
            v,
            iters: 0,
        };
    }
    let mut sigma: f64 = 0.0;
    let mut iters = 0;
    for it in 1..=max_iters.max(1) {
        iters = it;
        let wv = w.dot(&v);
        let mut next = w.t().dot(&wv);
        if normalize(&mut next) == 0.0 {
            // v landed in the null space; any other start works.
            next = Array1::from_shape_fn(cols, |_| rng.sample(StandardNormal));
            normalize(&mut next);
        }
        v = next;
        let est = w.dot(&v).dot(&w.dot(&v)).sqrt();
        let done = (est - sigma).abs() <= tol * est;
        sigma = est;
        if done {
            break;
        }
    }
    let mut u = w.dot(&v);
    let sigma_final = normalize(&mut u);
    SpectralEstimate {
        sigma: sigma_final,
        u,
        v,
        iters,
    }
}

/// Spectral norm with the default iteration budget.
pub fn spectral_norm(w: &Tensor) -> f64 {
    power_iteration(w, DEFAULT_MAX_ITERS, DEFAULT_TOL).sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_and_diagonal() {
        assert!((spectral_norm(&Array2::eye(4)) - 1.0).abs() < 1e-12);
        let d = Array2::from_diag(&array![5.0, 2.0, 1.0]);
        assert!((spectral_norm(&d) - 5.0).abs() < 1e-12);
        let d = Array2::from_diag(&array![3.0, 1.0]);
        assert!((spectral_norm(&d) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        assert_eq!(spectral_norm(&Array2::zeros((3, 5))), 0.0);
    }

    #[test]
    fn rectangular_rank_one() {
        // [1 2; 2 4; 0 0] = [1,2,0]^T [1,2]: sigma = sqrt(5) * sqrt(5).
        let w = array![[1.0, 2.0], [2.0, 4.0], [0.0, 0.0]];
        assert!((spectral_norm(&w) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn weight_grad_is_outer_product_of_singular_vectors() {
        let w = array![[2.0, 0.0], [0.0, 1.0]];
        let est = power_iteration(&w, 100, 1e-15);
        let g = est.weight_grad();
        assert!((g[[0, 0]].abs() - 1.0).abs() < 1e-9);
        assert!(g[[1, 1]].abs() < 1e-9);
    }
}
