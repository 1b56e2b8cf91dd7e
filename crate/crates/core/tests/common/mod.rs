//! Test-only oracles and fixtures, written independently of the library.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use racl::dataio::{gen_synthetic, Dataset, DatasetSpec};
use racl::search::{retrain, SearchConfig};
use racl::supernet::{discretize, ArchDistribution, CellGenotype, Genotype, Network, OperationKind};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Standard normal by Box-Muller.
pub fn gauss(r: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - r.random::<f64>();
    let u2: f64 = r.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn randn(rows: usize, cols: usize, r: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| gauss(r))
}

/// Singular values by one-sided (Hestenes) Jacobi rotations, descending.
pub fn jacobi_singular_values(w: &Array2<f64>) -> Vec<f64> {
    // Work on the orientation with fewer columns.
    let mut a = if w.ncols() <= w.nrows() { w.clone() } else { w.t().to_owned() };
    let n = a.ncols();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..a.nrows() {
                    alpha += a[[i, p]] * a[[i, p]];
                    beta += a[[i, q]] * a[[i, q]];
                    gamma += a[[i, p]] * a[[i, q]];
                }
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..a.nrows() {
                    let (x, y) = (a[[i, p]], a[[i, q]]);
                    a[[i, p]] = c * x - s * y;
                    a[[i, q]] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|j| a.column(j).dot(&a.column(j)).sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Normal CDF from a Taylor series of erf near zero and a Lentz continued
/// fraction for erfc in the tails.
pub fn phi(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    if x.abs() < 2.0 {
        // erf(x) = 2/sqrt(pi) sum (-1)^n x^(2n+1) / (n! (2n+1))
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        0.5 * (1.0 + 2.0 / std::f64::consts::PI.sqrt() * sum)
    } else {
        let ax = x.abs();
        // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
        let tiny = 1e-300;
        let mut f = ax;
        let mut c = ax;
        let mut d = 0.0;
        for k in 1..500 {
            let a = k as f64 / 2.0;
            d = ax + a * d;
            d = if d.abs() < tiny { tiny } else { d };
            c = ax + a / c;
            c = if c.abs() < tiny { tiny } else { c };
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let erfc = (-ax * ax).exp() / std::f64::consts::PI.sqrt() / f;
        if x > 0.0 {
            1.0 - 0.5 * erfc
        } else {
            0.5 * erfc
        }
    }
}

/// Synthetic desk data for `seed`.
pub fn desk_data(seed: u64) -> (Dataset, Dataset) {
    let spec = DatasetSpec {
        seed,
        ..DatasetSpec::default()
    };
    gen_synthetic(&spec).unwrap()
}

/// A discrete network retrained for a few epochs, used as an attack target.
/// Every node reads a weighted edge from its left neighbour and a skip edge,
/// which trains to about 90% clean accuracy in 5 epochs.
pub fn small_trained_network(seed: u64, epochs: usize) -> (Network, Dataset) {
    let mut cfg = SearchConfig::default();
    cfg.seed = seed;
    cfg.data.seed = seed;
    cfg.retrain.epochs = epochs;
    let (train, test) = gen_synthetic(&cfg.data).unwrap();
    let dist = ArchDistribution::new(&cfg.supernet, cfg.arch_init).unwrap();
    let cell: CellGenotype = (0..cfg.supernet.n_nodes)
        .map(|k| [(k, OperationKind::SepLinB), (k + 1, OperationKind::Skip)])
        .collect();
    let genotype = Genotype {
        normal: cell.clone(),
        reduce: cell,
        ..discretize(&cfg.supernet, &dist, cfg.scoring, seed)
    };
    let out = retrain(&genotype, &cfg, false, &train, None).unwrap();
    (out.network, test)
}
