mod common;

use common::{gauss, rng};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::Rng;

use racl::lognormal::{mc_oracle, BoundDist, Combine, LogNormalParams, McConfig};
use racl::supernet::ops::weight_mask;
use racl::supernet::{
    cell_node_bounds, discretize, edge_bound_dist, network_bound_dist, sample_arch, sampled_bound, ArchDistribution,
    ArchInit, ArchSample, CellArch, CellType, Genotype, Lambdas, Model, Network, OperationKind, Scoring,
    SupernetSpec, SupernetWeights,
};

/// A distribution with every parameter drawn at random.
fn random_dist(spec: &SupernetSpec, seed: u64, mu_spread: f64, sigma_max: f64) -> ArchDistribution {
    let mut r = rng(seed);
    let mut d = ArchDistribution::new(spec, ArchInit::default()).unwrap();
    for (k, t) in d.tensors_mut().into_iter().enumerate() {
        let is_sigma = k % 2 == 1;
        for v in t.iter_mut() {
            *v = if is_sigma {
                (0.02 + (sigma_max - 0.02) * r.random::<f64>()).ln()
            } else {
                *v + mu_spread * (2.0 * r.random::<f64>() - 1.0)
            };
        }
    }
    d
}

fn l2(v: ndarray::ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Output differences never exceed the sampled bound (network part).
    #[test]
    fn sampled_bound_holds_on_probes(seed in 0u64..1_000, scale in 0.001f64..0.5) {
        let spec = SupernetSpec::desk();
        let weights = SupernetWeights::init(&spec, seed, 0.8).unwrap();
        let dist = random_dist(&spec, seed, 1.0, 0.4);
        let sample = sample_arch(&spec, &dist, seed, 0);
        let lambdas = Lambdas::compute(&spec, &weights);
        let c = racl::supernet::constant_c(&weights);
        let bound = sampled_bound(&spec, &sample, &lambdas, c) / 2f64.sqrt();
        let net = Network::new(spec.clone(), weights, sample).unwrap();
        let mut r = rng(seed ^ 0xabc);
        let x = Array2::from_shape_fn((20, 16), |_| r.random::<f64>());
        let d = Array2::from_shape_fn((20, 16), |_| scale * gauss(&mut r));
        let fa = net.logits(&x).unwrap();
        let fb = net.logits(&(&x + &d)).unwrap();
        for i in 0..20 {
            let ratio = l2((&fb.row(i) - &fa.row(i)).view()) / l2(d.row(i));
            prop_assert!(ratio <= bound * (1.0 + 1e-12), "ratio {} > bound {}", ratio, bound);
        }
    }

    /// Raising any `mu_alpha` of an operation with a positive constant
    /// raises the network bound's `mu`.
    #[test]
    fn bound_mu_increases_with_mu_alpha(seed in 0u64..1_000, edge in 0usize..14, op in 0usize..7, reduce: bool) {
        let spec = SupernetSpec::desk();
        let weights = SupernetWeights::init(&spec, seed, 0.5).unwrap();
        let lambdas = Lambdas::compute(&spec, &weights);
        let mut dist = random_dist(&spec, seed, 0.5, 0.3);
        let base = network_bound_dist(&spec, &dist, &lambdas, 1.0).unwrap();
        let t = if reduce { CellType::Reduce } else { CellType::Normal };
        dist.cell_mut(t).mu_alpha[[edge, op]] += 0.05;
        let up = network_bound_dist(&spec, &dist, &lambdas, 1.0).unwrap();
        prop_assert!(up.params().unwrap().mu() > base.params().unwrap().mu());
    }

    /// A common shift of one edge's `mu_alpha` leaves that edge's chosen
    /// operation unchanged.
    #[test]
    fn per_edge_argmax_is_shift_invariant(seed in 0u64..1_000, edge in 0usize..14, shift in -3.0f64..3.0) {
        let spec = SupernetSpec::desk();
        let dist = random_dist(&spec, seed, 1.5, 0.3);
        let best = |d: &ArchDistribution| {
            let s = racl::supernet::edge_scores(d.cell(CellType::Normal), Scoring::Expectation);
            let row = s.row(edge);
            (0..7).fold(0, |b, o| if row[o] > row[b] { o } else { b })
        };
        let mut shifted = dist.clone();
        shifted.normal.mu_alpha.row_mut(edge).mapv_inplace(|v| v + shift);
        prop_assert_eq!(best(&dist), best(&shifted));
    }

    /// The mixture forward of a genotype's degenerate sample equals a plain
    /// discrete evaluation of the chosen operations.
    #[test]
    fn genotype_forward_matches_discrete_evaluation(seed in 0u64..1_000) {
        let spec = SupernetSpec::desk();
        let dist = random_dist(&spec, seed, 2.0, 0.3);
        let g = discretize(&spec, &dist, Scoring::Expectation, seed);
        let weights = SupernetWeights::init(&spec, seed, 0.7).unwrap();
        let net = Network::discrete(spec.clone(), weights.clone(), &g).unwrap();
        let mut r = rng(seed);
        let x = Array2::from_shape_fn((5, 16), |_| r.random::<f64>());
        let a = net.logits(&x).unwrap();
        let b = discrete_eval(&spec, &weights, &g, &x);
        let err = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(err <= 1e-12, "max diff {}", err);
    }
}

/// Independent evaluation of a discrete network with plain ndarray code.
fn discrete_eval(spec: &SupernetSpec, w: &SupernetWeights, g: &Genotype, x: &Array2<f64>) -> Array2<f64> {
    let fold = |v: &Array2<f64>, out: usize| {
        let k = v.ncols() / out;
        let mut r = Array2::zeros((v.nrows(), out));
        for b in 0..k {
            r += &v.slice(ndarray::s![.., b * out..(b + 1) * out]);
        }
        r / (k as f64).sqrt()
    };
    let op = |kind: OperationKind, v: &Array2<f64>, stride: usize, weight: Option<&Array2<f64>>| -> Array2<f64> {
        let (n, d) = v.dim();
        match (kind, stride) {
            (OperationKind::Skip, 1) => v.clone(),
            (OperationKind::Skip, _) => Array2::from_shape_fn((n, d / 2), |(i, j)| v[[i, 2 * j]]),
            (OperationKind::AvgPool, 1) => {
                Array2::from_shape_fn((n, d), |(i, j)| (v[[i, (j + d - 1) % d]] + v[[i, j]] + v[[i, (j + 1) % d]]) / 3.0)
            }
            (OperationKind::AvgPool, _) => Array2::from_shape_fn((n, d / 2), |(i, j)| 0.5 * (v[[i, 2 * j]] + v[[i, 2 * j + 1]])),
            (OperationKind::MaxPool, 1) => Array2::from_shape_fn((n, d), |(i, j)| {
                let p = j % (d / 2);
                let (a, b) = (v[[i, 2 * p]], v[[i, 2 * p + 1]]);
                if j < d / 2 { a.max(b) } else { a.min(b) }
            }),
            (OperationKind::MaxPool, _) => Array2::from_shape_fn((n, d / 2), |(i, j)| v[[i, 2 * j]].max(v[[i, 2 * j + 1]])),
            (OperationKind::Zero, _) => unreachable!(),
            (k, s) => {
                let wm = weight.unwrap() * &weight_mask(k, d, s);
                v.mapv(|t| t.max(0.0)).dot(&wm)
            }
        }
    };
    let in_widths = spec.in_widths();
    let mut prev = x.clone();
    for c in 0..spec.n_cells {
        let input = fold(&prev, in_widths[c]);
        let mut nodes = vec![input.clone(), input];
        for (k, pair) in g.cell(spec.cell_type(c)).iter().enumerate() {
            let to = k + 2;
            let mut acc: Option<Array2<f64>> = None;
            for &(pred, kind) in pair {
                let e = spec.edge_index(pred, to);
                let stride = if spec.is_reduction(c) && pred < 2 { 2 } else { 1 };
                let weight = kind.weight_slot().map(|s| &w.ops[c][e][s]);
                let out = op(kind, &nodes[pred], stride, weight);
                acc = Some(match acc {
                    Some(a) => a + out,
                    None => out,
                });
            }
            nodes.push(acc.unwrap());
        }
        let views: Vec<_> = nodes[2..].iter().map(|n| n.view()).collect();
        prev = ndarray::concatenate(Axis(1), &views).unwrap();
    }
    prev.dot(&w.classifier_w) + &w.classifier_b
}

/// Score of one `(edge, op)` pair under expectation scoring.
fn expected_score(cell: &CellArch, edge: usize, op: usize) -> f64 {
    let m = |mu: f64, ls: f64| (mu + 0.5 * (2.0 * ls).exp()).exp();
    m(cell.mu_beta[[edge, 0]], cell.log_sigma_beta[[edge, 0]]) * m(cell.mu_alpha[[edge, op]], cell.log_sigma_alpha[[edge, op]])
}

#[test]
fn discretize_matches_exhaustive_enumeration() {
    // Two intermediate nodes: node 2 has predecessors {0, 1}, node 3 has {0, 1, 2}.
    let spec = SupernetSpec {
        n_cells: 2,
        n_nodes: 2,
        width: 8,
        input_dim: 8,
        classes: 3,
        reduction_cells: vec![1],
    };
    for seed in 0..40 {
        let dist = random_dist(&spec, seed, 2.0, 0.5);
        let g = discretize(&spec, &dist, Scoring::Expectation, seed);
        for t in [CellType::Normal, CellType::Reduce] {
            let cell = dist.cell(t);
            for (k, chosen) in g.cell(t).iter().enumerate() {
                let to = k + 2;
                let mut best = (f64::NEG_INFINITY, [(0, OperationKind::Zero); 2]);
                for i in 0..to {
                    for j in i + 1..to {
                        for oi in 0..7 {
                            for oj in 0..7 {
                                let s = expected_score(cell, spec.edge_index(i, to), oi)
                                    + expected_score(cell, spec.edge_index(j, to), oj);
                                if s > best.0 {
                                    best = (
                                        s,
                                        [
                                            (i, OperationKind::from_index(oi).unwrap()),
                                            (j, OperationKind::from_index(oj).unwrap()),
                                        ],
                                    );
                                }
                            }
                        }
                    }
                }
                assert_eq!(*chosen, best.1, "seed {seed} {t:?} node {to}");
            }
        }
    }
}

#[test]
fn sample_arch_examples() {
    let spec = SupernetSpec::desk();
    let dist = ArchDistribution::new(
        &spec,
        ArchInit::Constant {
            mu_alpha: 0.2,
            mu_beta: 0.2,
            sigma: 0.3,
        },
    )
    .unwrap();
    let mut logs = Vec::new();
    let mut stream = 0;
    while logs.len() < 100_000 {
        let s = sample_arch(&spec, &dist, 5, stream);
        for c in &s.cells {
            logs.extend(c.alpha.iter().map(|a| a.ln()));
        }
        stream += 1;
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - 0.2).abs() <= 3.0 * sd / n.sqrt(), "mean {mean}");
    assert!((sd - 0.3).abs() < 0.005);

    assert_eq!(sample_arch(&spec, &dist, 5, 9), sample_arch(&spec, &dist, 5, 9));
    let tight = ArchDistribution::new(
        &spec,
        ArchInit::Constant {
            mu_alpha: 0.7,
            mu_beta: -0.1,
            sigma: 1e-8,
        },
    )
    .unwrap();
    let s = sample_arch(&spec, &tight, 1, 0);
    assert!(s.cells[0].alpha.iter().all(|a| (a / 0.7f64.exp() - 1.0).abs() < 1e-6));
    assert!(s.cells[3].beta.iter().all(|b| (b / (-0.1f64).exp() - 1.0).abs() < 1e-6));
}

#[test]
fn full_edge_bound_matches_monte_carlo_mean() {
    let spec = SupernetSpec::desk();
    let weights = SupernetWeights::init(&spec, 2, 0.5).unwrap();
    let lambdas = Lambdas::compute(&spec, &weights);
    let dist = ArchDistribution::new(
        &spec,
        ArchInit::Constant {
            mu_alpha: 0.0,
            mu_beta: 0.0,
            sigma: 0.15,
        },
    )
    .unwrap();
    // Edge (2, 3) of cell 0 carries all eight kinds at stride 1.
    let e = spec.edge_index(2, 3);
    let lam = lambdas.cells[0].row(e);
    let fw = edge_bound_dist(&dist.normal, e, lam);
    let terms: Vec<LogNormalParams> = (0..8)
        .filter(|&o| lam[o] > 0.0)
        .map(|o| {
            let a = dist.normal.alpha(e, o);
            LogNormalParams::new(a.mu() + lam[o].ln(), a.var()).unwrap()
        })
        .collect();
    assert_eq!(terms.len(), 7);
    let mc = mc_oracle(&terms, Combine::Sum, &McConfig { n: 1_000_000, seed: 3, tag: 0 }, None).unwrap();
    let p = fw.params().unwrap();
    assert!((p.implied_mean() - mc.mean).abs() <= 3.0 * mc.mean_se);
}

#[test]
fn node_bound_examples() {
    let spec = SupernetSpec {
        n_cells: 1,
        n_nodes: 1,
        width: 4,
        input_dim: 4,
        classes: 2,
        reduction_cells: vec![],
    };
    let dist = ArchDistribution::new(
        &spec,
        ArchInit::Constant {
            mu_alpha: 0.3,
            mu_beta: 0.0,
            sigma: 1e-300,
        },
    )
    .unwrap();
    // Only Skip on edge (0, 2) has a nonzero constant; edge (1, 2) is all zero.
    let mut lambdas = Tensor::zeros((2, 8));
    lambdas[[0, OperationKind::Skip.index()]] = 1.0;
    let nodes = cell_node_bounds(&spec, &dist.normal, &lambdas);
    let p = nodes[0].params().unwrap();
    assert!((p.mu() - 0.3).abs() < 1e-12 && p.var() == 0.0);
    let edge = edge_bound_dist(&dist.normal, 0, lambdas.row(0));
    assert_eq!(edge, nodes[0]);
    assert!(edge_bound_dist(&dist.normal, 1, lambdas.row(1)).is_zero());
    let weights = SupernetWeights::init(&spec, 0, 0.5).unwrap();
    let mut l = Lambdas::compute(&spec, &weights);
    l.cells[0] = lambdas;
    let net = network_bound_dist(&spec, &dist, &l, 1.0).unwrap();
    assert_eq!(net, nodes[0]);
}

type Tensor = Array2<f64>;

#[test]
fn zero_only_network_has_zero_bound() {
    let spec = SupernetSpec::desk();
    let weights = SupernetWeights::init(&spec, 0, 0.5).unwrap();
    let lambdas = Lambdas::compute(&spec, &weights);
    let dist = ArchDistribution::new(&spec, ArchInit::default()).unwrap();
    let mut s: ArchSample = sample_arch(&spec, &dist, 0, 0);
    for c in &mut s.cells {
        for (k, mut row) in c.alpha.rows_mut().into_iter().enumerate() {
            if k < 3 {
                row.fill(0.0);
                row[OperationKind::Zero.index()] = 1.0;
            }
        }
    }
    // Node 2 sees only edges 0 and 1, both Zero-only, in every cell.
    assert_eq!(sampled_bound(&spec, &s, &lambdas, 1.0), 0.0);
    assert!(matches!(BoundDist::Zero.product(&BoundDist::Zero), BoundDist::Zero));
}
