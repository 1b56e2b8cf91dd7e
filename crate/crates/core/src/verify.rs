//! Verification suites shared by the command line and the test harness.
//!
//! Each suite draws its cases from a seed and reports one row per checked
//! quantity, so a breach can be traced to the case that produced it.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{grad_check, GradCheckConfig, GradCheckReport, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::lognormal::{
    fw_sum, ks_against_normal, ks_sampling_error, ln_cdf, ln_product, mc_oracle, normal_quantile, Combine,
    LogNormalParams, McConfig,
};
use crate::rng::{mix, stream_rng, tags};
use crate::search::{augmented_lagrangian, constraint_node, AdmmState};
use crate::supernet::{
    bound_graph, constant_c, network_bound_dist, sample_arch, sample_reparam, ln_sampled_bound, ArchDistribution,
    ArchInit, ArchParamIds, Lambdas, Model, Network, Supernet, SupernetSpec, SupernetWeights, WeightIds,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Fw,
    Product,
    Bound,
    Constraint,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fw" => Ok(Suite::Fw),
            "product" => Ok(Suite::Product),
            "bound" => Ok(Suite::Bound),
            "constraint" => Ok(Suite::Constraint),
            _ => Err(Error::domain(format!("unknown suite `{s}`"))),
        }
    }
}

/// One checked quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub suite: String,
    pub case: usize,
    pub metric: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    fn check(&mut self, suite: &str, case: usize, metric: &str, value: f64, tolerance: f64) {
        self.cases.push(CaseResult {
            suite: suite.into(),
            case,
            metric: metric.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        });
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.pass).collect()
    }

    /// Largest `value / tolerance` per metric.
    pub fn worst(&self, metric: &str) -> f64 {
        self.cases
            .iter()
            .filter(|c| c.metric == metric)
            .map(|c| c.value / c.tolerance)
            .fold(0.0, f64::max)
    }
}

pub const FW_SAMPLES: usize = 1_000_000;
pub const BOUND_SAMPLES: usize = 100_000;
pub const PROBES_PER_SAMPLE: usize = 100;

fn random_terms(rng: &mut impl Rng, max_terms: usize) -> Vec<LogNormalParams> {
    let k = rng.random_range(1..=max_terms);
    (0..k)
        .map(|_| LogNormalParams::new(rng.random_range(-1.0..=1.0), rng.random_range(0.0025..=0.09)).expect("finite"))
        .collect()
}

pub fn run_suite(suite: Suite, n: usize, seed: u64) -> Result<SuiteReport> {
    match suite {
        Suite::Fw => fw_suite(n, seed),
        Suite::Product => product_suite(n, seed),
        Suite::Bound => bound_suite(n, seed),
        Suite::Constraint => constraint_suite(n, seed),
    }
}

/// Fenton-Wilkinson sums against sampled sums: moments within 3 standard
/// errors and KS distance of the log-sum at most 0.05.
pub fn fw_suite(n: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = stream_rng(seed, tags::PROBE, 0);
    let mut rep = SuiteReport::default();
    for case in 0..n {
        let terms = random_terms(&mut rng, 8);
        let fw = fw_sum(&terms)?;
        let cfg = McConfig {
            n: FW_SAMPLES,
            seed,
            tag: case as u64,
        };
        let mc = mc_oracle(&terms, Combine::Sum, &cfg, Some(&fw))?;
        rep.check("fw", case, "mean_se", (fw.implied_mean() - mc.mean).abs() / mc.mean_se, 3.0);
        rep.check("fw", case, "variance_se", (fw.implied_variance() - mc.variance).abs() / mc.variance_se, 3.0);
        rep.check("fw", case, "ks", mc.ks.expect("reference given"), 0.05);
    }
    Ok(rep)
}

/// Exact products against sampled products: KS within three times the KS
/// sampling error.
pub fn product_suite(n: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = stream_rng(seed, tags::PROBE, 1);
    let mut rep = SuiteReport::default();
    for case in 0..n {
        let a = random_terms(&mut rng, 1)[0];
        let b = random_terms(&mut rng, 1)[0];
        let p = ln_product(&a, &b);
        let cfg = McConfig {
            n: FW_SAMPLES,
            seed,
            tag: 1_000_000 + case as u64,
        };
        let mc = mc_oracle(&[a, b], Combine::Product, &cfg, Some(&p))?;
        rep.check("product", case, "ks", mc.ks.expect("reference given"), 3.0 * ks_sampling_error(FW_SAMPLES));
    }
    Ok(rep)
}

/// Output-difference probes against the sampled bound on the desk supernet:
/// `n` architecture samples, [`PROBES_PER_SAMPLE`] pairs each. The checked
/// value is the number of violations.
pub fn bound_suite(n: usize, seed: u64) -> Result<SuiteReport> {
    let spec = SupernetSpec::desk();
    let weights = SupernetWeights::init(&spec, seed, 0.8)?;
    let lambdas = Lambdas::compute(&spec, &weights);
    let c = constant_c(&weights);
    let dist = ArchDistribution::new(&spec, ArchInit::default())?;
    let mut rep = SuiteReport::default();
    let mut rng = stream_rng(seed, tags::PROBE, 2);
    for case in 0..n {
        let sample = sample_arch(&spec, &dist, seed, case as u64);
        let bound = ln_sampled_bound(&spec, &sample, &lambdas, c).exp() / 2f64.sqrt();
        let net = Network::new(spec.clone(), weights.clone(), sample)?;
        let x = Array2::from_shape_fn((PROBES_PER_SAMPLE, spec.input_dim), |_| rng.random::<f64>());
        let scale = 10f64.powf(rng.random_range(-3.0..0.0));
        let d = Array2::from_shape_fn(x.dim(), |_| scale * rng.sample::<f64, _>(StandardNormal));
        let fa = net.logits(&x)?;
        let fb = net.logits(&(&x + &d))?;
        let mut violations = 0;
        for i in 0..PROBES_PER_SAMPLE {
            let df = &fb.row(i) - &fa.row(i);
            let ratio = df.dot(&df).sqrt() / d.row(i).dot(&d.row(i)).sqrt();
            if ratio > bound * (1.0 + 1e-12) {
                violations += 1;
            }
        }
        rep.check("bound", case, "violations", violations as f64, 0.0);
    }
    Ok(rep)
}

/// The closed-form network bound against [`BOUND_SAMPLES`] sampled bounds,
/// for `n` random architecture distributions: log-mean within 3 standard
/// errors, KS at most 0.05, and `Pr[bound <= x]` within 0.01 at the 0.1,
/// 0.5 and 0.9 quantiles of the closed form.
pub fn constraint_suite(n: usize, seed: u64) -> Result<SuiteReport> {
    let spec = SupernetSpec::desk();
    let weights = SupernetWeights::init(&spec, seed, 0.5)?;
    let lambdas = Lambdas::compute(&spec, &weights);
    let c = constant_c(&weights);
    let mut rep = SuiteReport::default();
    let mut rng = stream_rng(seed, tags::PROBE, 3);
    for case in 0..n {
        let mut dist = ArchDistribution::new(&spec, ArchInit::default())?;
        for (k, t) in dist.tensors_mut().into_iter().enumerate() {
            for v in t.iter_mut() {
                *v = if k % 2 == 1 {
                    rng.random_range(0.05f64..0.3).ln()
                } else {
                    *v + rng.random_range(-0.5..0.5)
                };
            }
        }
        let closed = network_bound_dist(&spec, &dist, &lambdas, c)?;
        let p = *closed.params().ok_or_else(|| Error::domain("zero bound in constraint suite"))?;
        let mut logs: Vec<f64> = (0..BOUND_SAMPLES)
            .map(|s| ln_sampled_bound(&spec, &sample_arch(&spec, &dist, mix(&[seed, case as u64]), s as u64), &lambdas, c))
            .collect();
        let nf = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / nf;
        let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (nf - 1.0);
        rep.check("constraint", case, "log_mean_se", (mean - p.mu()).abs() / (var / nf).sqrt(), 3.0);
        let ks = ks_against_normal(&mut logs, p.mu(), p.var());
        rep.check("constraint", case, "ks", ks, 0.05);
        for q in [0.1, 0.5, 0.9] {
            let x = (p.mu() + p.sigma() * normal_quantile(q)?).exp();
            let lx = x.ln();
            let empirical = logs.partition_point(|l| *l <= lx) as f64 / nf;
            rep.check("constraint", case, "cdf_abs", (ln_cdf(&p, x) - empirical).abs(), 0.01);
        }
    }
    Ok(rep)
}

/// What [`grad_check_target`] differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    Diffgraph,
    Arch,
    Lagrangian,
}

impl std::str::FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffgraph" => Ok(GradTarget::Diffgraph),
            "arch" => Ok(GradTarget::Arch),
            "lagrangian" => Ok(GradTarget::Lagrangian),
            _ => Err(Error::domain(format!("unknown gradcheck target `{s}`"))),
        }
    }
}

impl GradTarget {
    pub const ALL: [GradTarget; 3] = [GradTarget::Diffgraph, GradTarget::Arch, GradTarget::Lagrangian];

    /// Relative tolerance: primitives at 1e-5, composite graphs at 1e-4.
    pub fn tolerance(self) -> f64 {
        match self {
            GradTarget::Diffgraph => 1e-5,
            _ => 1e-4,
        }
    }
}

fn randn(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// Small graphs that together exercise every primitive's adjoint.
fn primitive_cases(seed: u64) -> Vec<(&'static str, Build, Vec<Tensor>)> {
    let mut rng = stream_rng(seed, tags::PROBE, 4);
    let mut cases: Vec<(&'static str, Build, Vec<Tensor>)> = Vec::new();
    cases.push((
        "matmul_add_sub",
        Box::new(|g, p| {
            let m = g.matmul(p[0], p[1])?;
            let a = g.add(m, p[2])?;
            let s = g.sub(a, p[3])?;
            let sq = g.mul(s, s)?;
            Ok(g.sum_all(sq))
        }),
        vec![randn(3, 4, &mut rng), randn(4, 2, &mut rng), randn(1, 2, &mut rng), randn(3, 2, &mut rng)],
    ));
    cases.push((
        "exp_ln_scale",
        Box::new(|g, p| {
            let e = g.exp(p[0]);
            let s = g.add_const(e, 0.5);
            let l = g.ln(s)?;
            let k = g.scale(l, -1.7);
            Ok(g.mean_all(k))
        }),
        vec![randn(3, 3, &mut rng)],
    ));
    cases.push((
        "relu_maxpool_concat",
        Box::new(|g, p| {
            let r = g.relu(p[0]);
            let m = g.max_pool(p[1], 2)?;
            let c = g.concat(&[r, m])?;
            let c2 = g.mul(c, c)?;
            let s = g.sum_cols(c2);
            Ok(g.sum_all(s))
        }),
        vec![randn(2, 3, &mut rng), randn(2, 6, &mut rng)],
    ));
    cases.push((
        "pick_mul_scalar_ce",
        Box::new(|g, p| {
            let s = g.pick(p[1], 0, 1)?;
            let z = g.mul_scalar(p[0], s)?;
            g.softmax_cross_entropy(z, &[0, 2, 1, 2])
        }),
        vec![randn(4, 3, &mut rng), randn(2, 2, &mut rng)],
    ));
    cases
}

/// A reduced supernet small enough for finite differences over every
/// coordinate group.
fn gradcheck_spec() -> SupernetSpec {
    SupernetSpec {
        n_cells: 2,
        n_nodes: 2,
        width: 8,
        input_dim: 8,
        classes: 3,
        reduction_cells: vec![1],
    }
}

struct ArchFixture {
    spec: SupernetSpec,
    net: Supernet,
    weights: SupernetWeights,
    dist: ArchDistribution,
    sample: crate::supernet::ArchSample,
    x: Tensor,
    y: Vec<usize>,
}

fn arch_fixture(seed: u64) -> Result<ArchFixture> {
    let spec = gradcheck_spec();
    let net = Supernet::new(spec.clone())?;
    let weights = SupernetWeights::init(&spec, seed, 0.8)?;
    let mut rng = stream_rng(seed, tags::PROBE, 5);
    let mut dist = ArchDistribution::new(&spec, ArchInit::default())?;
    for (k, t) in dist.tensors_mut().into_iter().enumerate() {
        for v in t.iter_mut() {
            *v = if k % 2 == 1 {
                rng.random_range(0.1f64..0.4).ln()
            } else {
                *v + rng.random_range(-0.5..0.5)
            };
        }
    }
    let sample = sample_arch(&spec, &dist, seed, 0);
    let x = Array2::from_shape_fn((6, spec.input_dim), |_| rng.random::<f64>());
    let y = (0..6).map(|i| i % spec.classes).collect();
    Ok(ArchFixture {
        spec,
        net,
        weights,
        dist,
        sample,
        x,
        y,
    })
}

/// Finite-difference check of one target; the report's `max_rel_err` is
/// compared against [`GradTarget::tolerance`].
pub fn grad_check_target(target: GradTarget, seed: u64) -> Result<GradCheckReport> {
    let cfg = GradCheckConfig {
        step: 1e-6,
        coords_per_tensor: 24,
        floor: 1e-4,
        seed,
    };
    match target {
        GradTarget::Diffgraph => {
            let mut worst: Option<GradCheckReport> = None;
            for (_, build, params) in primitive_cases(seed) {
                let r = grad_check(build, &params, &cfg)?;
                worst = Some(match worst {
                    Some(w) => GradCheckReport {
                        max_rel_err: w.max_rel_err.max(r.max_rel_err),
                        coords_checked: w.coords_checked + r.coords_checked,
                        per_tensor: [w.per_tensor, r.per_tensor].concat(),
                    },
                    None => r,
                });
            }
            Ok(worst.expect("cases"))
        }
        GradTarget::Arch => {
            let f = arch_fixture(seed)?;
            let mut params = f.weights.tensors();
            let n_w = params.len();
            params.extend(f.dist.tensors());
            grad_check(
                |g, ids| {
                    let w = WeightIds::from_slice(&f.weights, &ids[..n_w]);
                    let a = ArchParamIds::from_slice(&ids[n_w..]);
                    let arch = sample_reparam(g, &f.spec, &a, &f.sample)?;
                    let x = g.constant(f.x.clone());
                    let z = f.net.forward(g, &w, &arch, x)?;
                    g.softmax_cross_entropy(z, &f.y)
                },
                &params,
                &cfg,
            )
        }
        GradTarget::Lagrangian => {
            let f = arch_fixture(seed)?;
            let lambdas = Lambdas::compute(&f.spec, &f.weights);
            let c = constant_c(&f.weights);
            let state = AdmmState { theta: 0.7, rho: 0.3 };
            let lambda_star = network_bound_dist(&f.spec, &f.dist, &lambdas, c)?
                .params()
                .map_or(1.0, |p| p.mu().exp() * 0.8);
            grad_check(
                |g, ids| {
                    let a = ArchParamIds::from_slice(ids);
                    let w = WeightIds::register(g, &f.weights, false);
                    let arch = sample_reparam(g, &f.spec, &a, &f.sample)?;
                    let x = g.constant(f.x.clone());
                    let z = f.net.forward(g, &w, &arch, x)?;
                    let ce = g.softmax_cross_entropy(z, &f.y)?;
                    let b = bound_graph(g, &f.spec, &a, &lambdas, c)?
                        .ok_or_else(|| Error::domain("zero bound in gradcheck"))?;
                    let cn = constraint_node(g, b.mu, b.var, 0.9, lambda_star)?;
                    augmented_lagrangian(g, ce, cn, &state)
                },
                &f.dist.tensors(),
                &cfg,
            )
        }
    }
}
