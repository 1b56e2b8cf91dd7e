use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ops::OperationKind;
use super::spec::{CellType, SupernetSpec};
use crate::diffgraph::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::lognormal::LogNormalParams;
use crate::rng::{stream_rng, tags};

/// Trainable log-space parameters for one cell type.
///
/// `mu_alpha`/`log_sigma_alpha` are `edges x 8`; `mu_beta`/`log_sigma_beta`
/// are `edges x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellArch {
    pub mu_alpha: Tensor,
    pub log_sigma_alpha: Tensor,
    pub mu_beta: Tensor,
    pub log_sigma_beta: Tensor,
}

impl CellArch {
    pub fn alpha(&self, edge: usize, op: usize) -> LogNormalParams {
        let s = self.log_sigma_alpha[[edge, op]].exp();
        LogNormalParams::new(self.mu_alpha[[edge, op]], s * s).expect("finite arch parameters")
    }

    pub fn beta(&self, edge: usize) -> LogNormalParams {
        let s = self.log_sigma_beta[[edge, 0]].exp();
        LogNormalParams::new(self.mu_beta[[edge, 0]], s * s).expect("finite arch parameters")
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.mu_alpha, &self.log_sigma_alpha, &self.mu_beta, &self.log_sigma_beta]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.mu_alpha,
            &mut self.log_sigma_alpha,
            &mut self.mu_beta,
            &mut self.log_sigma_beta,
        ]
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// How the log-space means are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ArchInit {
    /// Every `mu` is the same constant.
    Constant { mu_alpha: f64, mu_beta: f64, sigma: f64 },
    /// `mu_alpha = -ln(ops_scale)` and `mu_beta = -ln(in_degree)`, so a node's
    /// expected mixture gain starts near `1 / ops_scale` per unit operation.
    Balanced { ops_scale: f64, sigma: f64 },
}

impl Default for ArchInit {
    fn default() -> Self {
        ArchInit::Balanced {
            ops_scale: 4.0,
            sigma: 0.15,
        }
    }
}

/// Log-normal distributions over the architecture weights, one table per
/// cell type. Every normal cell shares one table, every reduction cell the
/// other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDistribution {
    pub normal: CellArch,
    pub reduce: CellArch,
}

impl ArchDistribution {
    pub fn new(spec: &SupernetSpec, init: ArchInit) -> Result<Self> {
        let e = spec.n_edges();
        let (sigma, mu_a, beta_of) = match init {
            ArchInit::Constant {
                mu_alpha,
                mu_beta,
                sigma,
            } => (sigma, mu_alpha, Box::new(move |_: usize| mu_beta) as Box<dyn Fn(usize) -> f64>),
            ArchInit::Balanced { ops_scale, sigma } => {
                if !(ops_scale > 0.0) {
                    return Err(Error::domain("ops_scale must be > 0"));
                }
                (sigma, -ops_scale.ln(), Box::new(|deg: usize| -(deg as f64).ln()) as Box<dyn Fn(usize) -> f64>)
            }
        };
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::domain(format!("initial sigma must be > 0, got {sigma}")));
        }
        let edges = spec.edges();
        let cell = CellArch {
            mu_alpha: Array2::from_elem((e, OperationKind::COUNT), mu_a),
            log_sigma_alpha: Array2::from_elem((e, OperationKind::COUNT), sigma.ln()),
            mu_beta: Array2::from_shape_fn((e, 1), |(k, _)| beta_of(edges[k].to)),
            log_sigma_beta: Array2::from_elem((e, 1), sigma.ln()),
        };
        Ok(Self {
            normal: cell.clone(),
            reduce: cell,
        })
    }

    pub fn cell(&self, t: CellType) -> &CellArch {
        match t {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    pub fn cell_mut(&mut self, t: CellType) -> &mut CellArch {
        match t {
            CellType::Normal => &mut self.normal,
            CellType::Reduce => &mut self.reduce,
        }
    }

    /// The eight trainable tensors in a fixed order: normal then reduce,
    /// each as (mu_alpha, log_sigma_alpha, mu_beta, log_sigma_beta).
    pub fn tensors(&self) -> Vec<Tensor> {
        self.normal
            .tensors()
            .into_iter()
            .chain(self.reduce.tensors())
            .cloned()
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let Self { normal, reduce } = self;
        normal.tensors_mut().into_iter().chain(reduce.tensors_mut()).collect()
    }

    pub fn from_tensors(t: &[Tensor]) -> Result<Self> {
        if t.len() != 8 {
            return Err(Error::shape("ArchDistribution", format!("{} tensors, expected 8", t.len())));
        }
        let cell = |k: usize| CellArch {
            mu_alpha: t[k].clone(),
            log_sigma_alpha: t[k + 1].clone(),
            mu_beta: t[k + 2].clone(),
            log_sigma_beta: t[k + 3].clone(),
        };
        Ok(Self {
            normal: cell(0),
            reduce: cell(4),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.normal.is_finite() && self.reduce.is_finite()
    }
}

/// Concrete architecture weights for one cell instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSample {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub eps_alpha: Tensor,
    pub eps_beta: Tensor,
}

/// One draw of `alpha` and `beta` for every cell instance. Cells of the same
/// type share distribution parameters but receive independent draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSample {
    pub cells: Vec<CellSample>,
}

fn draw(rng: &mut impl Rng, shape: (usize, usize)) -> Tensor {
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

fn reparam(mu: &Tensor, log_sigma: &Tensor, eps: &Tensor) -> Tensor {
    let mut out = mu.clone();
    ndarray::Zip::from(&mut out)
        .and(log_sigma)
        .and(eps)
        .for_each(|o, &ls, &e| *o = (*o + ls.exp() * e).exp());
    out
}

/// `alpha = exp(mu + sigma * eps)` with `eps ~ N(0, 1)` per coordinate,
/// reproducible from `(seed, stream)`.
pub fn sample_arch(spec: &SupernetSpec, dist: &ArchDistribution, seed: u64, stream: u64) -> ArchSample {
    let mut rng = stream_rng(seed, tags::ARCH_SAMPLE, stream);
    let cells = (0..spec.n_cells)
        .map(|c| {
            let p = dist.cell(spec.cell_type(c));
            let eps_alpha = draw(&mut rng, p.mu_alpha.dim());
            let eps_beta = draw(&mut rng, p.mu_beta.dim());
            CellSample {
                alpha: reparam(&p.mu_alpha, &p.log_sigma_alpha, &eps_alpha),
                beta: reparam(&p.mu_beta, &p.log_sigma_beta, &eps_beta),
                eps_alpha,
                eps_beta,
            }
        })
        .collect();
    ArchSample { cells }
}

impl ArchSample {
    /// A sample with every draw at its log-space mean (`eps = 0`).
    pub fn at_mean(spec: &SupernetSpec, dist: &ArchDistribution) -> Self {
        let cells = (0..spec.n_cells)
            .map(|c| {
                let p = dist.cell(spec.cell_type(c));
                CellSample {
                    alpha: p.mu_alpha.mapv(f64::exp),
                    beta: p.mu_beta.mapv(f64::exp),
                    eps_alpha: Array2::zeros(p.mu_alpha.dim()),
                    eps_beta: Array2::zeros(p.mu_beta.dim()),
                }
            })
            .collect();
        Self { cells }
    }
}

/// Graph leaves for the eight distribution tensors (see
/// [`ArchDistribution::tensors`]).
#[derive(Debug, Clone, Copy)]
pub struct ArchParamIds {
    pub normal: [NodeId; 4],
    pub reduce: [NodeId; 4],
}

impl ArchParamIds {
    pub fn from_slice(ids: &[NodeId]) -> Self {
        Self {
            normal: [ids[0], ids[1], ids[2], ids[3]],
            reduce: [ids[4], ids[5], ids[6], ids[7]],
        }
    }

    pub fn register(g: &mut Graph, dist: &ArchDistribution) -> Self {
        let ids: Vec<NodeId> = dist.tensors().into_iter().map(|t| g.param(t)).collect();
        Self::from_slice(&ids)
    }

    pub fn cell(&self, t: CellType) -> [NodeId; 4] {
        match t {
            CellType::Normal => self.normal,
            CellType::Reduce => self.reduce,
        }
    }

    pub fn all(&self) -> Vec<NodeId> {
        self.normal.iter().chain(self.reduce.iter()).copied().collect()
    }
}

/// Rebuilds `exp(mu + exp(log_sigma) * eps)` inside the graph so gradients
/// reach the distribution parameters.
pub fn reparam_node(g: &mut Graph, mu: NodeId, log_sigma: NodeId, eps: &Tensor) -> Result<NodeId> {
    let sigma = g.exp(log_sigma);
    let e = g.constant(eps.clone());
    let noise = g.mul(sigma, e)?;
    let z = g.add(mu, noise)?;
    Ok(g.exp(z))
}
