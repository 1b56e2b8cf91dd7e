//! Lipschitz bounds of the supernet.
//!
//! Per edge, `sum_o alpha_o lambda_o`; per node, the `beta`-weighted sum
//! over predecessors; for the network, `C` times the product over every
//! intermediate node of every cell. With log-normal `alpha` and `beta` the
//! edge and node sums are moment-matched to log-normals and the network
//! product is exact in log space.
//!
//! The operation constants `lambda_o` are evaluated at the current weights
//! and then held fixed, so no gradient flows from the bound into weights.

use ndarray::{Array2, ArrayView1};

use super::arch::{ArchDistribution, ArchParamIds, ArchSample, CellArch};
use super::ops::{op_lipschitz, weight_mask, OperationKind};
use super::spec::SupernetSpec;
use super::spectral::{power_iteration, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use super::weights::SupernetWeights;
use crate::diffgraph::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::lognormal::{ln_scale, BoundDist, LogNormalParams};

/// `lambda[cell]` is an `edges x 8` table of operation constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Lambdas {
    pub cells: Vec<Tensor>,
}

impl Lambdas {
    pub fn compute(spec: &SupernetSpec, weights: &SupernetWeights) -> Self {
        Self::compute_with(spec, weights, DEFAULT_MAX_ITERS, DEFAULT_TOL)
    }

    /// Same as [`Lambdas::compute`] with an explicit power-iteration budget.
    pub fn compute_with(spec: &SupernetSpec, weights: &SupernetWeights, max_iters: usize, tol: f64) -> Self {
        let edges = spec.edges();
        let in_widths = spec.in_widths();
        let widths = spec.widths();
        let cells = (0..spec.n_cells)
            .map(|c| {
                let mut t = Array2::zeros((edges.len(), OperationKind::COUNT));
                for (k, edge) in edges.iter().enumerate() {
                    let stride = spec.stride(c, *edge);
                    let in_w = if edge.from < 2 { in_widths[c] } else { widths[c] };
                    for kind in OperationKind::ALL {
                        t[[k, kind.index()]] = match kind.weight_slot() {
                            Some(s) => {
                                let masked = &weights.ops[c][k][s] * &weight_mask(kind, in_w, stride);
                                power_iteration(&masked, max_iters, tol).sigma
                            }
                            None => op_lipschitz(kind, stride, None),
                        };
                    }
                }
                t
            })
            .collect();
        Self { cells }
    }
}

/// `C = sqrt(2) * |W_classifier|_2`: the classifier's constant times a
/// bound on the cross-entropy gradient with respect to the logits.
pub fn constant_c(weights: &SupernetWeights) -> f64 {
    std::f64::consts::SQRT_2 * power_iteration(&weights.classifier_w, DEFAULT_MAX_ITERS, DEFAULT_TOL).sigma
}

/// Distribution of `sum_o alpha_o lambda_o` on one edge.
pub fn edge_bound_dist(cell: &CellArch, edge: usize, lambdas: ArrayView1<f64>) -> BoundDist {
    let terms: Vec<BoundDist> = OperationKind::ALL
        .iter()
        .filter(|k| lambdas[k.index()] > 0.0)
        .map(|k| {
            BoundDist::LogNormal(ln_scale(&cell.alpha(edge, k.index()), lambdas[k.index()]).expect("positive constant"))
        })
        .collect();
    BoundDist::sum(&terms)
}

/// Distribution of `sum_i beta_i * edge_i` over the predecessors of `to`.
pub fn node_bound_dist(spec: &SupernetSpec, cell: &CellArch, to: usize, edge_bounds: &[BoundDist]) -> BoundDist {
    let terms: Vec<BoundDist> = spec
        .incoming(to)
        .map(|k| BoundDist::LogNormal(cell.beta(k)).product(&edge_bounds[k]))
        .collect();
    BoundDist::sum(&terms)
}

/// Node bound distributions of one cell instance, in node order.
pub fn cell_node_bounds(spec: &SupernetSpec, cell: &CellArch, lambdas: &Tensor) -> Vec<BoundDist> {
    let edge_bounds: Vec<BoundDist> = (0..spec.n_edges())
        .map(|k| edge_bound_dist(cell, k, lambdas.row(k)))
        .collect();
    (2..spec.total_nodes())
        .map(|to| node_bound_dist(spec, cell, to, &edge_bounds))
        .collect()
}

/// Distribution of the network bound: `ln C` plus the node log-means, and
/// the sum of the node log-variances. Any zero node makes the whole bound
/// zero.
pub fn network_bound_dist(spec: &SupernetSpec, dist: &ArchDistribution, lambdas: &Lambdas, c: f64) -> Result<BoundDist> {
    let mut acc = BoundDist::LogNormal(LogNormalParams::point(c)?);
    for (cell, lam) in lambdas.cells.iter().enumerate() {
        for node in cell_node_bounds(spec, dist.cell(spec.cell_type(cell)), lam) {
            acc = acc.product(&node);
        }
    }
    Ok(acc)
}

/// `C * prod_cells prod_j sum_i beta_ij sum_o alpha_ij,o lambda_o` at a
/// concrete sample.
pub fn sampled_bound(spec: &SupernetSpec, sample: &ArchSample, lambdas: &Lambdas, c: f64) -> f64 {
    ln_sampled_bound(spec, sample, lambdas, c).exp()
}

/// Natural log of [`sampled_bound`]; `-inf` when the bound is zero.
pub fn ln_sampled_bound(spec: &SupernetSpec, sample: &ArchSample, lambdas: &Lambdas, c: f64) -> f64 {
    let mut total = c.ln();
    for (cs, lam) in sample.cells.iter().zip(&lambdas.cells) {
        for to in 2..spec.total_nodes() {
            let node: f64 = spec
                .incoming(to)
                .map(|k| {
                    let edge: f64 = (0..OperationKind::COUNT).map(|o| cs.alpha[[k, o]] * lam[[k, o]]).sum();
                    cs.beta[[k, 0]] * edge
                })
                .sum();
            total += node.ln();
        }
    }
    total
}

/// Graph nodes for the network bound's log-space mean and variance.
#[derive(Debug, Clone, Copy)]
pub struct BoundNodes {
    pub mu: NodeId,
    pub var: NodeId,
}

/// Builds the network bound parameters inside the graph, differentiable in
/// the distribution leaves `ids`.
///
/// This path works directly with linear-space moments: an edge contributes
/// `M = sum_o lambda_o E[alpha_o]` and `V = sum_o lambda_o^2 Var[alpha_o]`,
/// a node sums `E[beta] M` and `Var[beta X]` over its predecessors, and only
/// then converts to log space. Returns `None` when some node bound is zero.
pub fn bound_graph(g: &mut Graph, spec: &SupernetSpec, ids: &ArchParamIds, lambdas: &Lambdas, c: f64) -> Result<Option<BoundNodes>> {
    if !(c > 0.0) {
        return Err(Error::domain(format!("C must be > 0, got {c}")));
    }
    let e = spec.n_edges();
    let mut adj = Array2::zeros((spec.n_nodes, e));
    for to in 2..spec.total_nodes() {
        for k in spec.incoming(to) {
            adj[[to - 2, k]] = 1.0;
        }
    }
    let mut mu_total = g.scalar_constant(c.ln());
    let mut var_total = g.scalar_constant(0.0);
    for (cell, lam) in lambdas.cells.iter().enumerate() {
        // Zero node check on the plain values.
        for to in 2..spec.total_nodes() {
            if spec.incoming(to).all(|k| lam.row(k).iter().all(|v| *v == 0.0)) {
                return Ok(None);
            }
        }
        let [mu_a, ls_a, mu_b, ls_b] = ids.cell(spec.cell_type(cell));
        let lam_n = g.constant(lam.clone());
        let lam_sq = g.constant(lam.mapv(|v| v * v));

        // Edge moments.
        let ls2 = g.scale(ls_a, 2.0);
        let s2 = g.exp(ls2);
        let half = g.scale(s2, 0.5);
        let a = g.add(mu_a, half)?;
        let mean_a = g.exp(a);
        let m_terms = g.mul(mean_a, lam_n)?;
        let m_edge = g.sum_cols(m_terms);
        let a2 = g.scale(a, 2.0);
        let mean_sq = g.exp(a2);
        let es2 = g.exp(s2);
        let em1 = g.add_const(es2, -1.0);
        let var_a = g.mul(mean_sq, em1)?;
        let v_terms = g.mul(var_a, lam_sq)?;
        let v_edge = g.sum_cols(v_terms);

        // beta * edge: E = E[beta] M, Var = E[beta]^2 ((e^{s}-1)(M^2+V) + V).
        let lsb2 = g.scale(ls_b, 2.0);
        let sb2 = g.exp(lsb2);
        let halfb = g.scale(sb2, 0.5);
        let b = g.add(mu_b, halfb)?;
        let mean_b = g.exp(b);
        let m_term = g.mul(mean_b, m_edge)?;
        let m_sq = g.mul(m_edge, m_edge)?;
        let second = g.add(m_sq, v_edge)?;
        let esb = g.exp(sb2);
        let emb1 = g.add_const(esb, -1.0);
        let spread = g.mul(emb1, second)?;
        let inner = g.add(spread, v_edge)?;
        let mb_sq = g.mul(mean_b, mean_b)?;
        let v_term = g.mul(mb_sq, inner)?;

        // Node sums and log-space conversion.
        let adj_n = g.constant(adj.clone());
        let m_node = g.matmul(adj_n, m_term)?;
        let v_node = g.matmul(adj_n, v_term)?;
        let ln_m = g.ln(m_node)?;
        let neg2 = g.scale(ln_m, -2.0);
        let inv_m2 = g.exp(neg2);
        let ratio = g.mul(v_node, inv_m2)?;
        let one_plus = g.add_const(ratio, 1.0);
        let s_node = g.ln(one_plus)?;
        let half_s = g.scale(s_node, 0.5);
        let mu_node = g.sub(ln_m, half_s)?;

        let mu_sum = g.sum_all(mu_node);
        let var_sum = g.sum_all(s_node);
        mu_total = g.add(mu_total, mu_sum)?;
        var_total = g.add(var_total, var_sum)?;
    }
    Ok(Some(BoundNodes {
        mu: mu_total,
        var: var_total,
    }))
}
