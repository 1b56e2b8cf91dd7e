use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::arch::{ArchDistribution, ArchSample, CellArch, CellSample};
use super::ops::OperationKind;
use super::spec::{CellType, SupernetSpec};
use crate::dataio;
use crate::error::{Error, Result};
use crate::lognormal::ln_mean;

/// Two `(predecessor, operation)` choices per intermediate node.
pub type CellGenotype = Vec<[(usize, OperationKind); 2]>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeMeta {
    pub seed: u64,
    pub spec_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: CellGenotype,
    pub reduce: CellGenotype,
    pub widths: Vec<usize>,
    pub meta: GenotypeMeta,
}

/// How an `(edge, op)` pair is scored when discretizing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Scoring {
    /// `E[beta] * E[alpha]`.
    #[default]
    Expectation,
    /// `exp(mu_beta - z sigma_beta) * exp(mu_alpha - z sigma_alpha)`.
    LowerBound { z: f64 },
}

/// Score of every `(edge, op)` pair of one cell type.
pub fn edge_scores(cell: &CellArch, scoring: Scoring) -> Array2<f64> {
    let (e, k) = cell.mu_alpha.dim();
    Array2::from_shape_fn((e, k), |(edge, op)| {
        let a = cell.alpha(edge, op);
        let b = cell.beta(edge);
        match scoring {
            Scoring::Expectation => ln_mean(&b) * ln_mean(&a),
            Scoring::LowerBound { z } => (b.mu() - z * b.sigma()).exp() * (a.mu() - z * a.sigma()).exp(),
        }
    })
}

fn discretize_cell(spec: &SupernetSpec, cell: &CellArch, scoring: Scoring) -> CellGenotype {
    let scores = edge_scores(cell, scoring);
    let best: Vec<(OperationKind, f64)> = scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut pick = None::<(OperationKind, f64)>;
            for kind in OperationKind::ALL {
                if kind == OperationKind::Zero {
                    continue;
                }
                let s = row[kind.index()];
                if pick.is_none_or(|(_, b)| s > b) {
                    pick = Some((kind, s));
                }
            }
            pick.expect("non-zero kinds exist")
        })
        .collect();
    (2..spec.total_nodes())
        .map(|to| {
            let mut preds: Vec<usize> = (0..to).collect();
            // Stable sort keeps the lower predecessor first on ties.
            preds.sort_by(|a, b| {
                let sa = best[spec.edge_index(*a, to)].1;
                let sb = best[spec.edge_index(*b, to)].1;
                sb.partial_cmp(&sa).unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut chosen = [preds[0], preds[1]];
            chosen.sort_unstable();
            chosen.map(|p| (p, best[spec.edge_index(p, to)].0))
        })
        .collect()
}

/// Keeps, per edge, the best non-zero operation and, per node, the two
/// predecessors whose best scores are largest. Ties go to the lower index.
pub fn discretize(spec: &SupernetSpec, dist: &ArchDistribution, scoring: Scoring, seed: u64) -> Genotype {
    Genotype {
        normal: discretize_cell(spec, &dist.normal, scoring),
        reduce: discretize_cell(spec, &dist.reduce, scoring),
        widths: spec.widths(),
        meta: GenotypeMeta {
            seed,
            spec_hash: spec.hash(),
        },
    }
}

const GENOTYPE_KEYS: &[&str] = &["normal", "reduce", "widths", "meta"];

impl Genotype {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        dataio::save_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        dataio::load_json(path, GENOTYPE_KEYS)
    }

    pub fn cell(&self, t: CellType) -> &CellGenotype {
        match t {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    pub fn validate(&self, spec: &SupernetSpec) -> Result<()> {
        if self.widths != spec.widths() {
            return Err(Error::domain(format!(
                "genotype widths {:?} do not match spec {:?}",
                self.widths,
                spec.widths()
            )));
        }
        for (name, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            if cell.len() != spec.n_nodes {
                return Err(Error::domain(format!("{name}: {} nodes, expected {}", cell.len(), spec.n_nodes)));
            }
            for (k, pair) in cell.iter().enumerate() {
                let node = k + 2;
                if pair[0].0 == pair[1].0 {
                    return Err(Error::domain(format!("{name} node {node}: repeated predecessor")));
                }
                for (pred, op) in pair {
                    if *pred >= node {
                        return Err(Error::domain(format!("{name} node {node}: predecessor {pred} not earlier")));
                    }
                    if *op == OperationKind::Zero {
                        return Err(Error::domain(format!("{name} node {node}: zero operation")));
                    }
                }
            }
        }
        Ok(())
    }

    /// The degenerate sample with `alpha = beta = 1` on the chosen pairs and
    /// 0 elsewhere.
    pub fn as_sample(&self, spec: &SupernetSpec) -> ArchSample {
        let e = spec.n_edges();
        let cells = (0..spec.n_cells)
            .map(|c| {
                let mut alpha = Array2::zeros((e, OperationKind::COUNT));
                let mut beta = Array2::zeros((e, 1));
                for (k, pair) in self.cell(spec.cell_type(c)).iter().enumerate() {
                    for (pred, op) in pair {
                        let edge = spec.edge_index(*pred, k + 2);
                        alpha[[edge, op.index()]] = 1.0;
                        beta[[edge, 0]] = 1.0;
                    }
                }
                CellSample {
                    eps_alpha: Array2::zeros(alpha.dim()),
                    eps_beta: Array2::zeros(beta.dim()),
                    alpha,
                    beta,
                }
            })
            .collect();
        ArchSample { cells }
    }
}
