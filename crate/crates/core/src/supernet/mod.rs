//! The continuous search space.
//!
//! A supernet is a chain of cells. Every edge of a cell carries all eight
//! candidate operations, mixed by raw (unnormalized) positive weights
//! `alpha`, and every node sums its incoming edges weighted by `beta`. Both
//! weight sets are log-normal with trainable log-space parameters, which is
//! what lets the network's Lipschitz bound be propagated in closed form.

pub mod arch;
pub mod bound;
pub mod genotype;
pub mod network;
pub mod ops;
pub mod spec;
pub mod spectral;
pub mod weights;

pub use arch::{sample_arch, ArchDistribution, ArchInit, ArchParamIds, ArchSample, CellArch, CellSample};
pub use bound::{
    bound_graph, cell_node_bounds, constant_c, edge_bound_dist, ln_sampled_bound, network_bound_dist,
    node_bound_dist, sampled_bound, BoundNodes, Lambdas,
};
pub use genotype::{discretize, edge_scores, CellGenotype, Genotype, GenotypeMeta, Scoring};
pub use network::{sample_constants, sample_reparam, CellArchNodes, LinearModel, Model, Network, Supernet};
pub use ops::{op_lipschitz, LipschitzRule, OperationKind};
pub use spec::{CellType, Edge, SupernetSpec};
pub use spectral::{power_iteration, spectral_norm, SpectralEstimate};
pub use weights::{SupernetWeights, WeightIds};
