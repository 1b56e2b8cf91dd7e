use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ops::{weight_mask, OperationKind};
use super::spec::SupernetSpec;
use crate::diffgraph::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, tags};

/// Network weights. `ops[cell][edge][slot]` is the `in x out` matrix of the
/// weight-bearing kind in `slot` (see [`OperationKind::WEIGHTED`]); only the
/// entries inside the kind's mask are ever used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetWeights {
    pub ops: Vec<Vec<Vec<Tensor>>>,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

impl SupernetWeights {
    /// Masked entries drawn `N(0, (gain^2) / taps)`; classifier
    /// `N(0, 1 / fan_in)`, zero bias.
    pub fn init(spec: &SupernetSpec, seed: u64, gain: f64) -> Result<Self> {
        spec.validate()?;
        let mut rng = stream_rng(seed, tags::WEIGHT_INIT, 0);
        let in_widths = spec.in_widths();
        let widths = spec.widths();
        let mut ops = Vec::with_capacity(spec.n_cells);
        for c in 0..spec.n_cells {
            let mut cell = Vec::with_capacity(spec.n_edges());
            for edge in spec.edges() {
                let stride = spec.stride(c, edge);
                let in_w = if edge.from < 2 { in_widths[c] } else { widths[c] };
                let mut slots = Vec::with_capacity(4);
                for kind in OperationKind::WEIGHTED {
                    let mask = weight_mask(kind, in_w, stride);
                    let std = gain / (kind.offsets().len() as f64).sqrt();
                    let w = mask.mapv(|m| if m > 0.0 { std * rng.sample::<f64, _>(StandardNormal) } else { 0.0 });
                    slots.push(w);
                }
                cell.push(slots);
            }
            ops.push(cell);
        }
        let fan_in = spec.classifier_in();
        let std = 1.0 / (fan_in as f64).sqrt();
        let classifier_w = Array2::from_shape_fn((fan_in, spec.classes), |_| std * rng.sample::<f64, _>(StandardNormal));
        Ok(Self {
            ops,
            classifier_w,
            classifier_b: Array2::zeros((1, spec.classes)),
        })
    }

    /// All tensors in a fixed order: op weights (cell, edge, slot), then the
    /// classifier weight and bias.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.ops
            .iter()
            .flatten()
            .flatten()
            .chain([&self.classifier_w, &self.classifier_b])
            .cloned()
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let Self {
            ops,
            classifier_w,
            classifier_b,
        } = self;
        ops.iter_mut()
            .flatten()
            .flatten()
            .chain([classifier_w, classifier_b])
            .collect()
    }

    pub fn len(&self) -> usize {
        self.ops.iter().flatten().map(Vec::len).sum::<usize>() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_finite(&self) -> bool {
        self.tensors_iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn tensors_iter(&self) -> impl Iterator<Item = &Tensor> {
        self.ops
            .iter()
            .flatten()
            .flatten()
            .chain([&self.classifier_w, &self.classifier_b])
    }

    /// Checks every tensor against the shapes `spec` implies.
    pub fn check(&self, spec: &SupernetSpec) -> Result<()> {
        let in_widths = spec.in_widths();
        let widths = spec.widths();
        if self.ops.len() != spec.n_cells {
            return Err(Error::shape("weights", format!("{} cells, spec has {}", self.ops.len(), spec.n_cells)));
        }
        for (c, cell) in self.ops.iter().enumerate() {
            if cell.len() != spec.n_edges() {
                return Err(Error::shape("weights", format!("cell {c}: {} edges", cell.len())));
            }
            for (edge, slots) in spec.edges().iter().zip(cell) {
                let in_w = if edge.from < 2 { in_widths[c] } else { widths[c] };
                let want = (in_w, widths[c]);
                if slots.len() != 4 || slots.iter().any(|w| w.dim() != want) {
                    return Err(Error::shape("weights", format!("cell {c} edge {edge:?}: expected 4 of {want:?}")));
                }
            }
        }
        if self.classifier_w.dim() != (spec.classifier_in(), spec.classes) || self.classifier_b.dim() != (1, spec.classes) {
            return Err(Error::shape("weights", "classifier shape"));
        }
        Ok(())
    }
}

/// Graph leaves mirroring [`SupernetWeights`].
#[derive(Debug, Clone)]
pub struct WeightIds {
    pub ops: Vec<Vec<Vec<NodeId>>>,
    pub classifier_w: NodeId,
    pub classifier_b: NodeId,
}

impl WeightIds {
    /// Registers every tensor as a trainable leaf (`trainable`) or constant.
    pub fn register(g: &mut Graph, w: &SupernetWeights, trainable: bool) -> Self {
        let ids: Vec<NodeId> = w
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect();
        Self::from_slice(w, &ids)
    }

    /// Rebuilds the nested layout of `like` from a flat id list.
    pub fn from_slice(like: &SupernetWeights, ids: &[NodeId]) -> Self {
        let mut it = ids.iter().copied();
        let ops = like
            .ops
            .iter()
            .map(|cell| {
                cell.iter()
                    .map(|slots| slots.iter().map(|_| it.next().expect("id count")).collect())
                    .collect()
            })
            .collect();
        let classifier_w = it.next().expect("id count");
        let classifier_b = it.next().expect("id count");
        Self {
            ops,
            classifier_w,
            classifier_b,
        }
    }

    pub fn all(&self) -> Vec<NodeId> {
        self.ops
            .iter()
            .flatten()
            .flatten()
            .copied()
            .chain([self.classifier_w, self.classifier_b])
            .collect()
    }
}
