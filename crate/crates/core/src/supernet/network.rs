use std::collections::BTreeMap;

use ndarray::Array2;

use super::arch::{reparam_node, ArchParamIds, ArchSample};
use super::genotype::Genotype;
use super::ops::{apply_op, fold_matrix, FixedMaps, OperationKind};
use super::spec::SupernetSpec;
use super::weights::{SupernetWeights, WeightIds};
use crate::diffgraph::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Architecture weights of one cell instance as graph nodes:
/// `alpha` is `edges x 8`, `beta` is `edges x 1`.
#[derive(Debug, Clone, Copy)]
pub struct CellArchNodes {
    pub alpha: NodeId,
    pub beta: NodeId,
}

/// Registers a sample's `alpha`/`beta` as constants.
pub fn sample_constants(g: &mut Graph, sample: &ArchSample) -> Vec<CellArchNodes> {
    sample
        .cells
        .iter()
        .map(|c| CellArchNodes {
            alpha: g.constant(c.alpha.clone()),
            beta: g.constant(c.beta.clone()),
        })
        .collect()
}

/// Rebuilds a sample from distribution leaves and its stored noise, so the
/// forward pass is differentiable in the distribution parameters.
pub fn sample_reparam(
    g: &mut Graph,
    spec: &SupernetSpec,
    ids: &ArchParamIds,
    sample: &ArchSample,
) -> Result<Vec<CellArchNodes>> {
    sample
        .cells
        .iter()
        .enumerate()
        .map(|(c, cs)| {
            let [mu_a, ls_a, mu_b, ls_b] = ids.cell(spec.cell_type(c));
            Ok(CellArchNodes {
                alpha: reparam_node(g, mu_a, ls_a, &cs.eps_alpha)?,
                beta: reparam_node(g, mu_b, ls_b, &cs.eps_beta)?,
            })
        })
        .collect()
}

/// Fixed structure of a supernet: the spec plus the constant matrices its
/// operations and cell-input folds use.
#[derive(Debug, Clone)]
pub struct Supernet {
    spec: SupernetSpec,
    maps: BTreeMap<usize, FixedMaps>,
    folds: Vec<Tensor>,
}

impl Supernet {
    pub fn new(spec: SupernetSpec) -> Result<Self> {
        spec.validate()?;
        let mut maps = BTreeMap::new();
        for w in spec.in_widths().into_iter().chain(spec.widths()) {
            maps.entry(w).or_insert_with(|| FixedMaps::new(w));
        }
        let in_widths = spec.in_widths();
        let mut folds = Vec::with_capacity(spec.n_cells);
        for c in 0..spec.n_cells {
            let src = if c == 0 { spec.input_dim } else { spec.cell_out_width(c - 1) };
            folds.push(fold_matrix(src, in_widths[c])?);
        }
        Ok(Self { spec, maps, folds })
    }

    pub fn spec(&self) -> &SupernetSpec {
        &self.spec
    }

    /// Logits of the operation-mixture network:
    /// node `j = sum_i beta_ij sum_o alpha_ij,o o(node_i)`, cells in series,
    /// each cell's intermediate nodes concatenated, then a dense classifier.
    /// Terms whose `alpha` or `beta` value is exactly zero are skipped.
    pub fn forward(
        &self,
        g: &mut Graph,
        w: &WeightIds,
        arch: &[CellArchNodes],
        x: NodeId,
    ) -> Result<NodeId> {
        let spec = &self.spec;
        let (batch, d) = g.shape(x);
        if d != spec.input_dim {
            return Err(Error::shape("forward", format!("input width {d}, expected {}", spec.input_dim)));
        }
        if arch.len() != spec.n_cells || w.ops.len() != spec.n_cells {
            return Err(Error::shape("forward", "cell count mismatch"));
        }
        let widths = spec.widths();
        let edges = spec.edges();
        let mut prev = x;
        for c in 0..spec.n_cells {
            let fold = g.constant(self.folds[c].clone());
            let input = g.matmul(prev, fold)?;
            let alpha = g.value(arch[c].alpha).clone();
            let beta = g.value(arch[c].beta).clone();
            if alpha.dim() != (edges.len(), OperationKind::COUNT) || beta.dim() != (edges.len(), 1) {
                return Err(Error::shape("forward", format!("cell {c}: architecture weight shape")));
            }
            let mut nodes: Vec<NodeId> = vec![input, input];
            for to in 2..spec.total_nodes() {
                let mut acc: Option<NodeId> = None;
                for k in spec.incoming(to) {
                    let edge = edges[k];
                    if beta[[k, 0]] == 0.0 {
                        continue;
                    }
                    let stride = spec.stride(c, edge);
                    let src = nodes[edge.from];
                    let maps = &self.maps[&g.shape(src).1];
                    let mut mix: Option<NodeId> = None;
                    for kind in OperationKind::ALL {
                        if alpha[[k, kind.index()]] == 0.0 {
                            continue;
                        }
                        let weight = kind.weight_slot().map(|s| w.ops[c][k][s]);
                        let Some(out) = apply_op(g, kind, src, stride, maps, weight)? else {
                            continue;
                        };
                        let a = g.pick(arch[c].alpha, k, kind.index())?;
                        let term = g.mul_scalar(out, a)?;
                        mix = Some(match mix {
                            Some(m) => g.add(m, term)?,
                            None => term,
                        });
                    }
                    if let Some(m) = mix {
                        let b = g.pick(arch[c].beta, k, 0)?;
                        let term = g.mul_scalar(m, b)?;
                        acc = Some(match acc {
                            Some(a) => g.add(a, term)?,
                            None => term,
                        });
                    }
                }
                let node = match acc {
                    Some(a) => a,
                    None => g.constant(Array2::zeros((batch, widths[c]))),
                };
                nodes.push(node);
            }
            prev = g.concat(&nodes[2..])?;
        }
        let z = g.matmul(prev, w.classifier_w)?;
        g.add(z, w.classifier_b)
    }
}

/// Anything that maps a batch to logits and can differentiate its
/// cross-entropy with respect to the input.
pub trait Model {
    fn input_dim(&self) -> usize;
    fn classes(&self) -> usize;
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
    /// Mean cross-entropy and its gradient with respect to `x`.
    fn loss_grad(&self, x: &Tensor, y: &[usize]) -> Result<(f64, Tensor)>;

    /// Per-example argmax predictions.
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok(z.rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (j, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    fn accuracy(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        if y.is_empty() {
            return Ok(0.0);
        }
        let p = self.predict(x)?;
        Ok(p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64)
    }
}

/// A supernet with fixed weights and a fixed architecture sample (a
/// genotype is the degenerate sample with unit weights on its choices).
#[derive(Debug, Clone)]
pub struct Network {
    pub net: Supernet,
    pub weights: SupernetWeights,
    pub arch: ArchSample,
}

impl Network {
    pub fn new(spec: SupernetSpec, weights: SupernetWeights, arch: ArchSample) -> Result<Self> {
        weights.check(&spec)?;
        if arch.cells.len() != spec.n_cells {
            return Err(Error::shape("Network", "sample cell count"));
        }
        Ok(Self {
            net: Supernet::new(spec)?,
            weights,
            arch,
        })
    }

    pub fn discrete(spec: SupernetSpec, weights: SupernetWeights, genotype: &Genotype) -> Result<Self> {
        genotype.validate(&spec)?;
        let arch = genotype.as_sample(&spec);
        Self::new(spec, weights, arch)
    }

    pub fn spec(&self) -> &SupernetSpec {
        self.net.spec()
    }

    fn build(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = WeightIds::register(g, &self.weights, false);
        let arch = sample_constants(g, &self.arch);
        self.net.forward(g, &w, &arch, x)
    }
}

impl Model for Network {
    fn input_dim(&self) -> usize {
        self.spec().input_dim
    }

    fn classes(&self) -> usize {
        self.spec().classes
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let out = self.build(&mut g, xid)?;
        Ok(g.value(out).clone())
    }

    fn loss_grad(&self, x: &Tensor, y: &[usize]) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let z = self.build(&mut g, xid)?;
        let loss = g.softmax_cross_entropy(z, y)?;
        g.backward(loss)?;
        let grad = g.grad(xid).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        Ok((g.scalar(loss), grad))
    }
}

/// Affine classifier `x W + b`; a small reference model for data and attack
/// tests.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearModel {
    /// Multinomial logistic regression fitted by full-batch gradient descent
    /// from zero weights.
    pub fn fit(x: &Tensor, y: &[usize], classes: usize, iters: usize, lr: f64) -> Result<Self> {
        let mut w = Tensor::zeros((x.ncols(), classes));
        let mut b = Tensor::zeros((1, classes));
        for _ in 0..iters {
            let mut g = Graph::new();
            let wid = g.param(w.clone());
            let bid = g.param(b.clone());
            let xid = g.constant(x.clone());
            let z = g.matmul(xid, wid)?;
            let z = g.add(z, bid)?;
            let loss = g.softmax_cross_entropy(z, y)?;
            g.backward(loss)?;
            w -= &(g.grad(wid).expect("param") * lr);
            b -= &(g.grad(bid).expect("param") * lr);
        }
        Ok(Self { w, b })
    }
}

impl Model for LinearModel {
    fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    fn classes(&self) -> usize {
        self.w.ncols()
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.ncols() != self.w.nrows() {
            return Err(Error::shape("LinearModel", format!("input width {}", x.ncols())));
        }
        Ok(x.dot(&self.w) + &self.b)
    }

    fn loss_grad(&self, x: &Tensor, y: &[usize]) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let w = g.constant(self.w.clone());
        let b = g.constant(self.b.clone());
        let z = g.matmul(xid, w)?;
        let z = g.add(z, b)?;
        let loss = g.softmax_cross_entropy(z, y)?;
        g.backward(loss)?;
        Ok((g.scalar(loss), g.grad(xid).cloned().expect("input is a param")))
    }
}
