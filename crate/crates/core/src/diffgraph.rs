//! Reverse-mode differentiation over dense rank-2 tensors.
//!
//! A [`Graph`] is an append-only arena: every primitive pushes a node whose
//! parents already exist, so node order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Rows are the batch
//! dimension; the only broadcast supported is a `1 x n` row added to every
//! row of a `b x n` tensor.

use ndarray::{s, Array2, Axis};
use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Relu(NodeId),
    /// Non-overlapping column windows; remembers the winning column.
    MaxPool(NodeId, Vec<usize>),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumCols(NodeId),
    Concat(Vec<NodeId>),
    Pick(NodeId, usize, usize),
    /// Mean cross-entropy; keeps the softmax probabilities for the adjoint.
    SoftmaxCe(NodeId, Vec<usize>, Tensor),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape(t: &Tensor) -> (usize, usize) {
    t.dim()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf; no gradient is accumulated for it or through it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        shape(&self.nodes[id.0].value)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::shape("matmul", format!("{ar}x{ac} * {br}x{bc}")));
        }
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    fn check_broadcast(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac == bc && (ar == br || br == 1) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{ar}x{ac} with {br}x{bc}")))
        }
    }

    /// `a + b`; `b` may be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_broadcast("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_broadcast("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let v = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `x * s` for a `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape("mul_scalar", format!("scalar is {:?}", self.shape(s))));
        }
        let v = self.value(x) * self.scalar(s);
        let rg = self.rg(&[x, s]);
        Ok(self.push(v, Op::MulScalar(x, s), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) * c;
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) + c;
        let rg = self.rg(&[x]);
        self.push(v, Op::AddConst(x), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::exp);
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(x).iter().find(|v| !(**v > 0.0)) {
            return Err(Error::domain(format!("ln of non-positive value {bad}")));
        }
        let v = self.value(x).mapv(f64::ln);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Ln(x), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|e| e.max(0.0));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    /// Max over non-overlapping windows of `window` columns.
    pub fn max_pool(&mut self, x: NodeId, window: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if window == 0 || c % window != 0 {
            return Err(Error::shape("max_pool", format!("{c} columns, window {window}")));
        }
        let out_c = c / window;
        let xv = self.value(x);
        let mut v = Array2::zeros((r, out_c));
        let mut arg = Vec::with_capacity(r * out_c);
        for i in 0..r {
            for k in 0..out_c {
                let mut best = k * window;
                for j in k * window + 1..(k + 1) * window {
                    if xv[[i, j]] > xv[[i, best]] {
                        best = j;
                    }
                }
                v[[i, k]] = xv[[i, best]];
                arg.push(best);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::MaxPool(x, arg), rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let v = Array2::from_elem((1, 1), self.value(x).sum() / n);
        let rg = self.rg(&[x]);
        self.push(v, Op::MeanAll(x), rg)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(&[x]);
        self.push(v, Op::SumCols(x), rg)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let rows = self.shape(parts[0]).0;
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).0 != rows) {
            return Err(Error::shape(
                "concat",
                format!("row mismatch {} vs {}", rows, self.shape(*bad).0),
            ));
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("rows checked");
        let rg = self.rg(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    /// The `(r, c)` entry as a `1 x 1` node.
    pub fn pick(&mut self, x: NodeId, r: usize, c: usize) -> Result<NodeId> {
        let (xr, xc) = self.shape(x);
        if r >= xr || c >= xc {
            return Err(Error::shape("pick", format!("({r},{c}) outside {xr}x{xc}")));
        }
        let v = Array2::from_elem((1, 1), self.value(x)[[r, c]]);
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Pick(x, r, c), rg))
    }

    /// Mean softmax cross-entropy of `logits` (batch x classes) against
    /// class indices (the positions of the one-hot labels).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, m) = self.shape(logits);
        if labels.len() != b {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{b} rows, {} labels", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= m) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} with {m} classes"),
            ));
        }
        let z = self.value(logits);
        let mut probs = Array2::zeros((b, m));
        let mut loss = 0.0;
        for i in 0..b {
            let row = z.row(i);
            let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..m {
                probs[[i, j]] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        let v = Array2::from_elem((1, 1), loss / b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(v, Op::SoftmaxCe(logits, labels.to_vec(), probs), rg))
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Accumulates `d root / d leaf` into every trainable leaf.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.shape(root) != (1, 1) {
            return Err(Error::domain(format!(
                "backward needs a scalar root, got {:?}",
                self.shape(root)
            )));
        }
        let mut work: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        work[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                Self::accumulate(&mut self.grads, NodeId(i), g);
                continue;
            }
            self.propagate(i, &g, &mut work);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, work: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let needs = |id: &NodeId| nodes[id.0].requires_grad;
        let val = |id: &NodeId| &nodes[id.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    Self::accumulate(work, *a, g.dot(&val(b).t()));
                }
                if needs(b) {
                    Self::accumulate(work, *b, val(a).t().dot(g));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(a) {
                    Self::accumulate(work, *a, g.clone());
                }
                if needs(b) {
                    let gb = if val(b).nrows() == 1 && g.nrows() != 1 {
                        g.sum_axis(Axis(0)).insert_axis(Axis(0))
                    } else {
                        g.clone()
                    };
                    Self::accumulate(work, *b, gb * sign);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    Self::accumulate(work, *a, g * val(b));
                }
                if needs(b) {
                    Self::accumulate(work, *b, g * val(a));
                }
            }
            Op::MulScalar(x, s) => {
                if needs(x) {
                    Self::accumulate(work, *x, g * val(s)[[0, 0]]);
                }
                if needs(s) {
                    let d = (g * val(x)).sum();
                    Self::accumulate(work, *s, Array2::from_elem((1, 1), d));
                }
            }
            Op::Scale(x, c) => Self::accumulate(work, *x, g * *c),
            Op::AddConst(x) => Self::accumulate(work, *x, g.clone()),
            Op::Exp(x) => Self::accumulate(work, *x, g * &nodes[i].value),
            Op::Ln(x) => Self::accumulate(work, *x, g / val(x)),
            Op::Relu(x) => {
                let mask = val(x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                Self::accumulate(work, *x, g * &mask);
            }
            Op::MaxPool(x, arg) => {
                let (r, c) = shape(val(x));
                let out_c = g.ncols();
                let mut d = Array2::zeros((r, c));
                for row in 0..r {
                    for k in 0..out_c {
                        d[[row, arg[row * out_c + k]]] += g[[row, k]];
                    }
                }
                Self::accumulate(work, *x, d);
            }
            Op::SumAll(x) => {
                Self::accumulate(work, *x, Array2::from_elem(val(x).dim(), g[[0, 0]]));
            }
            Op::MeanAll(x) => {
                let n = val(x).len() as f64;
                Self::accumulate(work, *x, Array2::from_elem(val(x).dim(), g[[0, 0]] / n));
            }
            Op::SumCols(x) => {
                let (r, c) = shape(val(x));
                let d = Array2::from_shape_fn((r, c), |(row, _)| g[[row, 0]]);
                Self::accumulate(work, *x, d);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(p).ncols();
                    if needs(p) {
                        Self::accumulate(work, *p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::Pick(x, r, c) => {
                let mut d = Array2::zeros(val(x).dim());
                d[[*r, *c]] = g[[0, 0]];
                Self::accumulate(work, *x, d);
            }
            Op::SoftmaxCe(logits, labels, probs) => {
                let b = labels.len() as f64;
                let mut d = probs.clone();
                for (row, &y) in labels.iter().enumerate() {
                    d[[row, y]] -= 1.0;
                }
                Self::accumulate(work, *logits, d * (g[[0, 0]] / b));
            }
        }
    }
}

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per tensor (all of them when the tensor is smaller).
    pub coords_per_tensor: usize,
    /// Magnitude below which gradients are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 64,
            floor: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor.
    pub per_tensor: Vec<f64>,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Relative discrepancy `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `build` receives a fresh graph and one leaf per tensor in `params` and
/// must return the scalar output node.
pub fn grad_check<F>(build: F, params: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(cfg.step > 0.0) {
        return Err(Error::domain("grad_check step must be > 0"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<_> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = build(&mut g, &ids)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let ids: Vec<_> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;

    let mut rng = stream_rng(cfg.seed, 0x6772_6164, 0);
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut checked = 0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (t, id) in ids.iter().enumerate() {
        let analytic = g
            .grad(*id)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(params[t].dim()));
        let n = params[t].len();
        let coords: Vec<usize> = if n <= cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst: f64 = 0.0;
        for &k in &coords {
            let cols = params[t].ncols();
            let (r, c) = (k / cols, k % cols);
            let orig = work[t][[r, c]];
            work[t][[r, c]] = orig + cfg.step;
            let up = eval(&work)?;
            work[t][[r, c]] = orig - cfg.step;
            let down = eval(&work)?;
            work[t][[r, c]] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            worst = worst.max(rel_err(analytic[[r, c]], numeric, cfg.floor));
        }
        checked += coords.len();
        per_tensor.push(worst);
    }
    let max_rel_err = per_tensor.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_tensor,
        max_rel_err,
        coords_checked: checked,
    })
}
