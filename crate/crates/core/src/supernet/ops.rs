//! The candidate operation set.
//!
//! Operations act on feature vectors (rows of a `batch x width` tensor).
//! Every edge has a stride: 1 keeps the width, 2 halves it. The four
//! weight-bearing kinds are `x -> relu(x) W` with `W` restricted to a
//! banded, circulant-indexed pattern; their Lipschitz constant is the
//! spectral norm of the masked `W`. The parameter-free kinds have exact
//! constants: average pooling over `S` entries is `S^-0.5`, max pooling
//! and identity are 1, zero is 0.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationKind {
    SepLinA,
    SepLinB,
    DilLinA,
    DilLinB,
    AvgPool,
    MaxPool,
    Skip,
    Zero,
}

impl OperationKind {
    pub const ALL: [OperationKind; 8] = [
        OperationKind::SepLinA,
        OperationKind::SepLinB,
        OperationKind::DilLinA,
        OperationKind::DilLinB,
        OperationKind::AvgPool,
        OperationKind::MaxPool,
        OperationKind::Skip,
        OperationKind::Zero,
    ];

    /// Kinds that own a weight matrix, in storage order.
    pub const WEIGHTED: [OperationKind; 4] = [
        OperationKind::SepLinA,
        OperationKind::SepLinB,
        OperationKind::DilLinA,
        OperationKind::DilLinB,
    ];

    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Slot in the per-edge weight table, for weight-bearing kinds.
    pub fn weight_slot(self) -> Option<usize> {
        Self::WEIGHTED.iter().position(|k| *k == self)
    }

    /// Column offsets (relative to the stride-aligned centre) that the
    /// weight pattern may touch.
    pub fn offsets(self) -> &'static [isize] {
        match self {
            OperationKind::SepLinA => &[-1, 0, 1],
            OperationKind::SepLinB => &[-2, -1, 0, 1, 2],
            OperationKind::DilLinA => &[-2, 0, 2],
            OperationKind::DilLinB => &[-4, -2, 0, 2, 4],
            _ => &[],
        }
    }

    pub fn rule(self, stride: usize) -> LipschitzRule {
        match self {
            OperationKind::AvgPool => LipschitzRule::Constant((stride as f64).powf(-0.5)),
            OperationKind::MaxPool | OperationKind::Skip => LipschitzRule::Constant(1.0),
            OperationKind::Zero => LipschitzRule::Constant(0.0),
            _ => LipschitzRule::SpectralNorm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OperationKind::SepLinA => "sep_lin_a",
            OperationKind::SepLinB => "sep_lin_b",
            OperationKind::DilLinA => "dil_lin_a",
            OperationKind::DilLinB => "dil_lin_b",
            OperationKind::AvgPool => "avg_pool",
            OperationKind::MaxPool => "max_pool",
            OperationKind::Skip => "skip",
            OperationKind::Zero => "zero",
        }
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::domain(format!("unknown operation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LipschitzRule {
    Constant(f64),
    SpectralNorm,
}

/// Lipschitz constant of one operation; weight-bearing kinds need their
/// (masked) weight matrix.
pub fn op_lipschitz(kind: OperationKind, stride: usize, weight: Option<&Tensor>) -> f64 {
    match kind.rule(stride) {
        LipschitzRule::Constant(c) => c,
        LipschitzRule::SpectralNorm => weight.map(super::spectral::spectral_norm).unwrap_or(0.0),
    }
}

/// Sparsity pattern of a weight-bearing kind mapping `in_w` columns to
/// `in_w / stride` columns.
pub fn weight_mask(kind: OperationKind, in_w: usize, stride: usize) -> Tensor {
    let out_w = in_w / stride;
    let mut m = Array2::zeros((in_w, out_w));
    for k in 0..out_w {
        let centre = (k * stride) as isize;
        for off in kind.offsets() {
            let row = (centre + off).rem_euclid(in_w as isize) as usize;
            m[[row, k]] = 1.0;
        }
    }
    m
}

/// Fixed linear maps used by the parameter-free kinds and by cell-input
/// folding, keyed by the input width.
#[derive(Debug, Clone)]
pub struct FixedMaps {
    in_w: usize,
    /// Circular 3-tap mean (stride 1) or pairwise mean (stride 2).
    avg: [Tensor; 2],
    /// Even-column selection for the stride-2 identity.
    subsample: Tensor,
    /// `(in_w x out_w)` weight masks per weighted kind and stride.
    masks: [[Tensor; 4]; 2],
}

impl FixedMaps {
    pub fn new(in_w: usize) -> Self {
        let half = in_w / 2;
        let mut avg1 = Array2::zeros((in_w, in_w));
        for k in 0..in_w {
            for d in [in_w - 1, 0, 1] {
                avg1[[(k + d) % in_w, k]] += 1.0 / 3.0;
            }
        }
        let mut avg2 = Array2::zeros((in_w, half));
        let mut subsample = Array2::zeros((in_w, half));
        for k in 0..half {
            avg2[[2 * k, k]] = 0.5;
            avg2[[2 * k + 1, k]] = 0.5;
            subsample[[2 * k, k]] = 1.0;
        }
        let masks = [1, 2].map(|stride| OperationKind::WEIGHTED.map(|kind| weight_mask(kind, in_w, stride)));
        Self {
            in_w,
            avg: [avg1, avg2],
            subsample,
            masks,
        }
    }

    pub fn in_width(&self) -> usize {
        self.in_w
    }

    pub fn mask(&self, kind: OperationKind, stride: usize) -> Option<&Tensor> {
        kind.weight_slot().map(|s| &self.masks[stride - 1][s])
    }
}

/// Applies `kind` to `x` inside the graph. `weight` must be given for the
/// weight-bearing kinds. Returns `None` for `Zero`, whose output is
/// identically zero and contributes nothing.
pub fn apply_op(
    g: &mut Graph,
    kind: OperationKind,
    x: NodeId,
    stride: usize,
    maps: &FixedMaps,
    weight: Option<NodeId>,
) -> Result<Option<NodeId>> {
    if !(stride == 1 || stride == 2) {
        return Err(Error::domain(format!("unsupported stride {stride}")));
    }
    let w_in = g.shape(x).1;
    if w_in != maps.in_w {
        return Err(Error::shape("apply_op", format!("input width {w_in}, maps for {}", maps.in_w)));
    }
    let out = match kind {
        OperationKind::Zero => return Ok(None),
        OperationKind::Skip if stride == 1 => x,
        OperationKind::Skip => {
            let s = g.constant(maps.subsample.clone());
            g.matmul(x, s)?
        }
        OperationKind::AvgPool => {
            let a = g.constant(maps.avg[stride - 1].clone());
            g.matmul(x, a)?
        }
        OperationKind::MaxPool if stride == 2 => g.max_pool(x, 2)?,
        OperationKind::MaxPool => {
            // Sorted pairs: (max, min) of each adjacent pair, width preserved.
            let hi = g.max_pool(x, 2)?;
            let neg = g.scale(x, -1.0);
            let lo = g.max_pool(neg, 2)?;
            let lo = g.scale(lo, -1.0);
            g.concat(&[hi, lo])?
        }
        _ => {
            let w = weight.ok_or_else(|| Error::domain(format!("{kind} needs a weight")))?;
            let mask = g.constant(maps.mask(kind, stride).expect("weighted kind").clone());
            let wm = g.mul(w, mask)?;
            let r = g.relu(x);
            g.matmul(r, wm)?
        }
    };
    Ok(Some(out))
}

/// `(1/sqrt(k)) * sum of the k column blocks of width in_w / k`. Norm
/// non-expanding by Cauchy-Schwarz; identity when `k == 1`.
pub fn fold_matrix(in_w: usize, out_w: usize) -> Result<Tensor> {
    if out_w == 0 || !in_w.is_multiple_of(out_w) {
        return Err(Error::shape("fold", format!("{in_w} does not fold onto {out_w}")));
    }
    let k = in_w / out_w;
    let c = 1.0 / (k as f64).sqrt();
    let mut m = Array2::zeros((in_w, out_w));
    for b in 0..k {
        for t in 0..out_w {
            m[[b * out_w + t, t]] = c;
        }
    }
    Ok(m)
}
