use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Shape of the supernet. Each cell has two input nodes and `n_nodes`
/// intermediate nodes; node `j` receives an edge from every `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupernetSpec {
    pub n_cells: usize,
    /// Intermediate nodes per cell (inputs excluded).
    pub n_nodes: usize,
    /// Node width of the first cell.
    pub width: usize,
    pub input_dim: usize,
    pub classes: usize,
    /// Indices of reduction cells.
    pub reduction_cells: Vec<usize>,
}

impl Default for SupernetSpec {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellType {
    Normal,
    Reduce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

impl SupernetSpec {
    /// 4 cells (reduction at index 2), 4 intermediate nodes, width 16,
    /// 16 inputs, 8 classes.
    pub fn desk() -> Self {
        Self {
            n_cells: 4,
            n_nodes: 4,
            width: 16,
            input_dim: 16,
            classes: 8,
            reduction_cells: vec![2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells == 0 || self.n_nodes == 0 || self.width == 0 {
            return Err(Error::domain("n_cells, n_nodes and width must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::domain("need at least two classes"));
        }
        if self.input_dim == 0 || !self.input_dim.is_multiple_of(self.width) {
            return Err(Error::domain(format!(
                "input_dim {} must be a positive multiple of width {}",
                self.input_dim, self.width
            )));
        }
        if let Some(bad) = self.reduction_cells.iter().find(|c| **c >= self.n_cells) {
            return Err(Error::domain(format!("reduction cell {bad} out of range")));
        }
        let mut w = self.width;
        for c in 0..self.n_cells {
            if self.is_reduction(c) {
                if !w.is_multiple_of(2) || w < 2 {
                    return Err(Error::domain(format!("cell {c} cannot halve width {w}")));
                }
                w /= 2;
            }
        }
        Ok(())
    }

    pub fn is_reduction(&self, cell: usize) -> bool {
        self.reduction_cells.contains(&cell)
    }

    pub fn cell_type(&self, cell: usize) -> CellType {
        if self.is_reduction(cell) {
            CellType::Reduce
        } else {
            CellType::Normal
        }
    }

    /// Total nodes per cell, inputs included.
    pub fn total_nodes(&self) -> usize {
        self.n_nodes + 2
    }

    pub fn n_edges(&self) -> usize {
        let n = self.total_nodes();
        n * (n - 1) / 2 - 1
    }

    /// Edges ordered by target node, then source.
    pub fn edges(&self) -> Vec<Edge> {
        (2..self.total_nodes())
            .flat_map(|to| (0..to).map(move |from| Edge { from, to }))
            .collect()
    }

    pub fn edge_index(&self, from: usize, to: usize) -> usize {
        debug_assert!(from < to && to >= 2 && to < self.total_nodes());
        to * (to - 1) / 2 - 1 + from
    }

    /// Edge indices feeding intermediate node `to`.
    pub fn incoming(&self, to: usize) -> std::ops::Range<usize> {
        let start = self.edge_index(0, to);
        start..start + to
    }

    /// Input width of each cell.
    pub fn in_widths(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_cells);
        let mut w = self.width;
        for c in 0..self.n_cells {
            out.push(w);
            if self.is_reduction(c) {
                w /= 2;
            }
        }
        out
    }

    /// Node width of each cell.
    pub fn widths(&self) -> Vec<usize> {
        self.in_widths()
            .iter()
            .enumerate()
            .map(|(c, w)| if self.is_reduction(c) { w / 2 } else { *w })
            .collect()
    }

    /// Stride of `edge` in `cell`: input edges of a reduction cell halve.
    pub fn stride(&self, cell: usize, edge: Edge) -> usize {
        if self.is_reduction(cell) && edge.from < 2 {
            2
        } else {
            1
        }
    }

    /// Width of a cell's concatenated output.
    pub fn cell_out_width(&self, cell: usize) -> usize {
        self.widths()[cell] * self.n_nodes
    }

    pub fn classifier_in(&self) -> usize {
        self.cell_out_width(self.n_cells - 1)
    }

    /// Short content hash, recorded in genotypes.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
