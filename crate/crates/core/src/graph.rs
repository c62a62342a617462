//! Per-state temporal record graph and its symmetric normalized adjacency
//! `D̃^{-1/2} (A + I) D̃^{-1/2}` in CSR form.

use std::collections::BTreeSet;
use std::io::Write;

use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::ingestion::Dataset;
use crate::matrix::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("feature matrix has {found} rows but the dataset has {expected} records")]
    RowCountMismatch { expected: usize, found: usize },
    #[error("edge ({0}, {1}) references a node outside [0, {2})")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("explicit self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate undirected edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("train and test masks overlap at node {0}")]
    OverlappingMasks(usize),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGraph {
    pub x: FeatureMatrix,
    /// Undirected edges stored with `a < b`.
    pub edges: Vec<(usize, usize)>,
    pub y: Vec<u8>,
    pub train_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl TemporalGraph {
    /// Validates and canonicalizes an arbitrary undirected edge list.
    pub fn from_edges(x: FeatureMatrix, edges: &[(usize, usize)], y: Vec<u8>) -> Result<Self> {
        let n = x.n_rows();
        if y.len() != n {
            return Err(GraphError::RowCountMismatch {
                expected: n,
                found: y.len(),
            });
        }
        let mut seen = BTreeSet::new();
        let mut canon = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(GraphError::EdgeOutOfRange(a, b, n));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(GraphError::DuplicateEdge(e.0, e.1));
            }
            canon.push(e);
        }
        Ok(Self {
            x,
            edges: canon,
            y,
            train_mask: vec![false; n],
            test_mask: vec![false; n],
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.y.len()
    }

    pub fn with_masks(mut self, train: &[usize], test: &[usize]) -> Result<Self> {
        let n = self.n_nodes();
        let mut tr = vec![false; n];
        let mut te = vec![false; n];
        for &i in train {
            tr[i] = true;
        }
        for &i in test {
            if tr[i] {
                return Err(GraphError::OverlappingMasks(i));
            }
            te[i] = true;
        }
        self.train_mask = tr;
        self.test_mask = te;
        Ok(self)
    }

    pub fn write_edges_csv<W: Write>(&self, sink: W) -> std::result::Result<(), csv::Error> {
        crate::ingestion::write_rows(
            sink,
            &["src", "dst"],
            self.edges.iter().map(|(a, b)| vec![a.to_string(), b.to_string()]),
        )
    }

    pub fn write_nodes_csv<W: Write>(&self, sink: W) -> std::result::Result<(), csv::Error> {
        let mut header = vec!["node", "state", "t", "label"];
        header.extend(self.x.names.iter().map(String::as_str));
        crate::ingestion::write_rows(
            sink,
            &header,
            (0..self.n_nodes()).map(|i| {
                let (s, t) = &self.x.row_keys[i];
                let mut row = vec![i.to_string(), s.clone(), t.to_string(), self.y[i].to_string()];
                row.extend(self.x.values.row(i).iter().map(f64::to_string));
                row
            }),
        )
    }
}

/// Chains consecutive records inside each state. No edges cross states.
pub fn build_temporal_graph(d: &Dataset, x: FeatureMatrix) -> Result<TemporalGraph> {
    if x.n_rows() != d.len() {
        return Err(GraphError::RowCountMismatch {
            expected: d.len(),
            found: x.n_rows(),
        });
    }
    let edges: Vec<(usize, usize)> = d
        .state_index()
        .iter()
        .flat_map(|s| s.range.clone().zip(s.range.clone().skip(1)))
        .collect();
    let n = d.len();
    Ok(TemporalGraph {
        x,
        edges,
        y: d.labels(),
        train_mask: vec![false; n],
        test_mask: vec![false; n],
    })
}

/// Symmetric sparse matrix in CSR layout with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.values[r.start + k],
            Err(_) => 0.0,
        }
    }

    /// `Â · H`. Also `Âᵀ · H`, since Â is symmetric.
    pub fn matmul(&self, h: &Matrix) -> Matrix {
        assert_eq!(h.rows(), self.n, "adjacency/feature row mismatch");
        let mut out = Matrix::zeros(self.n, h.cols());
        for i in 0..self.n {
            let out_row = out.row_mut(i);
            for (j, a) in self.row(i) {
                for (o, v) in out_row.iter_mut().zip(h.row(j)) {
                    *o += a * v;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }
}

pub fn normalized_adjacency(g: &TemporalGraph) -> NormalizedAdjacency {
    normalized_adjacency_from_edges(g.n_nodes(), &g.edges)
}

/// Builds Â from canonical undirected edges without self-loops.
pub fn normalized_adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> NormalizedAdjacency {
    let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for &(a, b) in edges {
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    let degree: Vec<usize> = neighbors.iter().map(Vec::len).collect();
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    for (i, nb) in neighbors.iter_mut().enumerate() {
        nb.sort_unstable();
        for &j in nb.iter() {
            col_idx.push(j);
            // The integer product is exact and commutative, so Â[i][j] and
            // Â[j][i] are bitwise identical.
            values.push(1.0 / ((degree[i] * degree[j]) as f64).sqrt());
        }
        row_ptr.push(col_idx.len());
    }
    NormalizedAdjacency {
        n,
        row_ptr,
        col_idx,
        values,
    }
}
