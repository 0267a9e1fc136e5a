//! Patch-grid adjacency and graph-convolutional positional embeddings.
//!
//! Patches of an `rows x cols` grid are nodes indexed row-major
//! (`row * cols + col`). In one-way mode each node points at the patch to its
//! right and the patch below it; bidirectional mode adds the reverse edges.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdjacencyMode {
    OneWay,
    Bidirectional,
}

impl AdjacencyMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdjacencyMode::OneWay => "one-way",
            AdjacencyMode::Bidirectional => "bidirectional",
        }
    }
}

/// Directed 0/1 adjacency over grid nodes, without self-loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    rows: usize,
    cols: usize,
    mode: AdjacencyMode,
    entries: Vec<u8>,
}

impl AdjacencyMatrix {
    /// Number of nodes.
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn mode(&self) -> AdjacencyMode {
        self.mode
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.entries[i * self.n() + j]
    }

    /// All `(from, to)` pairs with a 1 entry, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.get(i, j) == 1)
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.entries.iter().map(|&e| e as usize).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.n();
        (0..n).all(|i| (0..n).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

pub fn build_grid_adjacency(rows: usize, cols: usize, mode: AdjacencyMode) -> Result<AdjacencyMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(
            "build_grid_adjacency",
            format!("grid must be at least 1x1, got {rows}x{cols}"),
        ));
    }
    let n = rows * cols;
    let mut entries = vec![0u8; n * n];
    let mut link = |from: usize, to: usize| {
        entries[from * n + to] = 1;
        if mode == AdjacencyMode::Bidirectional {
            entries[to * n + from] = 1;
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                link(i, i + 1);
            }
            if r + 1 < rows {
                link(i, i + cols);
            }
        }
    }
    Ok(AdjacencyMatrix {
        rows,
        cols,
        mode,
        entries,
    })
}

/// Row-stochastic `D^-1 (A + I)`, where `D` holds the row sums of `A + I`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    entries: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        let data = self.entries.iter().map(|&v| T::of(v)).collect();
        Tensor::new([self.n, self.n], data).expect("n >= 1")
    }
}

pub fn normalize_adjacency(a: &AdjacencyMatrix) -> NormalizedAdjacency {
    let n = a.n();
    let mut entries = Vec::with_capacity(n * n);
    for i in 0..n {
        let row: Vec<f64> = (0..n)
            .map(|j| a.get(i, j) as f64 + if i == j { 1.0 } else { 0.0 })
            .collect();
        let degree: f64 = row.iter().sum();
        entries.extend(row.into_iter().map(|v| v / degree));
    }
    NormalizedAdjacency { n, entries }
}

/// One graph-convolution layer, `ReLU(A_hat · x · w)`, used as a positional
/// embedding.
///
/// `x` is `[N, D]` or batched `[B, N, D]`; `w` is `[D, D]`.
pub fn gcn_positional_embedding<T: Float>(
    x: &Tensor<T>,
    a_hat: &NormalizedAdjacency,
    w: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = x.dims();
    let d = x.shape().last();
    if !(2..=3).contains(&dims.len()) || dims[dims.len() - 2] != a_hat.n() || w.dims() != [d, d] {
        return Err(Error::shape(
            "gcn_positional_embedding",
            format!("x {:?}, A_hat {}x{}, w {:?}", dims, a_hat.n(), a_hat.n(), w.dims()),
        ));
    }
    let a = a_hat.to_tensor::<T>();
    Ok(a.matmul(&x.matmul(w)?)?.relu())
}
