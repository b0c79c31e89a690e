//! Dataset format, adjacency normalization, splits, and synthetic graphs.

mod dataset;
mod sbm;
mod split;

use std::path::{Path, PathBuf};

pub use dataset::{
    load_dataset, load_dataset_with_report, save_dataset, EdgeReport, GraphDataset, DENSE_FEATURES_FILE,
    EDGES_FILE, FEATURES_FILE, LABELS_FILE, META_FILE,
};
pub use sbm::{generate_sbm, FeatureModel, SbmConfig};
pub use split::{make_initial_split, unlabeled_neighbor_count, ALState};

use thiserror::Error;

use crate::tensor::SparseMatrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", file.display())]
    Parse { file: PathBuf, line: usize, message: String },
    #[error("{}:{line}: node {node} out of range (num_nodes = {num_nodes})", file.display())]
    NodeOutOfRange {
        file: PathBuf,
        line: usize,
        node: usize,
        num_nodes: usize,
    },
    #[error("{}:{line}: feature index {index} out of range (num_features = {num_features})", file.display())]
    FeatureOutOfRange {
        file: PathBuf,
        line: usize,
        index: usize,
        num_features: usize,
    },
    #[error("{}:{line}: class {class} out of range (num_classes = {num_classes})", file.display())]
    LabelOutOfRange {
        file: PathBuf,
        line: usize,
        class: usize,
        num_classes: usize,
    },
    #[error("{}:{line}: node {node} labeled twice", file.display())]
    DuplicateLabel { file: PathBuf, line: usize, node: usize },
    #[error("node {node} has no label")]
    MissingLabel { node: usize },
    #[error("edge list is not symmetric: ({u}, {v}) has no reverse")]
    NonSymmetric { u: usize, v: usize },
    #[error("class {class} has {count} nodes; at least 3 are required")]
    ClassTooSmall { class: usize, count: usize },
    #[error("invalid probabilities: need 0 <= p_out < p_in <= 1, got p_in = {p_in}, p_out = {p_out}")]
    InvalidProbabilities { p_in: f64, p_out: f64 },
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        Self::Parse {
            file: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` where `D̃` holds the degrees of `A + I`.
/// Isolated nodes keep a unit self-loop.
pub fn normalized_adjacency(dataset: &GraphDataset) -> SparseMatrix {
    let a = dataset.adjacency();
    let n = a.rows();
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / ((a.row_nnz(i) + 1) as f64).sqrt()).collect();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(a.nnz() + n);
    let mut values = Vec::with_capacity(a.nnz() + n);
    indptr.push(0);
    for i in 0..n {
        let (cols, _) = a.row(i);
        let split = cols.partition_point(|&j| j < i);
        let ordered = cols[..split].iter().chain(std::iter::once(&i)).chain(&cols[split..]);
        for &j in ordered {
            indices.push(j);
            values.push(inv_sqrt[i] * inv_sqrt[j]);
        }
        indptr.push(indices.len());
    }
    SparseMatrix::from_csr(n, n, indptr, indices, values).expect("normalized adjacency keeps CSR order")
}
