use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensor::{DenseMatrix, SparseMatrix};

/// Immutable attributed graph with ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    name: String,
    adjacency: SparseMatrix,
    features: DenseMatrix,
    labels: Vec<usize>,
    num_classes: usize,
}

/// Counts of input irregularities that were repaired while building a
/// dataset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeReport {
    /// Edges dropped because the same undirected pair was already listed
    /// (in either orientation).
    pub duplicate_edges: usize,
    /// `u u` lines dropped; self-loops are never stored.
    pub self_loops: usize,
}

impl GraphDataset {
    /// Validates and assembles a dataset. `adjacency` must be a square,
    /// structurally symmetric 0/1 matrix without self-loops.
    pub fn new(
        name: impl Into<String>,
        adjacency: SparseMatrix,
        features: DenseMatrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        let n = labels.len();
        if adjacency.shape() != (n, n) {
            return Err(DataError::Invalid(format!(
                "adjacency is {}x{} but there are {n} labels",
                adjacency.rows(),
                adjacency.cols()
            )));
        }
        if features.rows() != n {
            return Err(DataError::Invalid(format!(
                "features have {} rows but there are {n} labels",
                features.rows()
            )));
        }
        if !adjacency.is_structurally_symmetric() {
            return Err(DataError::Invalid("adjacency is not symmetric".into()));
        }
        if (0..n).any(|i| adjacency.get(i, i) != 0.0) {
            return Err(DataError::Invalid("adjacency stores a self-loop".into()));
        }
        if let Some((node, &class)) = labels.iter().enumerate().find(|(_, &c)| c >= num_classes) {
            return Err(DataError::Invalid(format!(
                "node {node} has class {class} but there are {num_classes} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            adjacency,
            features,
            labels,
            num_classes,
        })
    }

    /// Builds a dataset from an undirected edge list, dropping self-loops
    /// and repeated pairs.
    pub fn from_edges(
        name: impl Into<String>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: DenseMatrix,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<(Self, EdgeReport), DataError> {
        let n = labels.len();
        let (adjacency, report) = symmetric_adjacency(n, edges)?;
        Ok((Self::new(name, adjacency, features, labels, num_classes)?, report))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        self.adjacency.row(node).0
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency.row_nnz(node)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for &c in &self.labels {
            hist[c] += 1;
        }
        hist
    }
}

fn symmetric_adjacency(
    n: usize,
    edges: impl IntoIterator<Item = (usize, usize)>,
) -> Result<(SparseMatrix, EdgeReport), DataError> {
    let mut report = EdgeReport::default();
    let mut pairs = BTreeSet::new();
    for (u, v) in edges {
        if u >= n || v >= n {
            return Err(DataError::Invalid(format!("edge ({u}, {v}) references a node outside 0..{n}")));
        }
        if u == v {
            report.self_loops += 1;
            continue;
        }
        if !pairs.insert((u.min(v), u.max(v))) {
            report.duplicate_edges += 1;
        }
    }
    let triplets = pairs.iter().flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)]);
    let adjacency = SparseMatrix::from_triplets(n, n, triplets).expect("indices checked above");
    Ok((adjacency, report))
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    name: String,
    num_nodes: usize,
    num_classes: usize,
    num_features: usize,
    undirected: bool,
}

pub const META_FILE: &str = "meta.json";
pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.tsv";
pub const DENSE_FEATURES_FILE: &str = "features-dense.tsv";
pub const LABELS_FILE: &str = "labels.tsv";

/// Loads a dataset directory in the canonical format.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<GraphDataset, DataError> {
    load_dataset_with_report(dir).map(|(d, _)| d)
}

/// Like [`load_dataset`], also reporting deduplicated edges.
pub fn load_dataset_with_report(dir: impl AsRef<Path>) -> Result<(GraphDataset, EdgeReport), DataError> {
    let dir = dir.as_ref();
    let meta_path = require(dir, META_FILE)?;
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| DataError::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&meta_text).map_err(|e| DataError::Parse {
        file: meta_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let n = meta.num_nodes;

    let edges_path = require(dir, EDGES_FILE)?;
    let mut edges = Vec::new();
    for_each_record(&edges_path, |line, fields| {
        let [u, v] = parse_fields::<2>(&edges_path, line, fields)?;
        let (u, v) = (as_node(&edges_path, line, u, n)?, as_node(&edges_path, line, v, n)?);
        edges.push((u, v));
        Ok(())
    })?;
    if !meta.undirected {
        // Only undirected graphs are supported; a directed listing is
        // accepted when it already contains both arcs of every edge.
        let arcs: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
        if let Some(&(u, v)) = arcs.iter().find(|&&(u, v)| !arcs.contains(&(v, u))) {
            return Err(DataError::NonSymmetric { u, v });
        }
    }

    let features = read_features(dir, n, meta.num_features)?;

    let labels_path = require(dir, LABELS_FILE)?;
    let mut labels: Vec<Option<usize>> = vec![None; n];
    for_each_record(&labels_path, |line, fields| {
        let [node, class] = parse_fields::<2>(&labels_path, line, fields)?;
        let node = as_node(&labels_path, line, node, n)?;
        let class = as_usize(&labels_path, line, class)?;
        if class >= meta.num_classes {
            return Err(DataError::LabelOutOfRange {
                file: labels_path.clone(),
                line,
                class,
                num_classes: meta.num_classes,
            });
        }
        if labels[node].replace(class).is_some() {
            return Err(DataError::DuplicateLabel {
                file: labels_path.clone(),
                line,
                node,
            });
        }
        Ok(())
    })?;
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(node, l)| l.ok_or(DataError::MissingLabel { node }))
        .collect::<Result<Vec<_>, _>>()?;

    let (dataset, mut report) = GraphDataset::from_edges(meta.name, edges, features, labels, meta.num_classes)?;
    if !meta.undirected {
        // Both arcs were required above, so each edge is listed twice.
        report.duplicate_edges -= dataset.num_edges();
    }
    Ok((dataset, report))
}

fn read_features(dir: &Path, n: usize, f: usize) -> Result<DenseMatrix, DataError> {
    let sparse = dir.join(FEATURES_FILE);
    let dense = dir.join(DENSE_FEATURES_FILE);
    let mut features = DenseMatrix::zeros(n, f);
    if sparse.is_file() {
        for_each_record(&sparse, |line, fields| {
            let [node, index, value] = parse_fields::<3>(&sparse, line, fields)?;
            let node = as_node(&sparse, line, node, n)?;
            let index = as_usize(&sparse, line, index)?;
            if index >= f {
                return Err(DataError::FeatureOutOfRange {
                    file: sparse.clone(),
                    line,
                    index,
                    num_features: f,
                });
            }
            features.set(node, index, as_f64(&sparse, line, value)?);
            Ok(())
        })?;
    } else if dense.is_file() {
        let mut row = 0usize;
        for_each_record(&dense, |line, fields| {
            if row >= n {
                return Err(DataError::parse(&dense, line, format!("more than {n} feature rows")));
            }
            if fields.len() != f {
                return Err(DataError::parse(&dense, line, format!("expected {f} values, found {}", fields.len())));
            }
            for (j, v) in fields.iter().enumerate() {
                features.set(row, j, as_f64(&dense, line, v)?);
            }
            row += 1;
            Ok(())
        })?;
        if row != n {
            return Err(DataError::parse(&dense, row, format!("expected {n} feature rows, found {row}")));
        }
    } else {
        return Err(DataError::MissingFile(sparse));
    }
    if !features.is_finite() {
        return Err(DataError::Invalid("non-finite feature value".into()));
    }
    Ok(features)
}

fn require(dir: &Path, file: &str) -> Result<PathBuf, DataError> {
    let path = dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(DataError::MissingFile(path))
    }
}

/// Calls `f(line_number, fields)` for every non-empty line, fields split on
/// tabs or spaces. Line numbers are 1-based.
fn for_each_record(
    path: &Path,
    mut f: impl FnMut(usize, &[&str]) -> Result<(), DataError>,
) -> Result<(), DataError> {
    let file = fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        f(i + 1, &fields)?;
    }
    Ok(())
}

fn parse_fields<'a, const K: usize>(path: &Path, line: usize, fields: &[&'a str]) -> Result<[&'a str; K], DataError> {
    fields
        .try_into()
        .map_err(|_| DataError::parse(path, line, format!("expected {K} columns, found {}", fields.len())))
}

fn as_usize(path: &Path, line: usize, s: &str) -> Result<usize, DataError> {
    s.parse()
        .map_err(|_| DataError::parse(path, line, format!("`{s}` is not a non-negative integer")))
}

fn as_node(path: &Path, line: usize, s: &str, n: usize) -> Result<usize, DataError> {
    let node = as_usize(path, line, s)?;
    if node >= n {
        return Err(DataError::NodeOutOfRange {
            file: path.to_path_buf(),
            line,
            node,
            num_nodes: n,
        });
    }
    Ok(node)
}

fn as_f64(path: &Path, line: usize, s: &str) -> Result<f64, DataError> {
    s.parse()
        .map_err(|_| DataError::parse(path, line, format!("`{s}` is not a number")))
}

/// Writes `dataset` in the canonical format (sparse feature triplets).
/// Output is a pure function of the dataset, so equal datasets produce
/// byte-identical directories.
pub fn save_dataset(dataset: &GraphDataset, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;

    let meta = Meta {
        name: dataset.name.clone(),
        num_nodes: dataset.num_nodes(),
        num_classes: dataset.num_classes,
        num_features: dataset.num_features(),
        undirected: true,
    };
    let mut json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    json.push('\n');
    write_file(&dir.join(META_FILE), |w| w.write_all(json.as_bytes()))?;

    write_file(&dir.join(EDGES_FILE), |w| {
        for u in 0..dataset.num_nodes() {
            for &v in dataset.neighbors(u).iter().filter(|&&v| v > u) {
                writeln!(w, "{u}\t{v}")?;
            }
        }
        Ok(())
    })?;

    write_file(&dir.join(FEATURES_FILE), |w| {
        for i in 0..dataset.num_nodes() {
            for (j, &v) in dataset.features.row(i).iter().enumerate() {
                if v != 0.0 {
                    writeln!(w, "{i}\t{j}\t{v}")?;
                }
            }
        }
        Ok(())
    })?;

    write_file(&dir.join(LABELS_FILE), |w| {
        for (i, c) in dataset.labels.iter().enumerate() {
            writeln!(w, "{i}\t{c}")?;
        }
        Ok(())
    })
}

fn write_file(path: &Path, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    body(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| DataError::io(path, e))
}
