//! Plain (untaped) matrix kernels. The tape reuses these for its forward
//! values and for the products that appear in backward rules.

use std::sync::Arc;

use super::{DenseMatrix, SparseMatrix, TensorError};
use crate::par;

fn check(op: &'static str, ok: bool, lhs: (usize, usize), rhs: (usize, usize)) -> Result<(), TensorError> {
    if ok {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch { op, lhs, rhs })
    }
}

/// `a · b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
    check("matmul", a.cols() == b.rows(), a.shape(), b.shape())?;
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = DenseMatrix::zeros(n, m);
    par::for_each_row_mut(out.data_mut(), m, n * k * m, |i, row| {
        for (p, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(row, aik, b.row(p));
            }
        }
    });
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
    check("matmul_tn", a.rows() == b.rows(), a.shape(), b.shape())?;
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = DenseMatrix::zeros(k, m);
    par::for_each_row_mut(out.data_mut(), m, n * k * m, |r, row| {
        for i in 0..n {
            let air = a.data()[i * k + r];
            if air != 0.0 {
                axpy(row, air, b.row(i));
            }
        }
    });
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
    check("matmul_nt", a.cols() == b.cols(), a.shape(), b.shape())?;
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    let mut out = DenseMatrix::zeros(n, m);
    par::for_each_row_mut(out.data_mut(), m, n * k * m, |i, row| {
        let ai = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, b.row(j));
        }
    });
    Ok(out)
}

/// Sparse-times-dense product `s · d`.
pub fn spmm(s: &SparseMatrix, d: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
    check("spmm", s.cols() == d.rows(), s.shape(), d.shape())?;
    let m = d.cols();
    let mut out = DenseMatrix::zeros(s.rows(), m);
    par::for_each_row_mut(out.data_mut(), m, s.nnz() * m, |i, row| {
        let (cols, vals) = s.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            axpy(row, v, d.row(j));
        }
    });
    Ok(out)
}

/// `sᵀ · d` by scattering rows, for operators whose transpose is not stored.
pub fn spmm_tn(s: &SparseMatrix, d: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
    check("spmm_tn", s.rows() == d.rows(), s.shape(), d.shape())?;
    let m = d.cols();
    let mut out = DenseMatrix::zeros(s.cols(), m);
    let data = out.data_mut();
    for i in 0..s.rows() {
        let (cols, vals) = s.row(i);
        let src = d.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            axpy(&mut data[j * m..(j + 1) * m], v, src);
        }
    }
    Ok(out)
}

pub fn relu(m: &DenseMatrix) -> DenseMatrix {
    m.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    let cols = out.cols();
    par::for_each_row_mut(out.data_mut(), cols, logits.rows() * cols * 8, |_, row| {
        softmax_in_place(row);
    });
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Natural-log softmax of one row.
pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

pub(crate) fn validate_rows(op: &'static str, rows: &[usize], n: usize) -> Result<(), TensorError> {
    if rows.is_empty() {
        return Err(TensorError::EmptyRowSet { op });
    }
    if let Some(&row) = rows.iter().find(|&&r| r >= n) {
        return Err(TensorError::RowOutOfRange { op, row, rows: n });
    }
    Ok(())
}

/// Mean over `rows` of `-Σ_k targets[i,k] · log softmax(logits)[i,k]`.
///
/// Targets are used as given: they are not renormalized, so scaled or
/// perturbed soft labels keep their magnitude.
pub fn cross_entropy_soft(
    logits: &DenseMatrix,
    targets: &DenseMatrix,
    rows: &[usize],
) -> Result<f64, TensorError> {
    check(
        "cross_entropy_soft",
        logits.shape() == targets.shape(),
        logits.shape(),
        targets.shape(),
    )?;
    validate_rows("cross_entropy_soft", rows, logits.rows())?;
    let mut log_p = vec![0.0; logits.cols()];
    let mut total = 0.0;
    for &i in rows {
        log_softmax_row(logits.row(i), &mut log_p);
        total -= dot(targets.row(i), &log_p);
    }
    Ok(total / rows.len() as f64)
}

/// Mean Shannon entropy (nats) of the probability rows in `rows`, with
/// `0 · log 0 = 0`.
pub fn entropy_rows(probs: &DenseMatrix, rows: &[usize]) -> Result<f64, TensorError> {
    validate_rows("entropy_rows", rows, probs.rows())?;
    let mut total = 0.0;
    for &i in rows {
        for (col, &p) in probs.row(i).iter().enumerate() {
            if p < 0.0 {
                return Err(TensorError::NegativeProbability { row: i, col, value: p });
            }
        }
        total += entropy(probs.row(i));
    }
    Ok(total / rows.len() as f64)
}

/// Entropy in nats of a single distribution.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A constant sparse matrix, usually paired with its transpose so that
/// products with either orientation (and their gradients) are plain
/// row-parallel spmm.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    forward: Arc<SparseMatrix>,
    transpose: Option<Arc<SparseMatrix>>,
}

impl SparseOperator {
    pub fn new(matrix: SparseMatrix) -> Self {
        let forward = Arc::new(matrix);
        let transpose = if forward.is_structurally_symmetric() && is_value_symmetric(&forward) {
            Arc::clone(&forward)
        } else {
            Arc::new(forward.transpose())
        };
        Self {
            forward,
            transpose: Some(transpose),
        }
    }

    /// Without a stored transpose; transposed products scatter instead.
    /// Cheaper for matrices used in a single forward/backward pass.
    pub fn single_use(matrix: SparseMatrix) -> Self {
        Self {
            forward: Arc::new(matrix),
            transpose: None,
        }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.forward
    }

    pub fn transposed(&self) -> Self {
        let transpose = self
            .transpose
            .clone()
            .unwrap_or_else(|| Arc::new(self.forward.transpose()));
        Self {
            forward: transpose,
            transpose: Some(Arc::clone(&self.forward)),
        }
    }

    pub fn apply(&self, d: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
        spmm(&self.forward, d)
    }

    pub fn apply_transpose(&self, d: &DenseMatrix) -> Result<DenseMatrix, TensorError> {
        match &self.transpose {
            Some(t) => spmm(t, d),
            None => spmm_tn(&self.forward, d),
        }
    }
}

fn is_value_symmetric(s: &SparseMatrix) -> bool {
    (0..s.rows()).all(|i| {
        let (cols, vals) = s.row(i);
        cols.iter().zip(vals).all(|(&j, &v)| s.get(j, i) == v)
    })
}
