//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to its variables in execution
//! order, so node indices are already a topological order. [`Tape::backward`]
//! walks the nodes once, from the loss down to index 0, accumulating
//! vector-Jacobian products.
//!
//! Only nodes that depend on a leaf carry gradients; constants and sparse
//! operators never do. Because the unrolled inner optimizer writes its own
//! gradient computation as ordinary tape operations, one backward pass
//! differentiates through the whole optimization trajectory.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::ops::{self, SparseOperator};
use super::{DenseMatrix, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    MatMulTn(usize, usize),
    MatMulNt(usize, usize),
    Spmm(SparseOperator, usize),
    LinComb(Vec<(usize, f64)>),
    Hadamard(usize, usize),
    Relu(usize),
    MaskPositive { gate: usize, input: usize },
    SoftmaxRows(usize),
    RowSums(usize),
    ScaleRows { input: usize, factors: usize },
    ScatterRows { input: usize, rows: Arc<[usize]> },
    CrossEntropySoft { logits: usize, targets: usize, rows: Arc<[usize]> },
    EntropyRows { probs: usize, rows: Arc<[usize]> },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of differentiable matrix operations.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> Result<&DenseMatrix, TensorError> {
        Ok(&self.nodes[self.resolve(var)?].value)
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, var: Var) -> Result<f64, TensorError> {
        let value = self.value(var)?;
        if value.shape() != (1, 1) {
            return Err(TensorError::NotScalar { shape: value.shape() });
        }
        Ok(value.data()[0])
    }

    /// True when `var` is a leaf, or is computed from at least one leaf.
    pub fn requires_grad(&self, var: Var) -> Result<bool, TensorError> {
        Ok(self.nodes[self.resolve(var)?].requires_grad)
    }

    /// True when `from` lies on some recorded path into `to`.
    pub fn depends_on(&self, to: Var, from: Var) -> Result<bool, TensorError> {
        let (to, from) = (self.resolve(to)?, self.resolve(from)?);
        if from > to {
            return Ok(false);
        }
        let mut reach = vec![false; to + 1];
        reach[to] = true;
        for idx in (from..=to).rev() {
            if !reach[idx] {
                continue;
            }
            if idx == from {
                return Ok(true);
            }
            for input in inputs(&self.nodes[idx].op) {
                reach[input] = true;
            }
        }
        Ok(false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.resolve(a)?, self.resolve(b)?);
        let value = ops::matmul(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push_derived(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.resolve(a)?, self.resolve(b)?);
        let value = ops::matmul_tn(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push_derived(value, Op::MatMulTn(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.resolve(a)?, self.resolve(b)?);
        let value = ops::matmul_nt(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push_derived(value, Op::MatMulNt(a, b), &[a, b]))
    }

    /// `s · d` for a constant sparse `s`; gradients reach `d` only.
    pub fn spmm(&mut self, s: &SparseOperator, d: Var) -> Result<Var, TensorError> {
        let d = self.resolve(d)?;
        let value = s.apply(&self.nodes[d].value)?;
        Ok(self.push_derived(value, Op::Spmm(s.clone(), d), &[d]))
    }

    /// `Σ coeff_i · var_i` over equally shaped operands.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var, TensorError> {
        let mut resolved = Vec::with_capacity(terms.len());
        for &(v, c) in terms {
            resolved.push((self.resolve(v)?, c));
        }
        let Some(&(first, _)) = resolved.first() else {
            return Err(TensorError::EmptyOperands { op: "lin_comb" });
        };
        let shape = self.nodes[first].value.shape();
        let mut value = DenseMatrix::zeros(shape.0, shape.1);
        for &(idx, c) in &resolved {
            let operand = &self.nodes[idx].value;
            if operand.shape() != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "lin_comb",
                    lhs: shape,
                    rhs: operand.shape(),
                });
            }
            value.add_scaled(operand, c);
        }
        let idxs: Vec<usize> = resolved.iter().map(|&(i, _)| i).collect();
        Ok(self.push_derived(value, Op::LinComb(resolved), &idxs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.lin_comb(&[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.lin_comb(&[(a, 1.0), (b, -1.0)])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        self.lin_comb(&[(a, factor)])
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (a, b) = (self.resolve(a)?, self.resolve(b)?);
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "hadamard",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = DenseMatrix::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push_derived(value, Op::Hadamard(a, b), &[a, b]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let a = self.resolve(a)?;
        let value = ops::relu(&self.nodes[a].value);
        Ok(self.push_derived(value, Op::Relu(a), &[a]))
    }

    /// `input` where `gate > 0`, zero elsewhere. The gate is treated as a
    /// piecewise-constant selector and receives no gradient, which is the
    /// derivative of the ReLU derivative almost everywhere.
    pub fn mask_positive(&mut self, gate: Var, input: Var) -> Result<Var, TensorError> {
        let (g, i) = (self.resolve(gate)?, self.resolve(input)?);
        let (vg, vi) = (&self.nodes[g].value, &self.nodes[i].value);
        if vg.shape() != vi.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mask_positive",
                lhs: vg.shape(),
                rhs: vi.shape(),
            });
        }
        let data = vg
            .data()
            .iter()
            .zip(vi.data())
            .map(|(&g, &x)| if g > 0.0 { x } else { 0.0 })
            .collect();
        let value = DenseMatrix::from_vec(vi.rows(), vi.cols(), data)?;
        Ok(self.push_derived(value, Op::MaskPositive { gate: g, input: i }, &[i]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let a = self.resolve(a)?;
        let value = ops::softmax_rows(&self.nodes[a].value);
        Ok(self.push_derived(value, Op::SoftmaxRows(a), &[a]))
    }

    /// Column vector of row sums.
    pub fn row_sums(&mut self, a: Var) -> Result<Var, TensorError> {
        let a = self.resolve(a)?;
        let m = &self.nodes[a].value;
        let data = (0..m.rows()).map(|i| m.row(i).iter().sum()).collect();
        let value = DenseMatrix::from_vec(m.rows(), 1, data)?;
        Ok(self.push_derived(value, Op::RowSums(a), &[a]))
    }

    /// Multiplies row `i` of `input` by `factors[i, 0]`.
    pub fn scale_rows(&mut self, input: Var, factors: Var) -> Result<Var, TensorError> {
        let (i, f) = (self.resolve(input)?, self.resolve(factors)?);
        let (m, fv) = (&self.nodes[i].value, &self.nodes[f].value);
        if fv.shape() != (m.rows(), 1) {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: m.shape(),
                rhs: fv.shape(),
            });
        }
        let mut value = m.clone();
        for r in 0..m.rows() {
            let factor = fv.data()[r];
            value.row_mut(r).iter_mut().for_each(|x| *x *= factor);
        }
        Ok(self.push_derived(value, Op::ScaleRows { input: i, factors: f }, &[i, f]))
    }

    /// Places row `k` of `input` at row `rows[k]` of an otherwise zero
    /// `total_rows`-row matrix. `rows` must be distinct.
    pub fn scatter_rows(&mut self, input: Var, rows: &[usize], total_rows: usize) -> Result<Var, TensorError> {
        let i = self.resolve(input)?;
        let m = &self.nodes[i].value;
        if m.rows() != rows.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: m.shape(),
                rhs: (rows.len(), m.cols()),
            });
        }
        if let Some(&row) = rows.iter().find(|&&r| r >= total_rows) {
            return Err(TensorError::RowOutOfRange {
                op: "scatter_rows",
                row,
                rows: total_rows,
            });
        }
        let mut value = DenseMatrix::zeros(total_rows, m.cols());
        for (k, &r) in rows.iter().enumerate() {
            value.row_mut(r).copy_from_slice(m.row(k));
        }
        let rows: Arc<[usize]> = rows.into();
        Ok(self.push_derived(value, Op::ScatterRows { input: i, rows }, &[i]))
    }

    /// Tape version of [`ops::cross_entropy_soft`], differentiable in both
    /// the logits and the targets.
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (l, t) = (self.resolve(logits)?, self.resolve(targets)?);
        let v = ops::cross_entropy_soft(&self.nodes[l].value, &self.nodes[t].value, rows)?;
        let rows: Arc<[usize]> = rows.into();
        Ok(self.push_derived(
            DenseMatrix::filled(1, 1, v),
            Op::CrossEntropySoft { logits: l, targets: t, rows },
            &[l, t],
        ))
    }

    /// Tape version of [`ops::entropy_rows`].
    pub fn entropy_rows(&mut self, probs: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let p = self.resolve(probs)?;
        let v = ops::entropy_rows(&self.nodes[p].value, rows)?;
        let rows: Arc<[usize]> = rows.into();
        Ok(self.push_derived(DenseMatrix::filled(1, 1, v), Op::EntropyRows { probs: p, rows }, &[p]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let a = self.resolve(a)?;
        let v = self.nodes[a].value.sum();
        Ok(self.push_derived(DenseMatrix::filled(1, 1, v), Op::Sum(a), &[a]))
    }

    /// Reverse pass from a 1×1 `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let loss = self.resolve(loss)?;
        let shape = self.nodes[loss].value.shape();
        if shape != (1, 1) {
            return Err(TensorError::NotScalar { shape });
        }
        let mut grads: Vec<Option<DenseMatrix>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(DenseMatrix::filled(1, 1, 1.0));

        for idx in (0..=loss).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(idx, &g, &mut grads)?;
        }

        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes[..=loss].iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn propagate(&self, idx: usize, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        let wants = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            &Op::MatMul(a, b) => {
                if wants(a) {
                    accumulate(grads, a, ops::matmul_nt(g, val(b))?);
                }
                if wants(b) {
                    accumulate(grads, b, ops::matmul_tn(val(a), g)?);
                }
            }
            &Op::MatMulTn(a, b) => {
                if wants(a) {
                    accumulate(grads, a, ops::matmul_nt(val(b), g)?);
                }
                if wants(b) {
                    accumulate(grads, b, ops::matmul(val(a), g)?);
                }
            }
            &Op::MatMulNt(a, b) => {
                if wants(a) {
                    accumulate(grads, a, ops::matmul(g, val(b))?);
                }
                if wants(b) {
                    accumulate(grads, b, ops::matmul_tn(g, val(a))?);
                }
            }
            Op::Spmm(s, d) => {
                accumulate(grads, *d, s.apply_transpose(g)?);
            }
            Op::LinComb(terms) => {
                for &(i, c) in terms {
                    if wants(i) {
                        accumulate(grads, i, g.scaled(c));
                    }
                }
            }
            &Op::Hadamard(a, b) => {
                if wants(a) {
                    accumulate(grads, a, elementwise(g, val(b), |x, y| x * y));
                }
                if wants(b) {
                    accumulate(grads, b, elementwise(g, val(a), |x, y| x * y));
                }
            }
            &Op::Relu(a) => {
                accumulate(grads, a, elementwise(g, val(a), |gx, x| if x > 0.0 { gx } else { 0.0 }));
            }
            &Op::MaskPositive { gate, input } => {
                accumulate(grads, input, elementwise(g, val(gate), |gx, x| if x > 0.0 { gx } else { 0.0 }));
            }
            &Op::SoftmaxRows(a) => {
                let p = &node.value;
                let mut out = DenseMatrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let (pi, gi) = (p.row(i), g.row(i));
                    let inner = ops::dot(pi, gi);
                    for ((o, &pk), &gk) in out.row_mut(i).iter_mut().zip(pi).zip(gi) {
                        *o = pk * (gk - inner);
                    }
                }
                accumulate(grads, a, out);
            }
            &Op::RowSums(a) => {
                let m = val(a);
                let out = DenseMatrix::from_fn(m.rows(), m.cols(), |i, _| g.data()[i]);
                accumulate(grads, a, out);
            }
            &Op::ScaleRows { input, factors } => {
                let (m, f) = (val(input), val(factors));
                if wants(input) {
                    let out = DenseMatrix::from_fn(m.rows(), m.cols(), |i, j| g.get(i, j) * f.data()[i]);
                    accumulate(grads, input, out);
                }
                if wants(factors) {
                    let data = (0..m.rows()).map(|i| ops::dot(g.row(i), m.row(i))).collect();
                    accumulate(grads, factors, DenseMatrix::from_vec(m.rows(), 1, data)?);
                }
            }
            Op::ScatterRows { input, rows } => {
                accumulate(grads, *input, g.select_rows(rows));
            }
            Op::CrossEntropySoft { logits, targets, rows } => {
                let (z, t) = (val(*logits), val(*targets));
                let scale = g.data()[0] / rows.len() as f64;
                let mut log_p = vec![0.0; z.cols()];
                let mut gz = wants(*logits).then(|| DenseMatrix::zeros(z.rows(), z.cols()));
                let mut gt = wants(*targets).then(|| DenseMatrix::zeros(t.rows(), t.cols()));
                for &i in rows.iter() {
                    ops::log_softmax_row(z.row(i), &mut log_p);
                    let ti = t.row(i);
                    if let Some(gz) = gz.as_mut() {
                        let mass: f64 = ti.iter().sum();
                        for ((o, &lp), &tk) in gz.row_mut(i).iter_mut().zip(&log_p).zip(ti) {
                            *o += scale * (lp.exp() * mass - tk);
                        }
                    }
                    if let Some(gt) = gt.as_mut() {
                        for (o, &lp) in gt.row_mut(i).iter_mut().zip(&log_p) {
                            *o -= scale * lp;
                        }
                    }
                }
                if let Some(gz) = gz {
                    accumulate(grads, *logits, gz);
                }
                if let Some(gt) = gt {
                    accumulate(grads, *targets, gt);
                }
            }
            Op::EntropyRows { probs, rows } => {
                let p = val(*probs);
                let scale = g.data()[0] / rows.len() as f64;
                let mut out = DenseMatrix::zeros(p.rows(), p.cols());
                for &i in rows.iter() {
                    for (o, &pk) in out.row_mut(i).iter_mut().zip(p.row(i)) {
                        // d(-p ln p)/dp, taking 0 at p = 0 where the entropy is clamped.
                        if pk > 0.0 {
                            *o -= scale * (pk.ln() + 1.0);
                        }
                    }
                }
                accumulate(grads, *probs, out);
            }
            &Op::Sum(a) => {
                let m = val(a);
                accumulate(grads, a, DenseMatrix::filled(m.rows(), m.cols(), g.data()[0]));
            }
        }
        Ok(())
    }

    fn resolve(&self, var: Var) -> Result<usize, TensorError> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::UnknownVar { index: var.index });
        }
        Ok(var.index)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_derived(&mut self, value: DenseMatrix, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(value, op, requires_grad)
    }
}

fn inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        &Op::MatMul(a, b) | &Op::MatMulTn(a, b) | &Op::MatMulNt(a, b) | &Op::Hadamard(a, b) => vec![a, b],
        Op::Spmm(_, d) => vec![*d],
        Op::LinComb(terms) => terms.iter().map(|&(i, _)| i).collect(),
        &Op::Relu(a) | &Op::SoftmaxRows(a) | &Op::RowSums(a) | &Op::Sum(a) => vec![a],
        &Op::MaskPositive { input, .. } => vec![input],
        &Op::ScaleRows { input, factors } => vec![input, factors],
        Op::ScatterRows { input, .. } => vec![*input],
        Op::CrossEntropySoft { logits, targets, .. } => vec![*logits, *targets],
        Op::EntropyRows { probs, .. } => vec![*probs],
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], idx: usize, g: DenseMatrix) {
    match &mut grads[idx] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &DenseMatrix, b: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> DenseMatrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    DenseMatrix::from_vec(a.rows(), a.cols(), data).expect("operands share a shape")
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; a zero matrix when the
    /// loss does not depend on it (or `var` was recorded after the loss).
    pub fn get(&self, var: Var) -> Result<DenseMatrix, TensorError> {
        if var.tape != self.tape {
            return Err(TensorError::UnknownVar { index: var.index });
        }
        match self.grads.get(var.index) {
            Some(Some(g)) => Ok(g.clone()),
            Some(None) => {
                let (r, c) = self.shapes[var.index];
                Ok(DenseMatrix::zeros(r, c))
            }
            None => Err(TensorError::UnknownVar { index: var.index }),
        }
    }
}
