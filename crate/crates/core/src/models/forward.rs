use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::{GcnParams, GraphInputs, Model, SgcParams};
use crate::tensor::{ops, DenseMatrix, SparseMatrix, SparseOperator, Tape, TensorError, Var};

/// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn active(&self) -> bool {
        self.rate > 0.0
    }

    /// Drops stored feature entries independently.
    fn features(&mut self, x: &SparseMatrix) -> SparseMatrix {
        let keep = 1.0 / (1.0 - self.rate);
        let threshold = self.threshold();
        let rng = &mut *self.rng;
        x.filter_map_values(|v| (rng.next_u32() >= threshold).then(|| v * keep))
    }

    fn mask(&mut self, rows: usize, cols: usize) -> DenseMatrix {
        let keep = 1.0 / (1.0 - self.rate);
        let threshold = self.threshold();
        DenseMatrix::from_fn(rows, cols, |_, _| if self.rng.next_u32() < threshold { 0.0 } else { keep })
    }

    /// Drop when a uniform 32-bit draw falls below this.
    fn threshold(&self) -> u32 {
        (self.rate * 4294967296.0).min(u32::MAX as f64) as u32
    }
}

fn apply_mask(m: &mut DenseMatrix, mask: &DenseMatrix) {
    for (x, k) in m.data_mut().iter_mut().zip(mask.data()) {
        *x *= k;
    }
}

fn input_product(
    x: &SparseOperator,
    weights: &DenseMatrix,
    dropout: &mut Option<&mut Dropout<'_>>,
) -> Result<DenseMatrix, TensorError> {
    match dropout {
        Some(d) if d.active() => ops::spmm(&d.features(x.matrix()), weights),
        _ => x.apply(weights),
    }
}

/// `Â · ReLU(Â · X · θ0) · θ1`, with dropout on the input of each layer when
/// `dropout` is given. Returns logits.
pub fn gcn_forward(
    a_hat: &SparseOperator,
    x: &SparseOperator,
    params: &GcnParams,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<DenseMatrix, TensorError> {
    let xw = input_product(x, &params.theta0, &mut dropout)?;
    let mut h1 = ops::relu(&a_hat.apply(&xw)?);
    if let Some(d) = dropout.filter(|d| d.active()) {
        let mask = d.mask(h1.rows(), h1.cols());
        apply_mask(&mut h1, &mask);
    }
    // Â(H1θ1) is cheaper than (ÂH1)θ1 whenever C < H.
    a_hat.apply(&ops::matmul(&h1, &params.theta1)?)
}

/// `Â^k · X · θ` as `k` sparse products applied to `X · θ`.
pub fn sgc_forward(
    a_hat: &SparseOperator,
    x: &SparseOperator,
    params: &SgcParams,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<DenseMatrix, TensorError> {
    let mut z = input_product(x, &params.theta, &mut dropout)?;
    for _ in 0..params.k {
        z = a_hat.apply(&z)?;
    }
    Ok(z)
}

/// Records the forward pass on `tape`, with `vars` holding the weights in
/// [`Model::weights`] order. Draws dropout masks in the same order as the
/// plain forward functions.
pub(crate) fn record_logits(
    tape: &mut Tape,
    model: &Model,
    inputs: &GraphInputs,
    vars: &[Var],
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<Var, TensorError> {
    let x = match dropout.as_deref_mut() {
        Some(d) if d.active() => SparseOperator::single_use(d.features(inputs.features.matrix())),
        _ => inputs.features.clone(),
    };
    let a_hat = &inputs.a_hat;
    match model {
        Model::Gcn(_) => {
            let xw = tape.spmm(&x, vars[0])?;
            let a1 = tape.spmm(a_hat, xw)?;
            let mut h1 = tape.relu(a1)?;
            if let Some(d) = dropout.filter(|d| d.active()) {
                let (r, c) = tape.value(h1)?.shape();
                let mask = tape.constant(d.mask(r, c));
                h1 = tape.hadamard(h1, mask)?;
            }
            let m = tape.matmul(h1, vars[1])?;
            tape.spmm(a_hat, m)
        }
        Model::Sgc(p) => {
            let mut z = tape.spmm(&x, vars[0])?;
            for _ in 0..p.k {
                z = tape.spmm(a_hat, z)?;
            }
            Ok(z)
        }
    }
}

/// Gradient of the soft-target cross entropy, written out as ordinary tape
/// operations so that it can itself be differentiated.
pub(crate) struct TrainingGradient {
    /// One gradient per weight, in [`Model::weights`] order.
    pub grads: Vec<Var>,
}

/// Records `∇θ (1/n) Σ_i CE(z_i, t_i)` for the dropout-free forward pass,
/// where `targets` is N×C with zero rows outside the training set and
/// `num_rows` is the size of that set.
///
/// With `s_i = Σ_k t_ik`, the logit gradient is `(softmax(Z) ⊙ s − T) / n`;
/// the rest is the chain rule through the layers.
pub(crate) fn record_training_gradient(
    tape: &mut Tape,
    model: &Model,
    inputs: &GraphInputs,
    vars: &[Var],
    targets: Var,
    num_rows: usize,
) -> Result<TrainingGradient, TensorError> {
    let n = num_rows as f64;
    let a_hat = &inputs.a_hat;
    let a_hat_t = inputs.a_hat.transposed();
    let x_t = inputs.features.transposed();
    let logit_grad = |tape: &mut Tape, z: Var| -> Result<Var, TensorError> {
        let p = tape.softmax_rows(z)?;
        let s = tape.row_sums(targets)?;
        let ps = tape.scale_rows(p, s)?;
        tape.lin_comb(&[(ps, 1.0 / n), (targets, -1.0 / n)])
    };
    match model {
        Model::Gcn(_) => {
            let xw = tape.spmm(&inputs.features, vars[0])?;
            let a1 = tape.spmm(a_hat, xw)?;
            let h1 = tape.relu(a1)?;
            let m = tape.matmul(h1, vars[1])?;
            let z = tape.spmm(a_hat, m)?;
            let gz = logit_grad(tape, z)?;
            let gm = tape.spmm(&a_hat_t, gz)?;
            let g1 = tape.matmul_tn(h1, gm)?;
            let gh1 = tape.matmul_nt(gm, vars[1])?;
            let ga1 = tape.mask_positive(a1, gh1)?;
            let gxw = tape.spmm(&a_hat_t, ga1)?;
            let g0 = tape.spmm(&x_t, gxw)?;
            Ok(TrainingGradient { grads: vec![g0, g1] })
        }
        Model::Sgc(p) => {
            let mut z = tape.spmm(&inputs.features, vars[0])?;
            for _ in 0..p.k {
                z = tape.spmm(a_hat, z)?;
            }
            let mut g = logit_grad(tape, z)?;
            for _ in 0..p.k {
                g = tape.spmm(&a_hat_t, g)?;
            }
            let g0 = tape.spmm(&x_t, g)?;
            Ok(TrainingGradient { grads: vec![g0] })
        }
    }
}
