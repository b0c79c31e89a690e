//! Expected meta-gradient acquisition.
//!
//! The pool is split into a high-entropy subset, whose predictive entropy
//! forms part of the cost, and the query candidates. Each candidate gets a
//! soft pseudo-label (its mean posterior row) scaled by `1 + δ`, the model is
//! retrained for a few momentum steps on labels plus pseudo-labels with
//! every step recorded on a tape, and one reverse pass yields `∂cost/∂δ` at
//! `δ = 0`. The posterior-weighted row of that gradient estimates how much
//! labeling the candidate would lower the cost. That estimate is blended
//! with a neighbor-count exploration bonus under a Beta-sampled weight.

use std::collections::BTreeMap;

use rand_distr::{Beta, Distribution};

use crate::baselines::{min_max_normalize, select_top, ScoreVector};
use crate::graph::{unlabeled_neighbor_count, ALState, GraphDataset};
use crate::models::{one_hot_targets, record_logits, record_training_gradient, GraphInputs, Model, PredictiveDistribution};
use crate::rng::{self, stream};
use crate::tensor::{entropy, DenseMatrix, Tape, TensorError, Var};
use crate::{Error, Result};

/// How the exploration weight γ is chosen each step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaSchedule {
    /// `γ_t ~ Beta(alpha, beta0 + beta_slope·t)`: the mean weight on
    /// exploration decays as acquisitions accumulate.
    Beta { alpha: f64, beta0: f64, beta_slope: f64 },
    /// The same γ at every step.
    Fixed(f64),
}

impl Default for GammaSchedule {
    fn default() -> Self {
        Self::Beta {
            alpha: 1.0,
            beta0: 1.0,
            beta_slope: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub inner_momentum: f64,
    /// L2 coefficient on the first weight matrix inside the inner loop.
    pub inner_weight_decay: f64,
    /// Share of the pool, by descending entropy, that enters the cost.
    pub entropy_fraction: f64,
    pub gamma: GammaSchedule,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            inner_steps: 10,
            inner_lr: 0.01,
            inner_momentum: 0.9,
            inner_weight_decay: 5e-4,
            entropy_fraction: 0.1,
            gamma: GammaSchedule::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.entropy_fraction > 0.0 && self.entropy_fraction < 1.0) {
            return bad("entropy_fraction must lie in (0, 1)");
        }
        if !(self.inner_lr > 0.0) || !(0.0..1.0).contains(&self.inner_momentum) || !(self.inner_weight_decay >= 0.0) {
            return bad("inner optimizer needs lr > 0, momentum in [0, 1) and weight decay >= 0");
        }
        match self.gamma {
            GammaSchedule::Beta { alpha, beta0, beta_slope } if alpha > 0.0 && beta0 > 0.0 && beta_slope >= 0.0 => Ok(()),
            GammaSchedule::Fixed(g) if (0.0..=1.0).contains(&g) => Ok(()),
            _ => bad("gamma needs alpha, beta0 > 0 and slope >= 0, or a fixed value in [0, 1]"),
        }
    }
}

/// Split of the pool for one acquisition step. Both lists are sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolPartition {
    /// Highest-entropy pool nodes; their mean entropy enters the cost.
    pub entropy_set: Vec<usize>,
    /// Remaining pool nodes, the candidates that carry a perturbation row.
    pub query_set: Vec<usize>,
}

/// `⌈fraction·|pool|⌉` as an exact integer, immune to `0.1·30 > 3` style
/// rounding.
pub fn entropy_set_size(pool_size: usize, fraction: f64) -> usize {
    let raw = fraction * pool_size as f64;
    let nearest = raw.round();
    let size = if (raw - nearest).abs() <= 1e-9 * raw.max(1.0) { nearest } else { raw.ceil() };
    (size as usize).clamp(usize::from(pool_size > 0), pool_size)
}

/// Takes the `⌈fraction·|pool|⌉` pool nodes with the largest mean-posterior
/// entropy (lowest id first on ties) as the entropy set.
pub fn partition_pool(state: &ALState, posterior: &PredictiveDistribution, fraction: f64) -> Result<PoolPartition> {
    let pool = state.pool_nodes();
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut ranked: Vec<(usize, f64)> = pool.iter().map(|&n| (n, entropy(posterior.mean_probs.row(n)))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let size = entropy_set_size(pool.len(), fraction);
    let mut entropy_set: Vec<usize> = ranked[..size].iter().map(|&(n, _)| n).collect();
    let mut query_set: Vec<usize> = ranked[size..].iter().map(|&(n, _)| n).collect();
    entropy_set.sort_unstable();
    query_set.sort_unstable();
    Ok(PoolPartition { entropy_set, query_set })
}

/// The `|query_set|×C` perturbation leaf; row `r` belongs to `nodes[r]`.
#[derive(Clone, Debug)]
pub struct PerturbationMatrix {
    pub var: Var,
    pub nodes: Vec<usize>,
}

impl PerturbationMatrix {
    /// All-zero perturbation, the point where the meta-gradient is taken.
    pub fn zeros(tape: &mut Tape, nodes: &[usize], num_classes: usize) -> Self {
        Self::with_values(tape, nodes, DenseMatrix::zeros(nodes.len(), num_classes))
    }

    /// Perturbation with explicit values, for finite-difference checks.
    pub fn with_values(tape: &mut Tape, nodes: &[usize], values: DenseMatrix) -> Self {
        Self {
            var: tape.leaf(values),
            nodes: nodes.to_vec(),
        }
    }
}

/// Everything the inner retraining and the cost read but never change.
#[derive(Clone, Copy)]
pub struct MetaProblem<'a> {
    pub model: &'a Model,
    pub inputs: &'a GraphInputs,
    pub labels: &'a [usize],
    pub labeled: &'a [usize],
    pub partition: &'a PoolPartition,
    /// N×C soft pseudo-labels; only query rows are read.
    pub pseudo_labels: &'a DenseMatrix,
}

/// Records `config.inner_steps` momentum steps from the current weights on
/// the cross entropy over labeled nodes (one-hot targets) and query nodes
/// (targets `pseudo ⊙ (1 + δ)`). Returns the final weights as tape variables,
/// differentiable with respect to `delta`.
pub fn inner_train_perturbed(
    tape: &mut Tape,
    problem: &MetaProblem<'_>,
    delta: &PerturbationMatrix,
    config: &MetaConfig,
) -> Result<Vec<Var>> {
    let (n, c) = (problem.inputs.num_nodes(), problem.model.num_classes());
    let query = &problem.partition.query_set;
    let shape = tape.value(delta.var)?.shape();
    if shape != (query.len(), c) || delta.nodes != *query {
        return Err(TensorError::ShapeMismatch {
            op: "inner_train_perturbed",
            lhs: shape,
            rhs: (query.len(), c),
        }
        .into());
    }
    if problem.labeled.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }

    let labeled_targets = tape.constant(one_hot_targets(problem.labels, problem.labeled, c));
    let targets = if query.is_empty() {
        labeled_targets
    } else {
        let pseudo = tape.constant(problem.pseudo_labels.select_rows(query));
        let scaled = tape.hadamard(pseudo, delta.var)?;
        let perturbed = tape.add(pseudo, scaled)?;
        let placed = tape.scatter_rows(perturbed, query, n)?;
        tape.add(labeled_targets, placed)?
    };
    let rows = problem.labeled.len() + query.len();

    let mut theta: Vec<Var> = problem.model.weights().into_iter().map(|w| tape.constant(w.clone())).collect();
    let mut velocity: Option<Vec<Var>> = None;
    for _ in 0..config.inner_steps {
        let grads = record_training_gradient(tape, problem.model, problem.inputs, &theta, targets, rows)?.grads;
        let mut next_v = Vec::with_capacity(theta.len());
        let mut next_theta = Vec::with_capacity(theta.len());
        for (i, (&w, &g)) in theta.iter().zip(&grads).enumerate() {
            let mut terms = vec![(g, 1.0)];
            if i == 0 && config.inner_weight_decay > 0.0 {
                terms.push((w, config.inner_weight_decay));
            }
            if let Some(v) = &velocity {
                terms.push((v[i], config.inner_momentum));
            }
            let v = tape.lin_comb(&terms)?;
            next_theta.push(tape.lin_comb(&[(w, 1.0), (v, -config.inner_lr)])?);
            next_v.push(v);
        }
        theta = next_theta;
        velocity = Some(next_v);
    }
    Ok(theta)
}

/// Mean cross entropy over labeled nodes plus mean predictive entropy over
/// the entropy set, under the weights `theta`.
pub fn meta_cost(tape: &mut Tape, problem: &MetaProblem<'_>, theta: &[Var]) -> Result<Var> {
    let logits = record_logits(tape, problem.model, problem.inputs, theta, None)?;
    let targets = tape.constant(one_hot_targets(problem.labels, problem.labeled, problem.model.num_classes()));
    let loss = tape.cross_entropy_soft(logits, targets, problem.labeled)?;
    let probs = tape.softmax_rows(logits)?;
    let uncertainty = tape.entropy_rows(probs, &problem.partition.entropy_set)?;
    Ok(tape.add(loss, uncertainty)?)
}

/// `∂cost/∂δ`. A perturbation that cannot reach the cost (no inner steps)
/// has an all-zero gradient; a perturbation from another tape is an error.
pub fn meta_gradient(tape: &Tape, cost: Var, delta: &PerturbationMatrix) -> Result<DenseMatrix> {
    if !tape.depends_on(cost, delta.var)? {
        let (r, c) = tape.value(delta.var)?.shape();
        return Ok(DenseMatrix::zeros(r, c));
    }
    Ok(tape.backward(cost)?.get(delta.var)?)
}

/// `Δ_q = Σ_k P(y_q = k) · ∂cost/∂δ_qk` for every row of `grad`.
pub fn expected_meta_gradient(grad: &DenseMatrix, posterior: &DenseMatrix, nodes: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if grad.rows() != nodes.len() || grad.cols() != posterior.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "expected_meta_gradient",
            lhs: grad.shape(),
            rhs: (nodes.len(), posterior.cols()),
        }
        .into());
    }
    Ok(nodes
        .iter()
        .enumerate()
        .map(|(r, &node)| {
            let value = grad.row(r).iter().zip(posterior.row(node)).map(|(g, p)| g * p).sum();
            (node, value)
        })
        .collect())
}

/// `ln(1 + number of neighbors still in the pool)`.
pub fn exploration_score(state: &ALState, dataset: &GraphDataset, node: usize) -> f64 {
    (unlabeled_neighbor_count(state, dataset, node) as f64).ln_1p()
}

/// γ for `step`; one seeded draw per step.
pub fn sample_gamma(step: usize, schedule: &GammaSchedule, seed: u64) -> Result<f64> {
    match *schedule {
        GammaSchedule::Fixed(g) => Ok(g),
        GammaSchedule::Beta { alpha, beta0, beta_slope } => {
            let beta_t = beta0 + beta_slope * step as f64;
            let dist = Beta::new(alpha, beta_t).map_err(|e| Error::Config(format!("gamma distribution: {e}")))?;
            Ok(dist.sample(&mut rng::rng_for(seed, &[stream::GAMMA, step as u64])))
        }
    }
}

/// One candidate's terms in the final score.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub node: usize,
    pub expected_grad: f64,
    /// Normalized negated expected gradient.
    pub phi_grad: f64,
    /// Normalized exploration score.
    pub phi_exp: f64,
    pub phi: f64,
}

/// `φ = (1 − γ)·norm(−Δ) + γ·norm(exploration)` over the shared key set,
/// with min-max normalization onto [0, 1].
pub fn combined_rows(
    expected: &BTreeMap<usize, f64>,
    exploration: &BTreeMap<usize, f64>,
    gamma: f64,
) -> Result<Vec<ScoreRow>> {
    if expected.len() != exploration.len() || expected.keys().zip(exploration.keys()).any(|(a, b)| a != b) {
        return Err(Error::KeyMismatch);
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma {gamma} outside [0, 1]")));
    }
    let grad_terms = min_max_normalize(&expected.values().map(|v| -v).collect::<Vec<_>>());
    let exp_terms = min_max_normalize(&exploration.values().copied().collect::<Vec<_>>());
    Ok(expected
        .iter()
        .zip(grad_terms.into_iter().zip(exp_terms))
        .map(|((&node, &expected_grad), (phi_grad, phi_exp))| ScoreRow {
            node,
            expected_grad,
            phi_grad,
            phi_exp,
            phi: (1.0 - gamma) * phi_grad + gamma * phi_exp,
        })
        .collect())
}

pub fn combined_score(
    expected: &BTreeMap<usize, f64>,
    exploration: &BTreeMap<usize, f64>,
    gamma: f64,
) -> Result<ScoreVector> {
    let rows = combined_rows(expected, exploration, gamma)?;
    ScoreVector::new(rows.iter().map(|r| (r.node, r.phi)).collect())
}

/// Outcome of one acquisition step with everything needed to inspect it.
#[derive(Clone, Debug, PartialEq)]
pub struct MetalAcquisition {
    pub node: usize,
    pub gamma: f64,
    pub partition: PoolPartition,
    /// One row per query candidate, ascending node order.
    pub rows: Vec<ScoreRow>,
}

/// Runs one full acquisition step. Entropy-set nodes are not candidates in
/// this step. A pool of one node returns that node.
#[allow(clippy::too_many_arguments)]
pub fn metal_acquire(
    state: &ALState,
    dataset: &GraphDataset,
    inputs: &GraphInputs,
    model: &Model,
    posterior: &PredictiveDistribution,
    step: usize,
    config: &MetaConfig,
    seed: u64,
) -> Result<MetalAcquisition> {
    config.validate()?;
    let partition = partition_pool(state, posterior, config.entropy_fraction)?;
    let gamma = sample_gamma(step, &config.gamma, seed)?;
    if partition.query_set.is_empty() {
        return Ok(MetalAcquisition {
            node: partition.entropy_set[0],
            gamma,
            partition,
            rows: Vec::new(),
        });
    }
    let problem = MetaProblem {
        model,
        inputs,
        labels: dataset.labels(),
        labeled: state.labeled(),
        partition: &partition,
        pseudo_labels: &posterior.mean_probs,
    };
    let mut tape = Tape::new();
    let delta = PerturbationMatrix::zeros(&mut tape, &partition.query_set, model.num_classes());
    let theta = inner_train_perturbed(&mut tape, &problem, &delta, config)?;
    let cost = meta_cost(&mut tape, &problem, &theta)?;
    let grad = meta_gradient(&tape, cost, &delta)?;
    drop(tape);

    let expected = expected_meta_gradient(&grad, &posterior.mean_probs, &partition.query_set)?;
    let exploration: BTreeMap<usize, f64> = partition
        .query_set
        .iter()
        .map(|&n| (n, exploration_score(state, dataset, n)))
        .collect();
    let rows = combined_rows(&expected, &exploration, gamma)?;
    let node = select_top(&ScoreVector::new(rows.iter().map(|r| (r.node, r.phi)).collect())?)?;
    Ok(MetalAcquisition {
        node,
        gamma,
        partition,
        rows,
    })
}
