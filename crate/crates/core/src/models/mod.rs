//! Two-layer GCN and SGC node classifiers, their training, MC-dropout
//! posteriors and evaluation.

mod forward;
mod metrics;
mod posterior;
mod snapshot;
mod train;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use forward::{gcn_forward, sgc_forward, Dropout};
pub(crate) use forward::{record_logits, record_training_gradient};
pub use metrics::{macro_f1, predict_classes};
pub use posterior::{mc_dropout_posterior, PredictiveDistribution};
pub use train::{one_hot_targets, train_adam, training_loss, TrainConfig};

use crate::graph::{normalized_adjacency, GraphDataset};
use crate::rng::{self, stream};
use crate::tensor::{ops, DenseMatrix, SparseMatrix, SparseOperator, TensorError};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Gcn,
    Sgc,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Self::Gcn),
            "sgc" => Ok(Self::Sgc),
            other => Err(Error::Config(format!("unknown model '{other}' (expected gcn or sgc)"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gcn => "gcn",
            Self::Sgc => "sgc",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// GCN hidden width.
    pub hidden: usize,
    /// SGC propagation power.
    pub sgc_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 64, sgc_k: 2 }
    }
}

/// The normalized adjacency and the node features, both as constant sparse
/// operators. Bag-of-words features are mostly zeros, so keeping them sparse
/// makes the first-layer product proportional to the number of stored words.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub a_hat: SparseOperator,
    pub features: SparseOperator,
}

impl GraphInputs {
    pub fn new(dataset: &GraphDataset) -> Self {
        Self {
            a_hat: SparseOperator::new(normalized_adjacency(dataset)),
            features: SparseOperator::new(SparseMatrix::from_dense(dataset.features())),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.a_hat.matrix().rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.matrix().cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams {
    /// F×H.
    pub theta0: DenseMatrix,
    /// H×C.
    pub theta1: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgcParams {
    /// F×C.
    pub theta: DenseMatrix,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Gcn(GcnParams),
    Sgc(SgcParams),
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

impl Model {
    /// Glorot-uniform initialization.
    pub fn init(kind: ModelKind, config: &ModelConfig, num_features: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = rng::rng_for(seed, &[stream::INIT]);
        match kind {
            ModelKind::Gcn => Self::Gcn(GcnParams {
                theta0: glorot(num_features, config.hidden, &mut rng),
                theta1: glorot(config.hidden, num_classes, &mut rng),
            }),
            ModelKind::Sgc => Self::Sgc(SgcParams {
                theta: glorot(num_features, num_classes, &mut rng),
                k: config.sgc_k,
            }),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Gcn(_) => ModelKind::Gcn,
            Self::Sgc(_) => ModelKind::Sgc,
        }
    }

    /// Trainable matrices; the first one is the weight-decayed one.
    pub fn weights(&self) -> Vec<&DenseMatrix> {
        match self {
            Self::Gcn(p) => vec![&p.theta0, &p.theta1],
            Self::Sgc(p) => vec![&p.theta],
        }
    }

    pub fn weights_mut(&mut self) -> Vec<&mut DenseMatrix> {
        match self {
            Self::Gcn(p) => vec![&mut p.theta0, &mut p.theta1],
            Self::Sgc(p) => vec![&mut p.theta],
        }
    }

    /// Same architecture with the given weights, in [`Model::weights`] order.
    pub fn with_weights(&self, mut weights: Vec<DenseMatrix>) -> Result<Self> {
        let expected = self.weights();
        if weights.len() != expected.len() || weights.iter().zip(&expected).any(|(w, e)| w.shape() != e.shape()) {
            return Err(Error::Model("weight list does not match the architecture".into()));
        }
        Ok(match self {
            Self::Gcn(_) => {
                let theta1 = weights.pop().expect("two weights");
                let theta0 = weights.pop().expect("two weights");
                Self::Gcn(GcnParams { theta0, theta1 })
            }
            Self::Sgc(p) => Self::Sgc(SgcParams {
                theta: weights.pop().expect("one weight"),
                k: p.k,
            }),
        })
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Self::Gcn(p) => p.theta1.cols(),
            Self::Sgc(p) => p.theta.cols(),
        }
    }

    /// Deterministic logits (no dropout).
    pub fn logits(&self, inputs: &GraphInputs) -> Result<DenseMatrix, TensorError> {
        match self {
            Self::Gcn(p) => gcn_forward(&inputs.a_hat, &inputs.features, p, None),
            Self::Sgc(p) => sgc_forward(&inputs.a_hat, &inputs.features, p, None),
        }
    }

    /// Deterministic class probabilities.
    pub fn predict_proba(&self, inputs: &GraphInputs) -> Result<DenseMatrix, TensorError> {
        Ok(ops::softmax_rows(&self.logits(inputs)?))
    }

    /// Node representation used for clustering: hidden activations
    /// `ReLU(Â·X·θ0)` for GCN, propagated features `Â^k·X` for SGC.
    pub fn embeddings(&self, inputs: &GraphInputs) -> Result<DenseMatrix, TensorError> {
        match self {
            Self::Gcn(p) => {
                let xw = inputs.features.apply(&p.theta0)?;
                Ok(ops::relu(&inputs.a_hat.apply(&xw)?))
            }
            Self::Sgc(p) => {
                let mut h = inputs.features.matrix().to_dense();
                for _ in 0..p.k {
                    h = inputs.a_hat.apply(&h)?;
                }
                Ok(h)
            }
        }
    }
}
