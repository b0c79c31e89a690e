//! Pool-based active learning for node classification on attributed graphs.
//!
//! The centerpiece is [`metal`], an expected-error-reduction acquisition
//! criterion computed from meta-gradients: the graph network is retrained for
//! a few unrolled steps on pseudo-labels scaled by `(1 + δ)`, and the
//! gradient of an uncertainty-plus-loss cost with respect to `δ` ranks every
//! candidate node. The remaining modules supply what that needs (matrix
//! kernels and a reverse-mode [`tensor::Tape`], GCN/SGC [`models`],
//! [`graph`] data handling) and what it is compared against
//! ([`baselines`], driven by the [`harness`]).

pub mod baselines;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metal;
pub mod models;
pub mod par;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
