//! Comparison acquisition strategies. Each maps the current state to one
//! score per pool node; [`select_top`] picks the winner.

mod age;
mod pagerank;

use rand::Rng;

pub use age::{kmeans, score_age, AgeConfig, KMeans};
pub use pagerank::{pagerank, score_pagerank, DAMPING, TOLERANCE};

use crate::graph::{ALState, GraphDataset};
use crate::models::PredictiveDistribution;
use crate::rng::{self, stream};
use crate::tensor::entropy;
use crate::{Error, Result};

/// Scores keyed by node id, kept sorted by id. Higher is better.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    entries: Vec<(usize, f64)>,
}

impl ScoreVector {
    /// Rejects duplicate nodes and non-finite scores.
    pub fn new(mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|&(node, _)| node);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Config("duplicate node in score vector".into()));
        }
        if let Some(&(node, score)) = entries.iter().find(|(_, s)| !s.is_finite()) {
            return Err(Error::Model(format!("non-finite score {score} for node {node}")));
        }
        Ok(Self { entries })
    }

    /// Scores `f(node)` for every node of `nodes`.
    pub fn from_fn(nodes: impl IntoIterator<Item = usize>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new(nodes.into_iter().map(|n| (n, f(n))).collect())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, node: usize) -> Option<f64> {
        self.entries
            .binary_search_by_key(&node, |&(n, _)| n)
            .ok()
            .map(|k| self.entries[k].1)
    }

    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(n, _)| n)
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|&(_, s)| s)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.iter().copied()
    }
}

/// Node with the highest score; the lowest id wins ties.
pub fn select_top(scores: &ScoreVector) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (node, score) in scores.iter() {
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((node, score));
        }
    }
    best.map(|(n, _)| n).ok_or(Error::Empty("select_top"))
}

/// Affine map of `values` onto [0, 1]. A constant input maps to 0.5.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

fn nonempty_pool(state: &ALState) -> Result<Vec<usize>> {
    if state.pool().is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok(state.pool_nodes())
}

/// Independent uniform scores in ascending node order.
pub fn score_random(state: &ALState, seed: u64) -> Result<ScoreVector> {
    let pool = nonempty_pool(state)?;
    let mut rng = rng::rng_for(seed, &[stream::RANDOM_STRATEGY]);
    ScoreVector::from_fn(pool, |_| rng.random::<f64>())
}

/// Degree in the input graph, self-loops excluded.
pub fn score_degree(state: &ALState, dataset: &GraphDataset) -> Result<ScoreVector> {
    ScoreVector::from_fn(nonempty_pool(state)?, |n| dataset.degree(n) as f64)
}

/// Natural-log entropy of the mean predictive distribution.
pub fn score_entropy(state: &ALState, posterior: &PredictiveDistribution) -> Result<ScoreVector> {
    ScoreVector::from_fn(nonempty_pool(state)?, |n| entropy(posterior.mean_probs.row(n)))
}

/// Mutual information between the prediction and the dropout mask:
/// entropy of the mean minus mean of the per-pass entropies.
pub fn score_bald(state: &ALState, posterior: &PredictiveDistribution) -> Result<ScoreVector> {
    let t = posterior.num_samples();
    if t < 2 {
        return Err(Error::Config("BALD needs at least two posterior samples".into()));
    }
    ScoreVector::from_fn(nonempty_pool(state)?, |n| {
        let expected: f64 = posterior.sample_probs.iter().map(|s| entropy(s.row(n))).sum::<f64>() / t as f64;
        entropy(posterior.mean_probs.row(n)) - expected
    })
}
