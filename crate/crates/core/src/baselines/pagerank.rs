use super::{nonempty_pool, ScoreVector};
use crate::graph::{ALState, GraphDataset};
use crate::Result;

pub const DAMPING: f64 = 0.85;
/// Power iteration stops once the L1 change of the vector drops below this.
pub const TOLERANCE: f64 = 1e-8;

const MAX_ITERATIONS: usize = 10_000;

/// PageRank of every node of the undirected graph, by power iteration from
/// the uniform vector. Mass of nodes without neighbors is spread uniformly.
pub fn pagerank(dataset: &GraphDataset, damping: f64, tol: f64) -> Vec<f64> {
    let n = dataset.num_nodes();
    if n == 0 {
        return Vec::new();
    }
    let uniform = 1.0 / n as f64;
    let mut rank = vec![uniform; n];
    let mut next = vec![0.0; n];
    for _ in 0..MAX_ITERATIONS {
        let dangling: f64 = (0..n).filter(|&i| dataset.degree(i) == 0).map(|i| rank[i]).sum();
        let base = (1.0 - damping) * uniform + damping * dangling * uniform;
        for (i, out) in next.iter_mut().enumerate() {
            let incoming: f64 = dataset
                .neighbors(i)
                .iter()
                .map(|&j| rank[j] / dataset.degree(j) as f64)
                .sum();
            *out = base + damping * incoming;
        }
        let change: f64 = rank.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rank, &mut next);
        if change < tol {
            break;
        }
    }
    rank
}

/// PageRank restricted to the pool.
pub fn score_pagerank(state: &ALState, dataset: &GraphDataset, damping: f64, tol: f64) -> Result<ScoreVector> {
    let pool = nonempty_pool(state)?;
    let rank = pagerank(dataset, damping, tol);
    ScoreVector::from_fn(pool, |n| rank[n])
}
