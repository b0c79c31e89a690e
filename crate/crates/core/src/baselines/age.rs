use rand::Rng;

use super::{min_max_normalize, nonempty_pool, pagerank, ScoreVector};
use crate::graph::{ALState, GraphDataset};
use crate::models::PredictiveDistribution;
use crate::par;
use crate::rng::{self, stream};
use crate::tensor::{entropy, DenseMatrix};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AgeConfig {
    pub kmeans_restarts: usize,
    pub kmeans_iterations: usize,
    /// Weights of the normalized PageRank, entropy and density terms.
    pub weights: [f64; 3],
    pub damping: f64,
    pub tolerance: f64,
}

impl Default for AgeConfig {
    fn default() -> Self {
        Self {
            kmeans_restarts: 10,
            kmeans_iterations: 100,
            weights: [1.0 / 3.0; 3],
            damping: super::DAMPING,
            tolerance: super::TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// k×D.
    pub centers: DenseMatrix,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centers.
    pub inertia: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &DenseMatrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = squared_distance(point, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &DenseMatrix, k: usize, rng: &mut impl Rng) -> DenseMatrix {
    let n = points.rows();
    let mut centers = DenseMatrix::zeros(k, points.cols());
    centers.row_mut(0).copy_from_slice(points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(points.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), centers.row(c)));
        }
    }
    centers
}

fn lloyd(points: &DenseMatrix, mut centers: DenseMatrix, max_iter: usize) -> KMeans {
    let (n, dim, k) = (points.rows(), points.cols(), centers.rows());
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, a) in assignment.iter_mut().enumerate() {
            let (c, _) = nearest(points.row(i), &centers);
            changed |= *a != c;
            *a = c;
        }
        if !changed {
            break;
        }
        let mut sums = DenseMatrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            // An emptied cluster keeps its previous center.
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    let inertia = (0..n).map(|i| nearest(points.row(i), &centers).1).sum();
    let assignment = (0..n).map(|i| nearest(points.row(i), &centers).0).collect();
    KMeans {
        centers,
        assignment,
        inertia,
    }
}

/// Lloyd's algorithm from `restarts` k-means++ seedings; keeps the run with
/// the lowest inertia (earliest restart on ties).
pub fn kmeans(points: &DenseMatrix, k: usize, restarts: usize, max_iter: usize, seed: u64) -> Result<KMeans> {
    if points.rows() == 0 || k == 0 || restarts == 0 {
        return Err(Error::Empty("kmeans"));
    }
    let k = k.min(points.rows());
    let runs = par::map_range(restarts, |r| {
        let mut rng = rng::rng_for(seed, &[stream::KMEANS, r as u64]);
        lloyd(points, plus_plus_init(points, k, &mut rng), max_iter)
    });
    Ok(runs
        .into_iter()
        .reduce(|best, run| if run.inertia < best.inertia { run } else { best })
        .expect("at least one restart"))
}

/// Equal-weight blend of normalized PageRank, predictive entropy and
/// information density over the pool. Density is `1 / (1 + distance to the
/// nearest k-means center)`, clustering the pool embeddings into as many
/// clusters as there are classes (fewer if the pool is smaller).
pub fn score_age(
    state: &ALState,
    dataset: &GraphDataset,
    posterior: &PredictiveDistribution,
    embeddings: &DenseMatrix,
    seed: u64,
    config: &AgeConfig,
) -> Result<ScoreVector> {
    let pool = nonempty_pool(state)?;
    let points = embeddings.select_rows(&pool);
    let km = kmeans(
        &points,
        dataset.num_classes(),
        config.kmeans_restarts,
        config.kmeans_iterations,
        seed,
    )?;
    let density: Vec<f64> = (0..pool.len())
        .map(|i| 1.0 / (1.0 + nearest(points.row(i), &km.centers).1.sqrt()))
        .collect();
    let rank = pagerank(dataset, config.damping, config.tolerance);
    let centrality: Vec<f64> = pool.iter().map(|&n| rank[n]).collect();
    let uncertainty: Vec<f64> = pool.iter().map(|&n| entropy(posterior.mean_probs.row(n))).collect();
    let terms = [
        min_max_normalize(&centrality),
        min_max_normalize(&uncertainty),
        min_max_normalize(&density),
    ];
    let [wc, wu, wd] = config.weights;
    ScoreVector::new(
        pool.iter()
            .enumerate()
            .map(|(i, &n)| (n, wc * terms[0][i] + wu * terms[1][i] + wd * terms[2][i]))
            .collect(),
    )
}
