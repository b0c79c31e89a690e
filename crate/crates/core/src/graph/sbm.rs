//! Stochastic block model generator with class-dependent node features.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, GraphDataset};
use crate::rng::{self, stream};
use crate::tensor::DenseMatrix;

/// How node features are drawn for a node of class `c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureModel {
    /// Dense features: `feature_shift` on every coordinate `j` with
    /// `j % blocks == c`, zero elsewhere, plus unit Gaussian noise.
    Gaussian,
    /// Binary bag-of-words: each node holds `words_per_node` distinct words.
    /// Each word comes from the class vocabulary (coordinates with
    /// `j % blocks == c`) with probability `topic_fraction`, otherwise from
    /// the whole vocabulary. `feature_shift` is ignored.
    BagOfWords { words_per_node: usize, topic_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SbmConfig {
    pub name: String,
    /// Node count of each block; block `c` is class `c`.
    pub block_sizes: Vec<usize>,
    /// Edge probability between two nodes of the same block.
    pub p_in: f64,
    /// Edge probability between nodes of different blocks.
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_shift: f64,
    pub features: FeatureModel,
    pub seed: u64,
}

impl SbmConfig {
    /// Equal-size blocks with Gaussian features.
    pub fn uniform(
        blocks: usize,
        nodes_per_block: usize,
        p_in: f64,
        p_out: f64,
        feature_dim: usize,
        feature_shift: f64,
        seed: u64,
    ) -> Self {
        Self {
            name: "sbm".into(),
            block_sizes: vec![nodes_per_block; blocks],
            p_in,
            p_out,
            feature_dim,
            feature_shift,
            features: FeatureModel::Gaussian,
            seed,
        }
    }

    /// `total` nodes spread as evenly as possible over `blocks` blocks.
    pub fn balanced_sizes(total: usize, blocks: usize) -> Vec<usize> {
        (0..blocks).map(|b| total / blocks + usize::from(b < total % blocks)).collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    fn validate(&self) -> Result<(), DataError> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !(ok(self.p_in) && ok(self.p_out) && self.p_out < self.p_in) {
            return Err(DataError::InvalidProbabilities {
                p_in: self.p_in,
                p_out: self.p_out,
            });
        }
        if self.block_sizes.is_empty() || self.block_sizes.contains(&0) {
            return Err(DataError::Invalid("every block needs at least one node".into()));
        }
        if self.feature_dim == 0 {
            return Err(DataError::Invalid("feature_dim must be positive".into()));
        }
        if let FeatureModel::BagOfWords {
            words_per_node,
            topic_fraction,
        } = self.features
        {
            if words_per_node == 0 || words_per_node > self.feature_dim || !(0.0..=1.0).contains(&topic_fraction) {
                return Err(DataError::Invalid(
                    "bag-of-words needs 0 < words_per_node <= feature_dim and topic_fraction in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Samples a block-structured graph. Node ids are a seeded permutation of
/// the block layout, so class membership is not contiguous in id order.
pub fn generate_sbm(config: &SbmConfig) -> Result<GraphDataset, DataError> {
    config.validate()?;
    let n = config.num_nodes();
    let blocks = config.block_sizes.len();

    let mut edge_rng = rng::rng_for(config.seed, &[stream::SBM_EDGES]);
    let mut block_of: Vec<usize> = config
        .block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &size)| std::iter::repeat_n(b, size))
        .collect();
    block_of.shuffle(&mut edge_rng);

    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if block_of[i] == block_of[j] { config.p_in } else { config.p_out };
            if edge_rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }

    let f = config.feature_dim;
    let mut feat_rng = rng::rng_for(config.seed, &[stream::SBM_FEATURES]);
    let mut features = DenseMatrix::zeros(n, f);
    match config.features {
        FeatureModel::Gaussian => {
            for i in 0..n {
                let c = block_of[i];
                for (j, x) in features.row_mut(i).iter_mut().enumerate() {
                    let mean = if j % blocks == c { config.feature_shift } else { 0.0 };
                    let noise: f64 = StandardNormal.sample(&mut feat_rng);
                    *x = mean + noise;
                }
            }
        }
        FeatureModel::BagOfWords {
            words_per_node,
            topic_fraction,
        } => {
            let vocab: Vec<Vec<usize>> = (0..blocks).map(|c| (c..f).step_by(blocks).collect()).collect();
            for i in 0..n {
                let own = &vocab[block_of[i]];
                let topical = (0..words_per_node)
                    .filter(|_| feat_rng.random::<f64>() < topic_fraction)
                    .count()
                    .min(own.len());
                let row = features.row_mut(i);
                for k in index::sample(&mut feat_rng, own.len(), topical) {
                    row[own[k]] = 1.0;
                }
                let mut placed = topical;
                while placed < words_per_node {
                    let w = feat_rng.random_range(0..f);
                    if row[w] == 0.0 {
                        row[w] = 1.0;
                        placed += 1;
                    }
                }
            }
        }
    }

    let (dataset, _) = GraphDataset::from_edges(config.name.clone(), edges, features, block_of, blocks)?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_probabilities_give_disjoint_cliques() {
        let d = generate_sbm(&SbmConfig::uniform(2, 5, 1.0, 0.0, 4, 1.0, 3)).unwrap();
        assert_eq!(d.num_edges(), 2 * 10);
        for i in 0..10 {
            assert_eq!(d.degree(i), 4);
            for &j in d.neighbors(i) {
                assert_eq!(d.labels()[i], d.labels()[j]);
            }
        }
    }

    #[test]
    fn within_block_edges_follow_binomial() {
        let (n, p) = (60usize, 0.3);
        let d = generate_sbm(&SbmConfig::uniform(2, n, p, 0.01, 2, 0.0, 5)).unwrap();
        let within = (0..d.num_nodes())
            .flat_map(|i| d.neighbors(i).iter().map(move |&j| (i, j)))
            .filter(|&(i, j)| i < j && d.labels()[i] == d.labels()[j])
            .count() as f64;
        let pairs = 2.0 * (n * (n - 1) / 2) as f64;
        let (mean, sd) = (p * pairs, (pairs * p * (1.0 - p)).sqrt());
        assert!((within - mean).abs() <= 5.0 * sd, "{within} vs {mean} ± 5·{sd}");
    }

    #[test]
    fn same_seed_same_graph() {
        let cfg = SbmConfig::uniform(3, 20, 0.2, 0.02, 6, 1.0, 9);
        assert_eq!(generate_sbm(&cfg).unwrap(), generate_sbm(&cfg).unwrap());
        let other = SbmConfig { seed: 10, ..cfg.clone() };
        assert_ne!(generate_sbm(&cfg).unwrap(), generate_sbm(&other).unwrap());
    }

    #[test]
    fn invalid_probabilities_rejected() {
        for (p_in, p_out) in [(0.2, 0.2), (0.1, 0.3), (1.2, 0.1), (0.5, -0.1)] {
            assert!(matches!(
                generate_sbm(&SbmConfig::uniform(2, 3, p_in, p_out, 2, 1.0, 0)),
                Err(DataError::InvalidProbabilities { .. })
            ));
        }
    }

    #[test]
    fn bag_of_words_rows_hold_exact_word_counts() {
        let cfg = SbmConfig {
            features: FeatureModel::BagOfWords {
                words_per_node: 7,
                topic_fraction: 0.5,
            },
            block_sizes: SbmConfig::balanced_sizes(31, 3),
            ..SbmConfig::uniform(3, 1, 0.1, 0.01, 40, 0.0, 2)
        };
        assert_eq!(cfg.block_sizes, vec![11, 10, 10]);
        let d = generate_sbm(&cfg).unwrap();
        for i in 0..d.num_nodes() {
            assert_eq!(d.features().row(i).iter().filter(|&&x| x == 1.0).count(), 7);
        }
    }
}
