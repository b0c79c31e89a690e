use std::collections::BTreeSet;

use rand::seq::{index, IndexedRandom};

use super::{DataError, GraphDataset};
use crate::rng::{self, stream};
use crate::Error;

/// Partition of the nodes into labeled, unlabeled-pool, and test sets, plus
/// the acquisition history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ALState {
    num_nodes: usize,
    labeled: Vec<usize>,
    pool: BTreeSet<usize>,
    test: Vec<usize>,
    acquisitions: Vec<(usize, usize)>,
}

impl ALState {
    /// Builds a state from explicit sets, checking that they partition
    /// `0..num_nodes`.
    pub fn from_parts(
        num_nodes: usize,
        labeled: Vec<usize>,
        pool: impl IntoIterator<Item = usize>,
        test: impl IntoIterator<Item = usize>,
    ) -> Result<Self, DataError> {
        let pool: BTreeSet<usize> = pool.into_iter().collect();
        let mut test: Vec<usize> = test.into_iter().collect();
        test.sort_unstable();
        let mut seen = vec![false; num_nodes];
        for &node in labeled.iter().chain(&pool).chain(&test) {
            if node >= num_nodes || std::mem::replace(&mut seen[node], true) {
                return Err(DataError::Invalid(format!(
                    "node {node} is out of range or appears in more than one set"
                )));
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(DataError::Invalid(format!("node {missing} is in no set")));
        }
        Ok(Self {
            num_nodes,
            labeled,
            pool,
            test,
            acquisitions: Vec::new(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Labeled nodes in the order they were labeled.
    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn pool(&self) -> &BTreeSet<usize> {
        &self.pool
    }

    /// Pool nodes in ascending order.
    pub fn pool_nodes(&self) -> Vec<usize> {
        self.pool.iter().copied().collect()
    }

    /// Test nodes in ascending order.
    pub fn test(&self) -> &[usize] {
        &self.test
    }

    /// `(step, node)` pairs in acquisition order.
    pub fn acquisitions(&self) -> &[(usize, usize)] {
        &self.acquisitions
    }

    pub fn is_labeled(&self, node: usize) -> bool {
        self.labeled.contains(&node)
    }

    /// Moves `node` from the pool to the labeled set.
    pub fn acquire(&mut self, step: usize, node: usize) -> Result<(), Error> {
        if !self.pool.remove(&node) {
            return Err(Error::NotInPool { node });
        }
        self.labeled.push(node);
        self.acquisitions.push((step, node));
        Ok(())
    }

    /// Order-sensitive digest of the three sets, for checking that two runs
    /// started from the same split.
    pub fn fingerprint(&self) -> u64 {
        let tags: Vec<u64> = self
            .labeled
            .iter()
            .chain([&usize::MAX])
            .chain(&self.pool)
            .chain([&usize::MAX])
            .chain(&self.test)
            .map(|&x| x as u64)
            .collect();
        rng::derive_seed(self.num_nodes as u64, &tags)
    }
}

/// Fraction of the non-seed nodes held out for testing.
pub const TEST_FRACTION: f64 = 0.05;
/// Initially labeled nodes per class.
pub const SEEDS_PER_CLASS: usize = 2;

/// Labels two random nodes of every class, then holds out
/// `⌊0.05 · (N − 2C)⌋` of the remaining nodes, chosen uniformly, as the
/// test set. Everything else forms the pool.
pub fn make_initial_split(dataset: &GraphDataset, seed: u64) -> Result<ALState, DataError> {
    let n = dataset.num_nodes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (node, &c) in dataset.labels().iter().enumerate() {
        by_class[c].push(node);
    }
    let mut rng = rng::rng_for(seed, &[stream::SPLIT]);
    let mut labeled = Vec::with_capacity(SEEDS_PER_CLASS * by_class.len());
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < SEEDS_PER_CLASS + 1 {
            return Err(DataError::ClassTooSmall {
                class,
                count: members.len(),
            });
        }
        labeled.extend(members.choose_multiple(&mut rng, SEEDS_PER_CLASS).copied());
    }

    let mut is_labeled = vec![false; n];
    for &node in &labeled {
        is_labeled[node] = true;
    }
    let rest: Vec<usize> = (0..n).filter(|&i| !is_labeled[i]).collect();
    let test_size = (TEST_FRACTION * rest.len() as f64).floor() as usize;
    let test_positions = index::sample(&mut rng, rest.len(), test_size);
    let mut in_test = vec![false; rest.len()];
    for p in test_positions.iter() {
        in_test[p] = true;
    }
    let test: Vec<usize> = rest.iter().zip(&in_test).filter(|(_, &t)| t).map(|(&i, _)| i).collect();
    let pool = rest.iter().zip(&in_test).filter(|(_, &t)| !t).map(|(&i, _)| i);
    ALState::from_parts(n, labeled, pool, test)
}

/// Number of neighbors of `node` that are still in the pool. Test nodes can
/// never be acquired, so they do not count.
pub fn unlabeled_neighbor_count(state: &ALState, dataset: &GraphDataset, node: usize) -> usize {
    dataset
        .neighbors(node)
        .iter()
        .filter(|j| state.pool().contains(j))
        .count()
}
