//! Random forest of Gini trees: bootstrap rows per tree, sqrt(d) features
//! per split, prediction by averaging leaf class frequencies. Per-tree RNG
//! streams derive from the master seed, so tree-parallel training is
//! reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::tree::{DecisionTree, SplitCriterion, TreeConfig};

#[derive(Debug, Clone, Copy)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 20,
            max_depth: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub features: usize,
}

impl RandomForest {
    pub fn fit(x: &[f64], y: &[f64], d: usize, config: &ForestConfig) -> RandomForest {
        let n = y.len();
        assert_eq!(x.len(), n * d);
        assert!(n > 0, "forest needs training rows");
        let tree_config = TreeConfig {
            max_depth: config.max_depth,
            criterion: SplitCriterion::Gini,
            max_features: Some(((d as f64).sqrt() as usize).max(1)),
            min_samples_split: 2,
        };
        let trees = (0..config.trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    config.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let rows: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
                DecisionTree::fit(x, y, d, &rows, &tree_config, &mut rng)
            })
            .collect();
        RandomForest { trees, features: d }
    }

    /// Mean of per-tree leaf class frequencies.
    pub fn predict(&self, row: &[f64]) -> f64 {
        debug_assert_eq!(row.len(), self.features);
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn node_count(&self) -> usize {
        self.trees.iter().map(|t| t.nodes.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_data_is_learned() {
        // Two clouds separated on feature 0.
        let n = 60;
        let d = 3;
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let pos = i % 2 == 0;
            x.push(if pos { 0.8 + (i as f64) * 1e-3 } else { 0.1 + (i as f64) * 1e-3 });
            x.push((i as f64 * 0.37) % 1.0);
            x.push((i as f64 * 0.11) % 1.0);
            y.push(pos as u8 as f64);
        }
        let forest = RandomForest::fit(&x, &y, d, &ForestConfig::default());
        for i in 0..n {
            let p = forest.predict(&x[i * d..(i + 1) * d]);
            assert_eq!(p.round(), y[i], "row {i} got {p}");
        }
    }

    #[test]
    fn unanimous_votes_hit_the_extremes() {
        use super::super::tree::TreeNode;
        // Hand-built trees that all agree: the vote mean is exactly 1.
        let stump = |value: f64| DecisionTree {
            nodes: vec![TreeNode {
                feature: -1,
                threshold: 0.0,
                left: -1,
                right: -1,
                value,
            }],
        };
        let forest = RandomForest {
            trees: (0..20).map(|_| stump(1.0)).collect(),
            features: 2,
        };
        assert_eq!(forest.predict(&[0.5, 0.5]), 1.0);
        let forest = RandomForest {
            trees: (0..20).map(|_| stump(0.0)).collect(),
            features: 2,
        };
        assert_eq!(forest.predict(&[0.5, 0.5]), 0.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..50 {
            x.push((i as f64 * 0.719) % 1.0);
            x.push((i as f64 * 0.293) % 1.0);
            y.push(((i * 13) % 2) as f64);
        }
        let f1 = RandomForest::fit(&x, &y, 2, &ForestConfig { seed: 5, ..Default::default() });
        let f2 = RandomForest::fit(&x, &y, 2, &ForestConfig { seed: 5, ..Default::default() });
        assert_eq!(f1, f2);
    }
}
