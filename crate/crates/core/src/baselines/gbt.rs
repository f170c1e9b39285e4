//! Gradient-boosted trees with logistic loss: depth-limited variance trees
//! fit to residuals, leaves relabeled by a Newton step, shrinkage 0.1.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tree::{DecisionTree, SplitCriterion, TreeConfig};
use crate::nn::tensor::sigmoid;

#[derive(Debug, Clone, Copy)]
pub struct GbtConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            rounds: 100,
            max_depth: 6,
            shrinkage: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBoost {
    /// Initial log-odds.
    pub base: f64,
    pub shrinkage: f64,
    pub trees: Vec<DecisionTree>,
    pub features: usize,
}

const LEAF_HESSIAN_FLOOR: f64 = 1e-6;
/// Newton steps are clamped so pure leaves cannot blow the logits out of
/// the representable sigmoid range.
const LEAF_VALUE_CLAMP: f64 = 1.0;

impl GradientBoost {
    pub fn fit(x: &[f64], y: &[f64], d: usize, config: &GbtConfig) -> GradientBoost {
        let n = y.len();
        assert_eq!(x.len(), n * d);
        assert!(n > 0, "boosting needs training rows");

        let prior = (y.iter().sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
        let base = (prior / (1.0 - prior)).ln();
        let mut logits = vec![base; n];
        let rows: Vec<usize> = (0..n).collect();
        // Feature subsampling decorrelates the rounds and keeps the score
        // distribution granular instead of piling every confident sample
        // onto one logit plateau.
        let tree_config = TreeConfig {
            max_depth: config.max_depth,
            criterion: SplitCriterion::Variance,
            max_features: Some((3 * d).div_ceil(4).max(1)),
            min_samples_split: 2,
        };

        let mut trees = Vec::with_capacity(config.rounds);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for _ in 0..config.rounds {
            let residuals: Vec<f64> = logits
                .iter()
                .zip(y)
                .map(|(&f, &t)| t - sigmoid(f))
                .collect();
            let mut tree = DecisionTree::fit(x, &residuals, d, &rows, &tree_config, &mut rng);

            // Newton relabel: leaf value = sum(residual) / sum(p (1 - p)).
            let mut grad_sum = vec![0.0; tree.nodes.len()];
            let mut hess_sum = vec![0.0; tree.nodes.len()];
            for i in 0..n {
                let leaf = tree.leaf_index(&x[i * d..(i + 1) * d]);
                let p = sigmoid(logits[i]);
                grad_sum[leaf] += residuals[i];
                hess_sum[leaf] += p * (1.0 - p);
            }
            for (idx, node) in tree.nodes.iter_mut().enumerate() {
                if node.feature < 0 {
                    node.value = (grad_sum[idx] / hess_sum[idx].max(LEAF_HESSIAN_FLOOR))
                        .clamp(-LEAF_VALUE_CLAMP, LEAF_VALUE_CLAMP);
                }
            }

            for i in 0..n {
                logits[i] += config.shrinkage * tree.predict(&x[i * d..(i + 1) * d]);
            }
            trees.push(tree);
        }

        GradientBoost {
            base,
            shrinkage: config.shrinkage,
            trees,
            features: d,
        }
    }

    /// Constant scorer used when a stage has only one class to learn from.
    pub fn constant(prior: f64, d: usize) -> GradientBoost {
        let p = prior.clamp(1e-6, 1.0 - 1e-6);
        GradientBoost {
            base: (p / (1.0 - p)).ln(),
            shrinkage: 0.0,
            trees: Vec::new(),
            features: d,
        }
    }

    pub fn logit(&self, row: &[f64]) -> f64 {
        self.base
            + self.shrinkage
                * self
                    .trees
                    .iter()
                    .map(|t| t.predict(row))
                    .sum::<f64>()
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        sigmoid(self.logit(row))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boosting_fits_a_threshold() {
        let n = 50;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| (v > 0.6) as u8 as f64).collect();
        let model = GradientBoost::fit(&x, &y, 1, &GbtConfig::default());
        for i in 0..n {
            let p = model.predict(&x[i..=i]);
            assert_eq!(p.round(), y[i], "x={} p={p}", x[i]);
        }
    }

    #[test]
    fn loss_decreases_over_rounds() {
        // Noisy two-feature problem; logistic loss must improve on train.
        let n = 80;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let a = ((i * 37) % 100) as f64 / 100.0;
            let b = ((i * 61) % 100) as f64 / 100.0;
            x.push(a);
            x.push(b);
            y.push(((a + 0.3 * b) > 0.55) as u8 as f64);
        }
        let loss = |model: &GradientBoost| -> f64 {
            (0..n)
                .map(|i| {
                    let p = model.predict(&x[i * 2..(i + 1) * 2]).clamp(1e-9, 1.0 - 1e-9);
                    -(y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / n as f64
        };
        let short = GradientBoost::fit(&x, &y, 2, &GbtConfig { rounds: 5, ..Default::default() });
        let long = GradientBoost::fit(&x, &y, 2, &GbtConfig { rounds: 100, ..Default::default() });
        assert!(loss(&long) < loss(&short));
    }

    #[test]
    fn constant_model_scores_prior() {
        let model = GradientBoost::constant(0.25, 3);
        assert!((model.predict(&[0.0, 0.0, 0.0]) - 0.25).abs() < 1e-9);
    }
}
