//! CART decision trees over flat feature matrices, with Gini impurity for
//! classification and variance reduction for regression. Trees store flat
//! node arrays so the on-disk model format is a direct dump.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitCriterion {
    Gini,
    Variance,
}

#[derive(Debug, Clone, Copy)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub criterion: SplitCriterion,
    /// Features sampled per split; `None` considers all.
    pub max_features: Option<usize>,
    pub min_samples_split: usize,
}

impl TreeConfig {
    pub fn gini(max_depth: usize) -> TreeConfig {
        TreeConfig {
            max_depth,
            criterion: SplitCriterion::Gini,
            max_features: None,
            min_samples_split: 2,
        }
    }

    pub fn variance(max_depth: usize) -> TreeConfig {
        TreeConfig {
            max_depth,
            criterion: SplitCriterion::Variance,
            max_features: None,
            min_samples_split: 2,
        }
    }
}

/// Flat tree node; `feature < 0` marks a leaf carrying `value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeNode {
    pub feature: i32,
    pub threshold: f64,
    pub left: i32,
    pub right: i32,
    pub value: f64,
}

impl TreeNode {
    fn leaf(value: f64) -> TreeNode {
        TreeNode {
            feature: -1,
            threshold: 0.0,
            left: -1,
            right: -1,
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

/// Best split of `rows` on one feature: (threshold, score). Lower scores
/// are better; `None` when the feature is constant over the rows.
fn best_split_on_feature(
    x: &[f64],
    y: &[f64],
    d: usize,
    rows: &[usize],
    feature: usize,
    criterion: SplitCriterion,
) -> Option<(f64, f64)> {
    let mut order: Vec<usize> = rows.to_vec();
    order.sort_by(|&a, &b| {
        x[a * d + feature]
            .partial_cmp(&x[b * d + feature])
            .unwrap()
            .then(a.cmp(&b))
    });

    let n = order.len() as f64;
    let total_sum: f64 = order.iter().map(|&i| y[i]).sum();
    let total_sq: f64 = order.iter().map(|&i| y[i] * y[i]).sum();

    let mut best: Option<(f64, f64)> = None;
    let mut left_sum = 0.0;
    let mut left_sq = 0.0;
    for split in 1..order.len() {
        let prev = order[split - 1];
        let cur = order[split];
        left_sum += y[prev];
        left_sq += y[prev] * y[prev];
        let (xv_prev, xv_cur) = (x[prev * d + feature], x[cur * d + feature]);
        if xv_prev == xv_cur {
            continue;
        }
        let n_left = split as f64;
        let n_right = n - n_left;
        let score = match criterion {
            SplitCriterion::Gini => {
                // Binary labels: gini = 1 - p^2 - (1-p)^2 = 2p(1-p).
                let p_left = left_sum / n_left;
                let p_right = (total_sum - left_sum) / n_right;
                (n_left * 2.0 * p_left * (1.0 - p_left)
                    + n_right * 2.0 * p_right * (1.0 - p_right))
                    / n
            }
            SplitCriterion::Variance => {
                // Sum of squared errors about each side's mean.
                let right_sum = total_sum - left_sum;
                let right_sq = total_sq - left_sq;
                (left_sq - left_sum * left_sum / n_left)
                    + (right_sq - right_sum * right_sum / n_right)
            }
        };
        let threshold = xv_prev + 0.5 * (xv_cur - xv_prev);
        match best {
            Some((_, s)) if s <= score => {}
            _ => best = Some((threshold, score)),
        }
    }
    best
}

impl DecisionTree {
    /// Fit on rows of a flat [n, d] matrix. `rng` drives per-split feature
    /// subsampling when `max_features` is set.
    pub fn fit(
        x: &[f64],
        y: &[f64],
        d: usize,
        rows: &[usize],
        config: &TreeConfig,
        rng: &mut ChaCha8Rng,
    ) -> DecisionTree {
        assert!(!rows.is_empty(), "tree needs at least one row");
        let mut tree = DecisionTree { nodes: Vec::new() };
        tree.grow(x, y, d, rows.to_vec(), 0, config, rng);
        tree
    }

    fn grow(
        &mut self,
        x: &[f64],
        y: &[f64],
        d: usize,
        rows: Vec<usize>,
        depth: usize,
        config: &TreeConfig,
        rng: &mut ChaCha8Rng,
    ) -> i32 {
        let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
        let pure = rows.iter().all(|&i| y[i] == y[rows[0]]);
        if depth >= config.max_depth || rows.len() < config.min_samples_split || pure {
            self.nodes.push(TreeNode::leaf(mean));
            return self.nodes.len() as i32 - 1;
        }

        let candidates: Vec<usize> = match config.max_features {
            Some(k) if k < d => {
                let mut all: Vec<usize> = (0..d).collect();
                all.shuffle(rng);
                let mut picked = all[..k].to_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..d).collect(),
        };

        let mut best: Option<(usize, f64, f64)> = None;
        for &feature in &candidates {
            if let Some((threshold, score)) =
                best_split_on_feature(x, y, d, &rows, feature, config.criterion)
            {
                match best {
                    Some((_, _, s)) if s <= score => {}
                    _ => best = Some((feature, threshold, score)),
                }
            }
        }

        let Some((feature, threshold, _)) = best else {
            self.nodes.push(TreeNode::leaf(mean));
            return self.nodes.len() as i32 - 1;
        };

        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| x[i * d + feature] <= threshold);
        debug_assert!(!left_rows.is_empty() && !right_rows.is_empty());

        let node_idx = self.nodes.len();
        self.nodes.push(TreeNode {
            feature: feature as i32,
            threshold,
            left: -1,
            right: -1,
            value: mean,
        });
        let left = self.grow(x, y, d, left_rows, depth + 1, config, rng);
        let right = self.grow(x, y, d, right_rows, depth + 1, config, rng);
        self.nodes[node_idx].left = left;
        self.nodes[node_idx].right = right;
        node_idx as i32
    }

    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut idx = 0usize;
        loop {
            let node = &self.nodes[idx];
            if node.feature < 0 {
                return idx;
            }
            idx = if row[node.feature as usize] <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.nodes[self.leaf_index(row)].value
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], idx: usize) -> usize {
            let node = &nodes[idx];
            if node.feature < 0 {
                return 0;
            }
            1 + walk(nodes, node.left as usize).max(walk(nodes, node.right as usize))
        }
        if self.nodes.is_empty() {
            0
        } else {
            walk(&self.nodes, 0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn single_feature_threshold_task() {
        // y = 1 iff x > 0.35; the optimal Gini split lies between the
        // closest straddling points.
        let xs = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let ys = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let rows: Vec<usize> = (0..6).collect();
        let tree = DecisionTree::fit(&xs, &ys, 1, &rows, &TreeConfig::gini(1), &mut rng());
        let root = tree.nodes[0];
        assert_eq!(root.feature, 0);
        assert!((root.threshold - 0.35).abs() < 1e-12);
        assert_eq!(tree.predict(&[0.2]), 0.0);
        assert_eq!(tree.predict(&[0.41]), 1.0);
    }

    #[test]
    fn gini_split_matches_exhaustive_search() {
        // Independent oracle: try every feature and every midpoint.
        fn exhaustive(x: &[f64], y: &[f64], d: usize) -> f64 {
            let n = x.len() / d;
            let mut best = f64::INFINITY;
            for f in 0..d {
                let mut vals: Vec<f64> = (0..n).map(|i| x[i * d + f]).collect();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                vals.dedup();
                for w in vals.windows(2) {
                    let thr = (w[0] + w[1]) / 2.0;
                    let (mut nl, mut sl, mut nr, mut sr) = (0.0, 0.0, 0.0, 0.0);
                    for i in 0..n {
                        if x[i * d + f] <= thr {
                            nl += 1.0;
                            sl += y[i];
                        } else {
                            nr += 1.0;
                            sr += y[i];
                        }
                    }
                    let (pl, pr) = (sl / nl, sr / nr);
                    let score =
                        (nl * 2.0 * pl * (1.0 - pl) + nr * 2.0 * pr * (1.0 - pr)) / (nl + nr);
                    if score < best {
                        best = score;
                    }
                }
            }
            best
        }

        let mut r = rng();
        for case in 0..30 {
            let n = 5 + (case % 20);
            let d = 1 + (case % 3);
            let x: Vec<f64> = (0..n * d).map(|_| r.gen_range(0.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| (r.gen_range(0..2)) as f64).collect();
            if y.iter().all(|&v| v == y[0]) {
                continue;
            }
            let rows: Vec<usize> = (0..n).collect();
            let tree = DecisionTree::fit(&x, &y, d, &rows, &TreeConfig::gini(1), &mut rng());
            let root = tree.nodes[0];
            if root.feature < 0 {
                continue; // constant features
            }
            let oracle = exhaustive(&x, &y, d);
            let chosen = best_split_on_feature(
                &x,
                &y,
                d,
                &rows,
                root.feature as usize,
                SplitCriterion::Gini,
            )
            .unwrap()
            .1;
            assert!(
                (chosen - oracle).abs() < 1e-12,
                "case {case}: chosen {chosen} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn memorizes_at_high_depth() {
        let mut r = rng();
        let n = 40;
        let d = 3;
        let x: Vec<f64> = (0..n * d).map(|_| r.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|i| ((i * 7) % 2) as f64).collect();
        let rows: Vec<usize> = (0..n).collect();
        let tree = DecisionTree::fit(&x, &y, d, &rows, &TreeConfig::gini(20), &mut rng());
        for i in 0..n {
            assert_eq!(tree.predict(&x[i * d..(i + 1) * d]), y[i]);
        }
    }

    #[test]
    fn depth_limit_respected() {
        let mut r = rng();
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.gen_range(0..2) as f64).collect();
        let rows: Vec<usize> = (0..n).collect();
        let tree = DecisionTree::fit(&x, &y, 1, &rows, &TreeConfig::gini(4), &mut rng());
        assert!(tree.depth() <= 4);
    }
}
