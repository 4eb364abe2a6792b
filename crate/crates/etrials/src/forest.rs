//! CART-style regression forest trained on bootstrap resamples, with
//! out-of-bag predictions exposed for the permutation balance check.
//!
//! Numeric features split on midpoint thresholds between consecutive
//! distinct sorted values. Categorical features are split by ordering the
//! levels by their target mean and scanning that order like a numeric
//! axis, so arbitrarily many levels are supported. Ties in impurity are
//! broken by lowest feature index, then lowest threshold. The RNG is a
//! portable seeded generator, so a (seed, data) pair always yields the
//! same forest regardless of platform or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// How a feature column is interpreted when searching for splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Numeric,
    /// Values are integer level codes stored as f64.
    Categorical,
}

#[derive(Debug, Clone)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features sampled (without replacement) at each node.
    pub mtry: usize,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
}

impl ForestParams {
    /// Regression defaults: 100 trees, mtry = ceil(q/3), leaves of 5.
    pub fn default_for(n_features: usize) -> Self {
        ForestParams {
            n_trees: 100,
            mtry: n_features.div_ceil(3).max(1),
            min_leaf: 5,
            max_depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        rule: SplitRule,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum SplitRule {
    /// Go left when x < threshold.
    Threshold(f64),
    /// Go left when the level code is in this sorted list; unseen levels
    /// go right.
    Categories(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
    /// Rows of the training set this tree never saw (bootstrap complement).
    oob: Vec<bool>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    rule,
                    left,
                    right,
                } => {
                    let x = row[*feature];
                    let go_left = match rule {
                        SplitRule::Threshold(t) => x < *t,
                        SplitRule::Categories(levels) => {
                            levels.binary_search(&(x.round() as i64)).is_ok()
                        }
                    };
                    at = if go_left { *left } else { *right };
                }
            }
        }
    }
}

/// A trained forest. Immutable and shareable across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    trees: Vec<Tree>,
    n_rows: usize,
}

struct TreeBuilder<'a> {
    rows: &'a [Vec<f64>],
    kinds: &'a [FeatureKind],
    targets: &'a [f64],
    params: &'a ForestParams,
    nodes: Vec<Node>,
    feature_pool: Vec<usize>,
}

impl TreeBuilder<'_> {
    /// Builds the subtree over `idx` (indices into the bootstrap sample,
    /// with repetition) and returns the node id.
    fn build(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let mean = idx.iter().map(|&i| self.targets[i]).sum::<f64>() / idx.len() as f64;
        let at_depth_limit = self.params.max_depth.is_some_and(|d| depth >= d);
        if idx.len() < 2 * self.params.min_leaf || at_depth_limit {
            self.nodes.push(Node::Leaf { value: mean });
            return self.nodes.len() - 1;
        }

        // Partial Fisher-Yates draws mtry distinct features; sorted so the
        // lowest-index tie-break is deterministic.
        let q = self.feature_pool.len();
        let mtry = self.params.mtry.min(q);
        for k in 0..mtry {
            let j = rng.gen_range(k..q);
            self.feature_pool.swap(k, j);
        }
        let mut candidates: Vec<usize> = self.feature_pool[..mtry].to_vec();
        candidates.sort_unstable();

        let mut best: Option<(f64, usize, SplitRule)> = None;
        for &feature in &candidates {
            if let Some((score, rule)) = self.best_split(idx, feature) {
                let better = match &best {
                    None => true,
                    Some((best_score, _, _)) => score < *best_score - 1e-12,
                };
                if better {
                    best = Some((score, feature, rule));
                }
            }
        }

        let Some((_, feature, rule)) = best else {
            self.nodes.push(Node::Leaf { value: mean });
            return self.nodes.len() - 1;
        };

        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| match &rule {
                SplitRule::Threshold(t) => self.rows[i][feature] < *t,
                SplitRule::Categories(levels) => levels
                    .binary_search(&(self.rows[i][feature].round() as i64))
                    .is_ok(),
            });

        let placeholder = self.nodes.len();
        self.nodes.push(Node::Leaf { value: mean });
        let left = self.build(&left_idx, depth + 1, rng);
        let right = self.build(&right_idx, depth + 1, rng);
        self.nodes[placeholder] = Node::Split {
            feature,
            rule,
            left,
            right,
        };
        placeholder
    }

    /// Minimum-SSE split of `idx` on one feature, honoring min_leaf.
    /// Returns (child-weighted SSE, rule); None when no legal split helps.
    fn best_split(&self, idx: &[usize], feature: usize) -> Option<(f64, SplitRule)> {
        match self.kinds[feature] {
            FeatureKind::Numeric => {
                let mut pairs: Vec<(f64, f64)> = idx
                    .iter()
                    .map(|&i| (self.rows[i][feature], self.targets[i]))
                    .collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                self.scan_ordered(&pairs).map(|(score, cut)| {
                    let t = (pairs[cut - 1].0 + pairs[cut].0) / 2.0;
                    (score, SplitRule::Threshold(t))
                })
            }
            FeatureKind::Categorical => {
                // Order levels by target mean, then scan that order.
                let mut stats: Vec<(i64, f64, u32)> = Vec::new();
                for &i in idx {
                    let code = self.rows[i][feature].round() as i64;
                    match stats.iter_mut().find(|(c, _, _)| *c == code) {
                        Some((_, sum, n)) => {
                            *sum += self.targets[i];
                            *n += 1;
                        }
                        None => stats.push((code, self.targets[i], 1)),
                    }
                }
                if stats.len() < 2 {
                    return None;
                }
                stats.sort_by(|a, b| {
                    (a.1 / a.2 as f64)
                        .total_cmp(&(b.1 / b.2 as f64))
                        .then(a.0.cmp(&b.0))
                });
                let order: Vec<i64> = stats.iter().map(|(c, _, _)| *c).collect();
                let rank_of = |code: i64| order.iter().position(|&c| c == code).unwrap();
                let mut pairs: Vec<(f64, f64)> = idx
                    .iter()
                    .map(|&i| {
                        let code = self.rows[i][feature].round() as i64;
                        (rank_of(code) as f64, self.targets[i])
                    })
                    .collect();
                pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
                self.scan_ordered(&pairs).map(|(score, cut)| {
                    let boundary = pairs[cut].0 as usize; // first rank on the right
                    let mut left: Vec<i64> = order[..boundary].to_vec();
                    left.sort_unstable();
                    (score, SplitRule::Categories(left))
                })
            }
        }
    }

    /// Scans sorted (key, target) pairs for the cut position minimizing
    /// left SSE + right SSE. Cuts are only allowed between distinct keys.
    /// Returns (SSE, cut index) where the cut splits [0, cut) | [cut, n).
    fn scan_ordered(&self, pairs: &[(f64, f64)]) -> Option<(f64, usize)> {
        let n = pairs.len();
        let total_sum: f64 = pairs.iter().map(|p| p.1).sum();
        let total_sq: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
        let parent_sse = total_sq - total_sum * total_sum / n as f64;
        let mut best: Option<(f64, usize)> = None;
        let mut left_sum = 0.0;
        for cut in 1..n {
            left_sum += pairs[cut - 1].1;
            if pairs[cut].0 <= pairs[cut - 1].0 {
                continue; // not between distinct keys
            }
            if cut < self.params.min_leaf || n - cut < self.params.min_leaf {
                continue;
            }
            let right_sum = total_sum - left_sum;
            let explained =
                left_sum * left_sum / cut as f64 + right_sum * right_sum / (n - cut) as f64;
            let sse = total_sq - explained;
            if best.is_none_or(|(b, _)| sse < b - 1e-12) {
                best = Some((sse, cut));
            }
        }
        // Require a strict improvement over the unsplit node.
        best.filter(|(sse, _)| *sse < parent_sse - 1e-12)
    }
}

/// Derives a stream-separated seed, stable across platforms.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 step over the combined value
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains a forest of `params.n_trees` trees on bootstrap resamples of the
/// rows. Trees are built in parallel with per-tree derived seeds, so the
/// result is independent of scheduling.
pub fn forest_train(
    rows: &[Vec<f64>],
    kinds: &[FeatureKind],
    targets: &[f64],
    params: &ForestParams,
    seed: u64,
) -> Forest {
    assert!(!rows.is_empty(), "forest requires at least one row");
    assert_eq!(rows.len(), targets.len());
    let n = rows.len();
    let trees: Vec<Tree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, t as u64));
            let mut in_bag = vec![false; n];
            let mut sample = Vec::with_capacity(n);
            for _ in 0..n {
                let i = rng.gen_range(0..n);
                in_bag[i] = true;
                sample.push(i);
            }
            let mut builder = TreeBuilder {
                rows,
                kinds,
                targets,
                params,
                nodes: Vec::new(),
                feature_pool: (0..kinds.len()).collect(),
            };
            builder.build(&sample, 0, &mut rng);
            Tree {
                nodes: builder.nodes,
                oob: in_bag.iter().map(|b| !b).collect(),
            }
        })
        .collect();
    Forest { trees, n_rows: n }
}

impl Forest {
    /// Mean prediction over all trees.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
        sum / self.trees.len() as f64
    }

    /// Per-training-row predictions using only the trees that did not see
    /// the row. None when every tree sampled the row.
    pub fn oob_predictions(&self, rows: &[Vec<f64>]) -> Vec<Option<f64>> {
        assert_eq!(rows.len(), self.n_rows);
        (0..self.n_rows)
            .map(|i| {
                let mut sum = 0.0;
                let mut count = 0usize;
                for t in &self.trees {
                    if t.oob[i] {
                        sum += t.predict(&rows[i]);
                        count += 1;
                    }
                }
                if count == 0 {
                    None
                } else {
                    Some(sum / count as f64)
                }
            })
            .collect()
    }

    /// Bootstrap complements, one mask per tree (true = row was out of bag).
    pub fn oob_masks(&self) -> Vec<&[bool]> {
        self.trees.iter().map(|t| t.oob.as_slice()).collect()
    }
}
