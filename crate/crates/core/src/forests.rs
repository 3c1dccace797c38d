//! Random forest and extra-trees classifiers with Gini splits.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestMode {
    RandomForest,
    ExtraTrees,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 100,
            max_depth: 10,
            min_samples_split: 2,
        }
    }
}

/// Tree stored as parallel node arrays. Node 0 is the root; a node with
/// `left == 0` is a leaf. Samples with `x[feature] <= threshold` go left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub feature: Vec<u32>,
    #[serde(with = "crate::artifact::f64_b64")]
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    #[serde(with = "crate::artifact::f64_b64")]
    pub value: Vec<f64>,
    pub max_depth: usize,
}

impl DecisionTree {
    fn push(&mut self, value: f64) -> usize {
        self.feature.push(0);
        self.threshold.push(0.0);
        self.left.push(0);
        self.right.push(0);
        self.value.push(value);
        self.value.len() - 1
    }

    pub fn node_count(&self) -> usize {
        self.value.len()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.left[node] == 0
    }

    /// Depth of the deepest node (root has depth 0).
    pub fn depth(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((node, d)) = stack.pop() {
            best = best.max(d);
            if !self.is_leaf(node) {
                stack.push((self.left[node] as usize, d + 1));
                stack.push((self.right[node] as usize, d + 1));
            }
        }
        best
    }

    pub fn predict_row(&self, x: ArrayView1<f64>) -> f64 {
        let mut node = 0;
        while !self.is_leaf(node) {
            node = if x[self.feature[node] as usize] <= self.threshold[node] {
                self.left[node] as usize
            } else {
                self.right[node] as usize
            };
        }
        self.value[node]
    }
}

fn gini(pos: f64, total: f64) -> f64 {
    if total == 0.0 {
        return 0.0;
    }
    let p = pos / total;
    2.0 * p * (1.0 - p)
}

struct Split {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [u8],
    mode: ForestMode,
    config: &'a ForestConfig,
    max_features: usize,
    rng: ChaCha8Rng,
    tree: DecisionTree,
}

impl Builder<'_> {
    fn weighted_impurity(&self, samples: &[usize], feature: usize, threshold: f64) -> f64 {
        let (mut nl, mut pl, mut nr, mut pr) = (0.0, 0.0, 0.0, 0.0);
        for &i in samples {
            let pos = f64::from(self.y[i]);
            if self.x[[i, feature]] <= threshold {
                nl += 1.0;
                pl += pos;
            } else {
                nr += 1.0;
                pr += pos;
            }
        }
        (nl * gini(pl, nl) + nr * gini(pr, nr)) / (nl + nr)
    }

    /// Exhaustive midpoint thresholds for one feature.
    fn best_exhaustive(&self, samples: &[usize], feature: usize) -> Option<Split> {
        let mut pairs: Vec<(f64, u8)> = samples.iter().map(|&i| (self.x[[i, feature]], self.y[i])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pairs.len() as f64;
        let total_pos: f64 = pairs.iter().map(|p| f64::from(p.1)).sum();
        let (mut nl, mut pl) = (0.0, 0.0);
        let mut best: Option<Split> = None;
        for w in 0..pairs.len() - 1 {
            nl += 1.0;
            pl += f64::from(pairs[w].1);
            let (a, b) = (pairs[w].0, pairs[w + 1].0);
            if a == b {
                continue;
            }
            let nr = n - nl;
            let impurity = (nl * gini(pl, nl) + nr * gini(total_pos - pl, nr)) / n;
            if best.as_ref().is_none_or(|s| impurity < s.impurity) {
                let mid = 0.5 * (a + b);
                let threshold = if mid < b { mid } else { a };
                best = Some(Split {
                    feature,
                    threshold,
                    impurity,
                });
            }
        }
        best
    }

    fn random_threshold(&mut self, samples: &[usize], feature: usize) -> Option<Split> {
        let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = self.x[[i, feature]];
            (lo.min(v), hi.max(v))
        });
        if lo >= hi {
            return None;
        }
        let mut threshold = self.rng.random_range(lo..hi);
        if threshold >= hi {
            threshold = lo;
        }
        let impurity = self.weighted_impurity(samples, feature, threshold);
        Some(Split {
            feature,
            threshold,
            impurity,
        })
    }

    fn find_split(&mut self, samples: &[usize]) -> Option<Split> {
        let d = self.x.ncols();
        let features = sample(&mut self.rng, d, self.max_features).into_vec();
        let mut best: Option<Split> = None;
        for f in features {
            let candidate = match self.mode {
                ForestMode::RandomForest => self.best_exhaustive(samples, f),
                ForestMode::ExtraTrees => self.random_threshold(samples, f),
            };
            if let Some(c) = candidate {
                if best.as_ref().is_none_or(|b| c.impurity < b.impurity) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn grow(&mut self, samples: &mut [usize], depth: usize) -> usize {
        let pos = samples.iter().filter(|&&i| self.y[i] == 1).count();
        let node = self.tree.push(pos as f64 / samples.len() as f64);
        if depth >= self.config.max_depth
            || samples.len() < self.config.min_samples_split
            || pos == 0
            || pos == samples.len()
        {
            return node;
        }
        let Some(split) = self.find_split(samples) else {
            return node;
        };
        let mut mid = 0;
        for j in 0..samples.len() {
            if self.x[[samples[j], split.feature]] <= split.threshold {
                samples.swap(mid, j);
                mid += 1;
            }
        }
        if mid == 0 || mid == samples.len() {
            return node;
        }
        let (left_samples, right_samples) = samples.split_at_mut(mid);
        let left = self.grow(left_samples, depth + 1);
        let right = self.grow(right_samples, depth + 1);
        self.tree.feature[node] = split.feature as u32;
        self.tree.threshold[node] = split.threshold;
        self.tree.left[node] = left as u32;
        self.tree.right[node] = right as u32;
        node
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub mode: ForestMode,
    pub feature_subsample: usize,
    pub n_features: usize,
    pub seed: u64,
}

pub fn fit_tree(
    x: ArrayView2<f64>,
    y: &[u8],
    samples: &mut [usize],
    mode: ForestMode,
    config: &ForestConfig,
    rng: ChaCha8Rng,
) -> DecisionTree {
    let max_features = (x.ncols() as f64).sqrt().ceil() as usize;
    let mut builder = Builder {
        x,
        y,
        mode,
        config,
        max_features: max_features.clamp(1, x.ncols()),
        rng,
        tree: DecisionTree {
            feature: Vec::new(),
            threshold: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            value: Vec::new(),
            max_depth: config.max_depth,
        },
    };
    builder.grow(samples, 0);
    builder.tree
}

pub fn fit_forest(
    x: ArrayView2<f64>,
    y: &[u8],
    mode: ForestMode,
    config: &ForestConfig,
    seed: u64,
) -> Result<ForestModel> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} labels", y.len())));
    }
    if x.ncols() == 0 || config.trees == 0 {
        return Err(Error::Parameter(
            "forest needs at least one feature and one tree".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("forest input contains non-finite values".into()));
    }
    let positives = y.iter().filter(|&&l| l == 1).count();
    if n < 2 || positives == 0 || positives == n {
        return Err(Error::Training(format!(
            "forest needs both classes, got {positives} positives in {n} rows"
        )));
    }
    let trees = (0..config.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::rng(seed::derive(seed, t as u64));
            let mut samples: Vec<usize> = match mode {
                ForestMode::RandomForest => (0..n).map(|_| rng.random_range(0..n)).collect(),
                ForestMode::ExtraTrees => (0..n).collect(),
            };
            fit_tree(x, y, &mut samples, mode, config, rng)
        })
        .collect();
    Ok(ForestModel {
        trees,
        mode,
        feature_subsample: ((x.ncols() as f64).sqrt().ceil() as usize).min(x.ncols()),
        n_features: x.ncols(),
        seed,
    })
}

impl ForestModel {
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::Shape(format!(
                "forest trained on {} features, input has {}",
                self.n_features,
                x.ncols()
            )));
        }
        let count = self.trees.len() as f64;
        Ok(x.rows()
            .into_iter()
            .map(|row| self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / count)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn single_split_at_zero() {
        let x = array![[-2.0], [-1.0], [1.0], [2.0]];
        let y = [0, 0, 1, 1];
        let mut samples: Vec<usize> = (0..4).collect();
        let tree = fit_tree(
            x.view(),
            &y,
            &mut samples,
            ForestMode::RandomForest,
            &ForestConfig::default(),
            seed::rng(0),
        );
        assert_eq!(tree.node_count(), 3);
        assert_eq!(tree.depth(), 1);
        assert_eq!(tree.threshold[0], 0.0);
        for (i, row) in x.rows().into_iter().enumerate() {
            assert_eq!(tree.predict_row(row), f64::from(y[i]));
        }
    }

    #[test]
    fn constant_features_give_base_rate() {
        let x = Array2::from_elem((8, 3), 1.5);
        let y = [1, 0, 0, 0, 1, 0, 0, 0];
        let f = fit_forest(x.view(), &y, ForestMode::ExtraTrees, &ForestConfig::default(), 3).unwrap();
        assert!(f.trees.iter().all(|t| t.node_count() == 1));
        assert_eq!(f.predict_proba(x.view()).unwrap(), vec![0.25; 8]);
    }

    #[test]
    fn errors() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(
            fit_forest(x.view(), &[1, 1], ForestMode::RandomForest, &ForestConfig::default(), 0),
            Err(Error::Training(_))
        ));
        let f = fit_forest(x.view(), &[0, 1], ForestMode::RandomForest, &ForestConfig::default(), 0).unwrap();
        assert!(matches!(
            f.predict_proba(array![[0.0, 1.0]].view()),
            Err(Error::Shape(_))
        ));
    }
}
