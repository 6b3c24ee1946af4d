//! Random forest of CART trees with Gini impurity, used as the
//! non-graph baseline.

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::qeasl::Label;
use crate::seed;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForestError {
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("row has {found} features, forest expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf { counts: [usize; 2] },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
    pub n_features: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Candidate features per split; `None` or `>= d` uses every feature.
    pub features_per_split: Option<usize>,
}

pub fn gini(counts: [usize; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / n;
    let p1 = counts[1] as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

fn count(y: &[usize], rows: &[usize]) -> [usize; 2] {
    let mut c = [0, 0];
    for &r in rows {
        c[y[r]] += 1;
    }
    c
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
}

fn best_split(x: ArrayView2<'_, f64>, y: &[usize], rows: &[usize], features: &[usize]) -> Option<BestSplit> {
    let total = count(y, rows);
    let n = rows.len() as f64;
    let parent = gini(total);
    let mut best: Option<BestSplit> = None;
    let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
    for &f in features {
        sorted.clear();
        sorted.extend(rows.iter().map(|&r| (x[[r, f]], y[r])));
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut left = [0usize; 2];
        for i in 0..sorted.len() - 1 {
            left[sorted[i].1] += 1;
            if sorted[i].0 == sorted[i + 1].0 {
                continue;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let nl = (i + 1) as f64;
            let impurity = (nl * gini(left) + (n - nl) * gini(right)) / n;
            if impurity < parent - 1e-12 && best.as_ref().is_none_or(|b| impurity < b.impurity) {
                best = Some(BestSplit { feature: f, threshold: 0.5 * (sorted[i].0 + sorted[i + 1].0), impurity });
            }
        }
    }
    best
}

impl DecisionTree {
    /// Grow a tree on `rows` of `x` (duplicates allowed, e.g. a bootstrap sample).
    pub fn fit<R: Rng>(x: ArrayView2<'_, f64>, y: &[usize], rows: &[usize], params: &TreeParams, rng: &mut R) -> DecisionTree {
        let mut tree = DecisionTree { nodes: Vec::new(), n_features: x.ncols() };
        tree.grow(x, y, rows.to_vec(), 0, params, rng);
        tree
    }

    fn grow<R: Rng>(&mut self, x: ArrayView2<'_, f64>, y: &[usize], rows: Vec<usize>, depth: usize, params: &TreeParams, rng: &mut R) -> usize {
        let counts = count(y, &rows);
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { counts });
        let pure = counts[0] == 0 || counts[1] == 0;
        if pure || depth >= params.max_depth || rows.len() < params.min_samples_split.max(2) {
            return id;
        }
        let d = x.ncols();
        let features: Vec<usize> = match params.features_per_split {
            Some(m) if m < d => {
                let mut f = sample(rng, d, m.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..d).collect(),
        };
        let Some(split) = best_split(x, y, &rows, &features) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.into_iter().partition(|&i| x[[i, split.feature]] <= split.threshold);
        let left = self.grow(x, y, l, depth + 1, params, rng);
        let right = self.grow(x, y, r, depth + 1, params, rng);
        self.nodes[id] = TreeNode::Split { feature: split.feature, threshold: split.threshold, left, right };
        id
    }

    pub fn leaf_counts(&self, row: ArrayView1<'_, f64>) -> [usize; 2] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { counts } => return *counts,
                TreeNode::Split { feature, threshold, left, right } => {
                    i = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Majority class of the reached leaf; ties go to class 0.
    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> usize {
        let c = self.leaf_counts(row);
        usize::from(c[1] > c[0])
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// `None` means ⌈√d⌉.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub min_samples_split: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 100, max_depth: 8, features_per_split: None, bootstrap: true, min_samples_split: 2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
    pub params: ForestParams,
    pub n_features: usize,
}

pub fn train_random_forest(x: ArrayView2<'_, f64>, labels: &[Label], params: &ForestParams) -> Result<RandomForest, ForestError> {
    if labels.len() != x.nrows() {
        return Err(ForestError::TooFewSamples(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    if params.n_trees == 0 || params.max_depth == 0 {
        return Err(ForestError::InvalidParams("n_trees and max_depth must be >= 1".into()));
    }
    let y: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    for class in 0..2 {
        let c = y.iter().filter(|&&v| v == class).count();
        if c < 2 {
            return Err(ForestError::TooFewSamples(format!("class {} has {c} samples, need 2", Label::from_index(class).code())));
        }
    }
    let (n, d) = x.dim();
    let m = params.features_per_split.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).clamp(1, d.max(1));
    let tree_params = TreeParams { max_depth: params.max_depth, min_samples_split: params.min_samples_split, features_per_split: Some(m) };
    let trees = (0..params.n_trees)
        .map(|t| {
            let mut rng = seed::stage_rng(params.seed, "rf-tree", t as u64);
            let rows: Vec<usize> = if params.bootstrap { (0..n).map(|_| rng.random_range(0..n)).collect() } else { (0..n).collect() };
            DecisionTree::fit(x, &y, &rows, &tree_params, &mut rng)
        })
        .collect();
    Ok(RandomForest { trees, params: params.clone(), n_features: d })
}

/// Majority-vote labels and positive-class vote fractions.
pub fn rf_predict(forest: &RandomForest, rows: ArrayView2<'_, f64>) -> Result<(Vec<Label>, Vec<f64>), ForestError> {
    if rows.ncols() != forest.n_features {
        return Err(ForestError::DimMismatch { expected: forest.n_features, found: rows.ncols() });
    }
    let mut labels = Vec::with_capacity(rows.nrows());
    let mut fractions = Vec::with_capacity(rows.nrows());
    for row in rows.rows() {
        let pos = forest.trees.iter().filter(|t| t.predict_row(row) == 1).count();
        let frac = pos as f64 / forest.trees.len() as f64;
        labels.push(if 2 * pos > forest.trees.len() { Label::Responder } else { Label::NonResponder });
        fractions.push(frac);
    }
    Ok((labels, fractions))
}
