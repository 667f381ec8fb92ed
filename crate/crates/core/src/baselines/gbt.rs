//! Gradient-boosted regression trees on squared-error residuals.
//!
//! Each round fits a depth-limited tree to the current residuals by greedy
//! variance-reduction splits and adds it with shrinkage. Samples with
//! `x[f] <= threshold` go left. Thresholds are midpoints between adjacent
//! distinct training values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSetId, Split};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const GBT_FORMAT: &str = "irdrop-gbt";
pub const GBT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Shrinkage applied to every tree.
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    /// Kept for the run record; training has no random component.
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            n_trees: 200,
            max_depth: 4,
            learning_rate: 0.1,
            min_samples_leaf: 2,
            seed: 0,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::validation("n_trees must be >= 1"));
        }
        if self.max_depth == 0 {
            return Err(Error::validation("max_depth must be >= 1"));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::validation("min_samples_leaf must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Nodes in creation order; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(t, left).max(walk(t, right)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtRound {
    /// Number of trees in the ensemble after this round.
    pub n_trees: usize,
    pub train_mae: f64,
    /// `None` when the split has no validation rows.
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub format: String,
    pub version: u32,
    pub config: GbtConfig,
    pub n_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_set: Option<FeatureSetId>,
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub history: Vec<GbtRound>,
}

struct Builder<'a> {
    x: &'a Matrix,
    resid: &'a [f64],
    cfg: &'a GbtConfig,
    nodes: Vec<TreeNode>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let value = idx.iter().map(|&i| self.resid[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(TreeNode::Leaf { value });
        self.nodes.len() - 1
    }

    fn best_split(&self, idx: &[usize]) -> Option<BestSplit> {
        let n = idx.len();
        let min_leaf = self.cfg.min_samples_leaf;
        if n < 2 * min_leaf {
            return None;
        }
        let total: f64 = idx.iter().map(|&i| self.resid[i]).sum();
        let parent = total * total / n as f64;
        let mut best: Option<BestSplit> = None;
        let mut order = idx.to_vec();
        for f in 0..self.x.cols() {
            order.sort_by(|&a, &b| self.x.get(a, f).total_cmp(&self.x.get(b, f)).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.resid[order[k]];
                let n_left = k + 1;
                let lo = self.x.get(order[k], f);
                let hi = self.x.get(order[k + 1], f);
                if n_left < min_leaf || n - n_left < min_leaf || lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / n_left as f64
                    + right_sum * right_sum / (n - n_left) as f64
                    - parent;
                if gain > best.as_ref().map_or(0.0, |b| b.gain) {
                    let mid = lo + (hi - lo) / 2.0;
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some(BestSplit {
                        gain,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &[usize], depth: usize) -> usize {
        if depth == self.cfg.max_depth {
            return self.leaf(idx);
        }
        let Some(split) = self.best_split(idx) else {
            return self.leaf(idx);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.x.get(i, split.feature) <= split.threshold);
        let me = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { value: 0.0 });
        let left = self.grow(&l, depth + 1);
        let right = self.grow(&r, depth + 1);
        self.nodes[me] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        me
    }
}

fn mae(pred: &[f64], y: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| (pred[i] - y[i]).abs()).sum::<f64>() / idx.len() as f64
}

/// Fit on `split.train`; `split.val` is only scored. `x` and `y` cover all rows.
pub fn gbt_train(x: &Matrix, y: &[f64], split: &Split, cfg: &GbtConfig) -> Result<GbtModel> {
    cfg.validate()?;
    if x.rows() != y.len() {
        return Err(Error::shape(
            "gbt_train",
            format!("{} feature rows for {} labels", x.rows(), y.len()),
        ));
    }
    if let Some(&bad) = split.train.iter().chain(&split.val).find(|&&i| i >= y.len()) {
        return Err(Error::validation(format!("split index {bad} out of {} rows", y.len())));
    }
    if split.train.len() < 2 {
        return Err(Error::validation(format!(
            "boosting needs at least 2 training rows, got {}",
            split.train.len()
        )));
    }
    if let Some(v) = split.train.iter().map(|&i| y[i]).find(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-finite training label {v}")));
    }
    // Mean as an offset from the first label, so a constant column is exact.
    let y0 = y[split.train[0]];
    let base_score = y0 + split.train.iter().map(|&i| y[i] - y0).sum::<f64>() / split.train.len() as f64;

    let mut pred = vec![base_score; y.len()];
    let mut resid = vec![0.0; y.len()];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut history = Vec::with_capacity(cfg.n_trees);
    for t in 0..cfg.n_trees {
        for &i in &split.train {
            resid[i] = y[i] - pred[i];
        }
        let mut b = Builder {
            x,
            resid: &resid,
            cfg,
            nodes: Vec::new(),
        };
        b.grow(&split.train, 0);
        let tree = Tree { nodes: b.nodes };
        for (i, p) in pred.iter_mut().enumerate() {
            *p += cfg.learning_rate * tree.predict_row(x.row(i));
        }
        trees.push(tree);
        history.push(GbtRound {
            n_trees: t + 1,
            train_mae: mae(&pred, y, &split.train),
            val_mae: (!split.val.is_empty()).then(|| mae(&pred, y, &split.val)),
        });
    }
    Ok(GbtModel {
        format: GBT_FORMAT.to_string(),
        version: GBT_VERSION,
        config: cfg.clone(),
        n_features: x.cols(),
        feature_set: None,
        base_score,
        trees,
        history,
    })
}

impl GbtModel {
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.n_features {
            return Err(Error::shape(
                "gbt_predict",
                format!("{} feature columns, model expects {}", x.cols(), self.n_features),
            ));
        }
        Ok((0..x.rows())
            .map(|r| {
                let row = x.row(r);
                self.base_score
                    + self
                        .trees
                        .iter()
                        .map(|t| self.config.learning_rate * t.predict_row(row))
                        .sum::<f64>()
            })
            .collect())
    }

    /// History as CSV: `n_trees,train_mae,val_mae`.
    pub fn write_history_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.history {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let m: GbtModel = serde_json::from_reader(f)?;
        if m.format != GBT_FORMAT || m.version != GBT_VERSION {
            return Err(Error::validation(format!(
                "not a {GBT_FORMAT} v{GBT_VERSION} model (found {} v{})",
                m.format, m.version
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all(n: usize) -> Split {
        Split {
            train: (0..n).collect(),
            val: vec![],
            test: vec![],
        }
    }

    fn col(v: &[f64]) -> Matrix {
        Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn constant_labels_exact() {
        let x = Matrix::from_vec(4, 2, vec![1.0, 9.0, 2.0, 3.0, 5.0, 1.0, 0.5, 7.0]).unwrap();
        let y = [0.1 + 0.2; 4];
        let m = gbt_train(&x, &y, &all(4), &GbtConfig::default()).unwrap();
        let probe = Matrix::from_vec(2, 2, vec![-100.0, 1e6, 3.3, 0.0]).unwrap();
        assert_eq!(m.predict(&probe).unwrap(), vec![y[0]; 2]);
    }

    #[test]
    fn two_clusters_one_stump() {
        let x = col(&[0.0, 0.1, 0.2, 10.0, 10.1, 10.2]);
        let y = [0.0, 0.0, 0.0, 100.0, 100.0, 100.0];
        let cfg = GbtConfig { n_trees: 1, max_depth: 1, learning_rate: 1.0, min_samples_leaf: 1, seed: 0 };
        let m = gbt_train(&x, &y, &all(6), &cfg).unwrap();
        let p = m.predict(&x).unwrap();
        for (a, b) in p.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
        match m.trees[0].nodes[0] {
            TreeNode::Split { feature: 0, threshold, .. } => assert!((threshold - 5.1).abs() < 1e-12),
            ref n => panic!("root is {n:?}"),
        }
    }

    #[test]
    fn zero_trees_rejected() {
        let cfg = GbtConfig { n_trees: 0, ..GbtConfig::default() };
        assert!(gbt_train(&col(&[1.0, 2.0]), &[1.0, 2.0], &all(2), &cfg).is_err());
    }

    #[test]
    fn too_few_rows() {
        assert!(gbt_train(&col(&[1.0]), &[1.0], &all(1), &GbtConfig::default()).is_err());
    }

    #[test]
    fn width_mismatch_on_predict() {
        let m = gbt_train(&col(&[1.0, 2.0, 3.0]), &[1.0, 2.0, 3.0], &all(3), &GbtConfig::default()).unwrap();
        assert!(m.predict(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn adjacent_floats_split_cleanly() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let cfg = GbtConfig { n_trees: 1, max_depth: 1, learning_rate: 1.0, min_samples_leaf: 1, seed: 0 };
        let m = gbt_train(&col(&[a, b]), &[0.0, 1.0], &all(2), &cfg).unwrap();
        assert_eq!(m.predict(&col(&[a, b])).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn min_samples_leaf_respected() {
        let x = col(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = [9.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let cfg = GbtConfig { n_trees: 1, max_depth: 3, learning_rate: 1.0, min_samples_leaf: 2, seed: 0 };
        let m = gbt_train(&x, &y, &all(6), &cfg).unwrap();
        fn leaf_sizes(t: &Tree, x: &Matrix) -> Vec<usize> {
            let mut counts = std::collections::BTreeMap::new();
            for r in 0..x.rows() {
                let mut i = 0;
                while let TreeNode::Split { feature, threshold, left, right } = t.nodes[i] {
                    i = if x.get(r, feature) <= threshold { left } else { right };
                }
                *counts.entry(i).or_insert(0) += 1;
            }
            counts.into_values().collect()
        }
        assert!(leaf_sizes(&m.trees[0], &x).iter().all(|&c| c >= 2));
    }

    #[test]
    fn json_round_trip() {
        let x = Matrix::from_vec(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = [1.0, 4.0, 9.0, 16.0, 25.0];
        let m = gbt_train(&x, &y, &all(5), &GbtConfig { n_trees: 5, ..GbtConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gbt.json");
        m.save(&p).unwrap();
        assert_eq!(GbtModel::load(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn trees_respect_depth_and_fit_improves(
            rows in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0, -5.0f64..5.0), 4..40),
            depth in 1usize..4,
        ) {
            let n = rows.len();
            let x = Matrix::from_vec(n, 2, rows.iter().flat_map(|r| [r.0, r.1]).collect()).unwrap();
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let cfg = GbtConfig { n_trees: 10, max_depth: depth, learning_rate: 0.3, min_samples_leaf: 1, seed: 0 };
            let m = gbt_train(&x, &y, &all(n), &cfg).unwrap();
            for t in &m.trees {
                prop_assert!(t.depth() <= depth);
            }
            let mse = |p: &[f64]| p.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let mean = y.iter().sum::<f64>() / n as f64;
            prop_assert!(mse(&m.predict(&x).unwrap()) <= mse(&vec![mean; n]) + 1e-9);
        }
    }
}
