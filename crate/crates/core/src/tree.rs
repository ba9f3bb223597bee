//! Regression trees that remember which training points share each leaf.
//!
//! Every fitted tree keeps, for all `n` training points (subsampled or not),
//! the id of the leaf the point lands in, together with the subsample mask
//! used to fit it. That is enough to rebuild the tree's structure vector at
//! any point and therefore the empirical kernel of an ensemble.
//!
//! Splits are chosen on the subsampled rows only; all rows are routed
//! through the finished tree afterwards.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{BratError, Result};
use crate::params::NumberOrKeyword;

/// Relative gain below which a greedy split is treated as no improvement.
const GAIN_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Best SSE-reducing (feature, threshold) with thresholds at midpoints.
    #[default]
    GreedyVariance,
    /// Best feature by SSE reduction, split at its in-node median.
    Median,
}

/// Minimum number of subsampled points per leaf.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "NumberOrKeyword", into = "NumberOrKeyword")]
pub enum MinLeaf {
    /// `ceil(n^(1/(d+2)))`.
    #[default]
    Auto,
    Fixed(usize),
}

impl TryFrom<NumberOrKeyword> for MinLeaf {
    type Error = String;
    fn try_from(v: NumberOrKeyword) -> std::result::Result<Self, String> {
        match v {
            NumberOrKeyword::Number(x) => NumberOrKeyword::as_count(x).map(MinLeaf::Fixed),
            k => k.expect_keyword(&["auto"]).map(|_| MinLeaf::Auto),
        }
    }
}

impl From<MinLeaf> for NumberOrKeyword {
    fn from(m: MinLeaf) -> Self {
        match m {
            MinLeaf::Auto => NumberOrKeyword::Keyword("auto".into()),
            MinLeaf::Fixed(k) => NumberOrKeyword::Number(k as f64),
        }
    }
}

impl MinLeaf {
    pub fn resolve(self, n: usize, d: usize) -> usize {
        match self {
            MinLeaf::Fixed(k) => k,
            MinLeaf::Auto => {
                let v = (n as f64).powf(1.0 / (d as f64 + 2.0)).ceil() as usize;
                v.max(1)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    #[serde(default)]
    pub min_leaf: MinLeaf,
    #[serde(default)]
    pub split_rule: SplitRule,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 4,
            min_leaf: MinLeaf::Auto,
            split_rule: SplitRule::GreedyVariance,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(BratError::param("max_depth", "must be at least 1"));
        }
        if self.min_leaf == MinLeaf::Fixed(0) {
            return Err(BratError::param("min_leaf", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    /// Points with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { leaf_value: f64, leaf_id: usize },
}

/// Serialized form: `{nodes, n_features, train_leaf_ids, subsample_mask}`.
#[derive(Serialize, Deserialize)]
struct TreeRepr {
    nodes: Vec<Node>,
    n_features: usize,
    train_leaf_ids: Vec<u32>,
    subsample_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeRepr", into = "TreeRepr")]
pub struct RegressionTree {
    nodes: Vec<Node>,
    n_features: usize,
    /// Node index of each leaf id.
    leaf_nodes: Vec<usize>,
    train_leaf_ids: Vec<u32>,
    subsample_mask: Vec<bool>,
    leaf_subsample_counts: Vec<u32>,
}

impl From<RegressionTree> for TreeRepr {
    fn from(t: RegressionTree) -> Self {
        TreeRepr {
            nodes: t.nodes,
            n_features: t.n_features,
            train_leaf_ids: t.train_leaf_ids,
            subsample_mask: t.subsample_mask,
        }
    }
}

impl TryFrom<TreeRepr> for RegressionTree {
    type Error = String;

    fn try_from(r: TreeRepr) -> std::result::Result<Self, String> {
        if r.nodes.is_empty() {
            return Err("tree has no nodes".into());
        }
        if r.train_leaf_ids.len() != r.subsample_mask.len() {
            return Err("train_leaf_ids and subsample_mask differ in length".into());
        }
        let mut leaf_nodes = Vec::new();
        for (idx, node) in r.nodes.iter().enumerate() {
            match *node {
                Node::Split {
                    feature,
                    left,
                    right,
                    ..
                } => {
                    if feature >= r.n_features || left >= r.nodes.len() || right >= r.nodes.len() {
                        return Err(format!("node {idx} references out-of-range data"));
                    }
                    if left <= idx || right <= idx {
                        return Err(format!("node {idx} has a backward child link"));
                    }
                }
                Node::Leaf { leaf_id, .. } => {
                    if leaf_id >= leaf_nodes.len() {
                        leaf_nodes.resize(leaf_id + 1, usize::MAX);
                    }
                    leaf_nodes[leaf_id] = idx;
                }
            }
        }
        if leaf_nodes.contains(&usize::MAX) {
            return Err("leaf ids are not contiguous".into());
        }
        if r.train_leaf_ids.iter().any(|&l| l as usize >= leaf_nodes.len()) {
            return Err("train_leaf_ids references an unknown leaf".into());
        }
        let counts = subsample_counts(&r.train_leaf_ids, &r.subsample_mask, leaf_nodes.len());
        Ok(RegressionTree {
            nodes: r.nodes,
            n_features: r.n_features,
            leaf_nodes,
            train_leaf_ids: r.train_leaf_ids,
            subsample_mask: r.subsample_mask,
            leaf_subsample_counts: counts,
        })
    }
}

fn subsample_counts(leaf_ids: &[u32], mask: &[bool], n_leaves: usize) -> Vec<u32> {
    let mut counts = vec![0u32; n_leaves];
    for (&l, &m) in leaf_ids.iter().zip(mask) {
        if m {
            counts[l as usize] += 1;
        }
    }
    counts
}

fn mask_from_subsample(n: usize, subsample: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &i in subsample {
        if i >= n {
            return Err(BratError::Data(format!("subsample index {i} out of range for {n} rows")));
        }
        mask[i] = true;
    }
    Ok(mask)
}

fn check_residuals(ds: &Dataset, residuals: &[f64]) -> Result<()> {
    if residuals.len() != ds.n() {
        return Err(BratError::Data(format!(
            "{} residuals for {} rows",
            residuals.len(),
            ds.n()
        )));
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(BratError::Data("non-finite residual".into()));
    }
    Ok(())
}

struct Grower<'a> {
    ds: &'a Dataset,
    z: &'a [f64],
    rule: SplitRule,
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
    n_leaves: usize,
    // scratch for sorting (value, residual) pairs
    scratch: Vec<(f64, f64)>,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Grower<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let node = self.nodes.len();
        self.nodes.push(Node::Leaf {
            leaf_value: 0.0,
            leaf_id: usize::MAX,
        });
        let split = if depth < self.max_depth && idx.len() >= 2 * self.min_leaf {
            self.best_split(idx)
        } else {
            None
        };
        match split {
            Some(c) => {
                let mid = partition(idx, |i| self.ds.row(i)[c.feature] <= c.threshold);
                let (l, r) = idx.split_at_mut(mid);
                let left = self.grow(l, depth + 1);
                let right = self.grow(r, depth + 1);
                self.nodes[node] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left,
                    right,
                };
            }
            None => {
                self.nodes[node] = Node::Leaf {
                    leaf_value: 0.0,
                    leaf_id: self.n_leaves,
                };
                self.n_leaves += 1;
            }
        }
        node
    }

    fn best_split(&mut self, idx: &[usize]) -> Option<Candidate> {
        let m = idx.len();
        let total: f64 = idx.iter().map(|&i| self.z[i]).sum();
        let sumsq: f64 = idx.iter().map(|&i| self.z[i] * self.z[i]).sum();
        let base = total * total / m as f64;
        let mut best: Option<Candidate> = None;

        for f in 0..self.ds.d() {
            self.scratch.clear();
            self.scratch
                .extend(idx.iter().map(|&i| (self.ds.row(i)[f], self.z[i])));
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            let vals = &self.scratch;
            if vals[0].0 == vals[m - 1].0 {
                continue;
            }
            match self.rule {
                SplitRule::GreedyVariance => {
                    let mut left_sum = 0.0;
                    for k in 1..m {
                        left_sum += vals[k - 1].1;
                        if k < self.min_leaf || m - k < self.min_leaf {
                            continue;
                        }
                        let (lo, hi) = (vals[k - 1].0, vals[k].0);
                        if lo == hi {
                            continue;
                        }
                        let right_sum = total - left_sum;
                        let gain = left_sum * left_sum / k as f64
                            + right_sum * right_sum / (m - k) as f64
                            - base;
                        if best.as_ref().is_none_or(|b| gain > b.gain) {
                            let mid = 0.5 * (lo + hi);
                            let threshold = if mid < hi { mid } else { lo };
                            best = Some(Candidate {
                                feature: f,
                                threshold,
                                gain,
                            });
                        }
                    }
                }
                SplitRule::Median => {
                    let median = if m % 2 == 1 {
                        vals[m / 2].0
                    } else {
                        0.5 * (vals[m / 2 - 1].0 + vals[m / 2].0)
                    };
                    let k = vals.partition_point(|v| v.0 <= median);
                    if k < self.min_leaf.max(1) || m - k < self.min_leaf.max(1) {
                        continue;
                    }
                    let left_sum: f64 = vals[..k].iter().map(|v| v.1).sum();
                    let right_sum = total - left_sum;
                    let gain = left_sum * left_sum / k as f64
                        + right_sum * right_sum / (m - k) as f64
                        - base;
                    if best.as_ref().is_none_or(|b| gain > b.gain) {
                        best = Some(Candidate {
                            feature: f,
                            threshold: median,
                            gain,
                        });
                    }
                }
            }
        }
        match self.rule {
            SplitRule::GreedyVariance => best.filter(|b| b.gain > GAIN_TOL * sumsq),
            SplitRule::Median => best,
        }
    }
}

/// Stable in-place partition; returns the number of elements satisfying `pred`.
fn partition(idx: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    let (mut yes, no): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| pred(i));
    let k = yes.len();
    yes.extend(no);
    idx.copy_from_slice(&yes);
    k
}

/// Grows a tree on `(x_i, residuals_i)` for `i` in `subsample`, then routes
/// every training row through it.
pub fn fit_tree(
    ds: &Dataset,
    residuals: &[f64],
    subsample: &[usize],
    params: &TreeParams,
) -> Result<RegressionTree> {
    params.validate()?;
    check_residuals(ds, residuals)?;
    if subsample.is_empty() {
        return Err(BratError::Data("empty subsample".into()));
    }
    let mask = mask_from_subsample(ds.n(), subsample)?;
    let min_leaf = params.min_leaf.resolve(ds.n(), ds.d());
    let mut idx: Vec<usize> = (0..ds.n()).filter(|&i| mask[i]).collect();
    if idx.len() < min_leaf {
        return Err(BratError::Data(format!(
            "subsample of {} rows is smaller than the minimum leaf size {min_leaf}",
            idx.len()
        )));
    }
    let mut grower = Grower {
        ds,
        z: residuals,
        rule: params.split_rule,
        max_depth: params.max_depth,
        min_leaf,
        nodes: Vec::new(),
        n_leaves: 0,
        scratch: Vec::with_capacity(idx.len()),
    };
    grower.grow(&mut idx, 0);
    let nodes = grower.nodes;
    let n_leaves = grower.n_leaves;
    let mut leaf_nodes = vec![0; n_leaves];
    for (i, node) in nodes.iter().enumerate() {
        if let Node::Leaf { leaf_id, .. } = *node {
            leaf_nodes[leaf_id] = i;
        }
    }
    let skeleton = RegressionTree {
        nodes,
        n_features: ds.d(),
        leaf_nodes,
        train_leaf_ids: Vec::new(),
        subsample_mask: Vec::new(),
        leaf_subsample_counts: Vec::new(),
    };
    Ok(skeleton.refit_on(ds, residuals, mask))
}

impl RegressionTree {
    /// Re-routes `ds`, installs `mask` and sets every leaf value to the mean
    /// residual of its subsampled members (0 for leaves with none).
    fn refit_on(mut self, ds: &Dataset, residuals: &[f64], mask: Vec<bool>) -> RegressionTree {
        let n_leaves = self.leaf_nodes.len();
        self.train_leaf_ids = ds.rows().map(|x| self.leaf_of(x) as u32).collect();
        let mut sums = vec![0.0; n_leaves];
        for (i, &l) in self.train_leaf_ids.iter().enumerate() {
            if mask[i] {
                sums[l as usize] += residuals[i];
            }
        }
        self.leaf_subsample_counts = subsample_counts(&self.train_leaf_ids, &mask, n_leaves);
        self.subsample_mask = mask;
        for leaf in 0..n_leaves {
            let c = self.leaf_subsample_counts[leaf];
            let v = if c > 0 { sums[leaf] / c as f64 } else { 0.0 };
            self.set_leaf_value(leaf, v);
        }
        self
    }

    fn set_leaf_value(&mut self, leaf: usize, v: f64) {
        if let Node::Leaf { leaf_value, .. } = &mut self.nodes[self.leaf_nodes[leaf]] {
            *leaf_value = v;
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_nodes.len()
    }

    pub fn train_n(&self) -> usize {
        self.train_leaf_ids.len()
    }

    pub fn train_leaf_ids(&self) -> &[u32] {
        &self.train_leaf_ids
    }

    pub fn subsample_mask(&self) -> &[bool] {
        &self.subsample_mask
    }

    pub fn leaf_subsample_counts(&self) -> &[u32] {
        &self.leaf_subsample_counts
    }

    pub fn leaf_value(&self, leaf: usize) -> f64 {
        match self.nodes[self.leaf_nodes[leaf]] {
            Node::Leaf { leaf_value, .. } => leaf_value,
            Node::Split { .. } => unreachable!("leaf_nodes points at a split"),
        }
    }

    pub fn leaf_values(&self) -> Vec<f64> {
        (0..self.n_leaves()).map(|l| self.leaf_value(l)).collect()
    }

    /// Depth of each leaf, indexed by leaf id.
    pub fn leaf_depths(&self) -> Vec<usize> {
        let mut depths = vec![0; self.n_leaves()];
        let mut stack = vec![(0usize, 0usize)];
        while let Some((node, depth)) = stack.pop() {
            match self.nodes[node] {
                Node::Split { left, right, .. } => {
                    stack.push((left, depth + 1));
                    stack.push((right, depth + 1));
                }
                Node::Leaf { leaf_id, .. } => depths[leaf_id] = depth,
            }
        }
        depths
    }

    /// Leaf id reached by `x`. `x` must have `n_features` entries.
    #[inline]
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut node = 0;
        loop {
            match self.nodes[node] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[feature] <= threshold { left } else { right },
                Node::Leaf { leaf_id, .. } => return leaf_id,
            }
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(BratError::Dimension {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.leaf_value(self.leaf_of(x)))
    }

    /// Predictions at the training rows, read off the stored leaf ids.
    pub fn training_predictions(&self) -> Vec<f64> {
        let values = self.leaf_values();
        self.train_leaf_ids
            .iter()
            .map(|&l| values[l as usize])
            .collect()
    }

    /// Sparse structure vector at `x`: weight `1 / c` on each subsampled
    /// training point sharing `x`'s leaf, where `c` is their number.
    /// Empty for a leaf that holds no subsampled points.
    pub fn structure_vector(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        self.check_dim(x)?;
        Ok(self.structure_vector_of_leaf(self.leaf_of(x)))
    }

    pub fn structure_vector_of_leaf(&self, leaf: usize) -> Vec<(usize, f64)> {
        let c = self.leaf_subsample_counts[leaf];
        if c == 0 {
            return Vec::new();
        }
        let w = 1.0 / c as f64;
        self.train_leaf_ids
            .iter()
            .zip(&self.subsample_mask)
            .enumerate()
            .filter(|(_, (&l, &m))| m && l as usize == leaf)
            .map(|(j, _)| (j, w))
            .collect()
    }

    /// Subsampled training indices of every leaf, indexed by leaf id.
    pub fn leaf_members(&self) -> Vec<Vec<u32>> {
        let mut members = vec![Vec::new(); self.n_leaves()];
        for (j, (&l, &m)) in self.train_leaf_ids.iter().zip(&self.subsample_mask).enumerate() {
            if m {
                members[l as usize].push(j as u32);
            }
        }
        members
    }

    /// Replaces leaf values by the mean of `targets` over the rows of `ds`
    /// routed to each leaf. Leaves that receive no row keep their value.
    pub fn refit_leaf_values(&self, ds: &Dataset, targets: &[f64]) -> Result<RegressionTree> {
        if ds.n() == 0 || targets.len() != ds.n() {
            return Err(BratError::Data("refit set must be nonempty and aligned".into()));
        }
        if ds.d() != self.n_features {
            return Err(BratError::Dimension {
                expected: self.n_features,
                got: ds.d(),
            });
        }
        let mut sums = vec![0.0; self.n_leaves()];
        let mut counts = vec![0usize; self.n_leaves()];
        for (x, &t) in ds.rows().zip(targets) {
            let l = self.leaf_of(x);
            sums[l] += t;
            counts[l] += 1;
        }
        let mut out = self.clone();
        for leaf in 0..self.n_leaves() {
            if counts[leaf] > 0 {
                out.set_leaf_value(leaf, sums[leaf] / counts[leaf] as f64);
            }
        }
        Ok(out)
    }

    /// Keeps the split structure and refits leaf values, subsample mask and
    /// counts from new residuals and a new subsample. Leaves left without
    /// subsampled members get value 0 and carry no structure weight.
    pub fn clone_structure_refit(
        &self,
        ds: &Dataset,
        residuals: &[f64],
        subsample: &[usize],
    ) -> Result<RegressionTree> {
        if ds.d() != self.n_features {
            return Err(BratError::Dimension {
                expected: self.n_features,
                got: ds.d(),
            });
        }
        check_residuals(ds, residuals)?;
        let mask = mask_from_subsample(ds.n(), subsample)?;
        Ok(self.clone().refit_on(ds, residuals, mask))
    }
}
