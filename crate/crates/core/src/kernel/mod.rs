//! The empirical kernel induced by a tree ensemble.
//!
//! `k̂(x)` averages the structure vectors of all trees at `x`; `K̂` stacks
//! `k̂` over the training points. Both are rebuilt from the leaf ids and
//! subsample masks stored in the trees, so no training point is re-routed.

pub mod krr;
pub mod nystrom;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::boost::BratModel;
use crate::error::{BratError, Result};
use crate::tree::RegressionTree;

pub use krr::{krr_weights_d, krr_weights_p, KrrSolver, KrrSystem, KrrWeights};
pub use nystrom::{nystrom_build, LandmarkIndex, NystromSketch, SketchMethod};

/// Default largest training size for which a dense `K̂` is built.
pub const DEFAULT_DENSE_CAP: usize = 4000;

/// Read access to an `n × n` kernel matrix, dense or implicit.
pub trait KernelAccess: Sync {
    fn n(&self) -> usize;
    fn row(&self, i: usize) -> Vec<f64>;
    fn column(&self, j: usize) -> Vec<f64>;
    fn diag(&self) -> Vec<f64>;
}

impl KernelAccess for DMatrix<f64> {
    fn n(&self) -> usize {
        self.nrows()
    }
    fn row(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().copied().collect()
    }
    fn column(&self, j: usize) -> Vec<f64> {
        self.column(j).as_slice().to_vec()
    }
    fn diag(&self) -> Vec<f64> {
        self.diagonal().as_slice().to_vec()
    }
}

/// `(K + Kᵀ)/2` of an underlying kernel.
pub struct Symmetrized<'a, A: KernelAccess + ?Sized>(pub &'a A);

impl<A: KernelAccess + ?Sized> KernelAccess for Symmetrized<'_, A> {
    fn n(&self) -> usize {
        self.0.n()
    }
    fn row(&self, i: usize) -> Vec<f64> {
        self.column(i)
    }
    fn column(&self, j: usize) -> Vec<f64> {
        let mut c = self.0.column(j);
        for (a, b) in c.iter_mut().zip(self.0.row(j)) {
            *a = 0.5 * (*a + b);
        }
        c
    }
    fn diag(&self) -> Vec<f64> {
        self.0.diag()
    }
}

/// Leaf membership of one tree in compressed form.
struct LeafTable {
    /// Training points of each leaf, subsampled or not.
    all_offsets: Vec<usize>,
    all_members: Vec<u32>,
    /// Subsampled training points of each leaf.
    sub_offsets: Vec<usize>,
    sub_members: Vec<u32>,
    /// `1 / count` for each leaf, 0 for leaves without subsampled members.
    weight: Vec<f64>,
}

impl LeafTable {
    fn new(tree: &RegressionTree) -> Self {
        let leaves = tree.n_leaves();
        let ids = tree.train_leaf_ids();
        let mask = tree.subsample_mask();
        let group = |keep: &dyn Fn(usize) -> bool| {
            let mut offsets = vec![0usize; leaves + 1];
            for (i, &l) in ids.iter().enumerate() {
                if keep(i) {
                    offsets[l as usize + 1] += 1;
                }
            }
            for l in 0..leaves {
                offsets[l + 1] += offsets[l];
            }
            let mut fill = offsets.clone();
            let mut members = vec![0u32; offsets[leaves]];
            for (i, &l) in ids.iter().enumerate() {
                if keep(i) {
                    members[fill[l as usize]] = i as u32;
                    fill[l as usize] += 1;
                }
            }
            (offsets, members)
        };
        let (all_offsets, all_members) = group(&|_| true);
        let (sub_offsets, sub_members) = group(&|i| mask[i]);
        let weight = tree
            .leaf_subsample_counts()
            .iter()
            .map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 })
            .collect();
        LeafTable {
            all_offsets,
            all_members,
            sub_offsets,
            sub_members,
            weight,
        }
    }

    fn subsampled(&self, leaf: usize) -> &[u32] {
        &self.sub_members[self.sub_offsets[leaf]..self.sub_offsets[leaf + 1]]
    }

    fn all(&self, leaf: usize) -> &[u32] {
        &self.all_members[self.all_offsets[leaf]..self.all_offsets[leaf + 1]]
    }
}

/// Implicit `K̂` over a set of trees; entries are computed on demand.
pub struct TreeKernel<'a> {
    trees: &'a [RegressionTree],
    tables: Vec<LeafTable>,
    n: usize,
}

impl<'a> TreeKernel<'a> {
    pub fn new(trees: &'a [RegressionTree]) -> Result<Self> {
        let n = trees.first().map_or(0, |t| t.train_n());
        if n == 0 {
            return Err(BratError::Data("kernel needs at least one fitted tree".into()));
        }
        if trees.iter().any(|t| t.train_n() != n) {
            return Err(BratError::Data("trees disagree on the training size".into()));
        }
        let tables = trees.par_iter().map(LeafTable::new).collect();
        Ok(TreeKernel { trees, tables, n })
    }

    pub fn from_model(model: &'a BratModel) -> Result<Self> {
        Self::new(model.trees())
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn trees(&self) -> &'a [RegressionTree] {
        self.trees
    }

    fn accumulate(&self, out: &mut [f64], leaf_of: impl Fn(usize, &RegressionTree) -> usize) {
        let inv = 1.0 / self.trees.len() as f64;
        for (t, (tree, table)) in self.trees.iter().zip(&self.tables).enumerate() {
            let leaf = leaf_of(t, tree);
            let w = table.weight[leaf] * inv;
            for &j in table.subsampled(leaf) {
                out[j as usize] += w;
            }
        }
    }

    /// Dense `k̂(x)`, the average structure vector at `x`.
    pub fn k_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.trees[0].n_features();
        if x.len() != d {
            return Err(BratError::Dimension {
                expected: d,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.n];
        self.accumulate(&mut out, |_, tree| tree.leaf_of(x));
        Ok(out)
    }

    /// Nonzero entries of `k̂(x)` in index order.
    pub fn k_vec_sparse(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        Ok(self
            .k_vec(x)?
            .into_iter()
            .enumerate()
            .filter(|&(_, v)| v != 0.0)
            .collect())
    }

    /// Dense `K̂`, rows computed in parallel. Refuses `n > cap`.
    pub fn dense(&self, cap: usize) -> Result<DMatrix<f64>> {
        if self.n > cap {
            return Err(BratError::Data(format!(
                "a dense kernel for {} training points exceeds the cap of {cap}; use the sketched path",
                self.n
            )));
        }
        let rows: Vec<Vec<f64>> = (0..self.n).into_par_iter().map(|i| self.row(i)).collect();
        Ok(DMatrix::from_fn(self.n, self.n, |i, j| rows[i][j]))
    }
}

impl KernelAccess for TreeKernel<'_> {
    fn n(&self) -> usize {
        self.n
    }

    fn row(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.accumulate(&mut out, |_, tree| tree.train_leaf_ids()[i] as usize);
        out
    }

    fn column(&self, j: usize) -> Vec<f64> {
        let inv = 1.0 / self.trees.len() as f64;
        let mut out = vec![0.0; self.n];
        for (tree, table) in self.trees.iter().zip(&self.tables) {
            if !tree.subsample_mask()[j] {
                continue;
            }
            let leaf = tree.train_leaf_ids()[j] as usize;
            let w = table.weight[leaf] * inv;
            for &i in table.all(leaf) {
                out[i as usize] += w;
            }
        }
        out
    }

    fn diag(&self) -> Vec<f64> {
        let inv = 1.0 / self.trees.len() as f64;
        let mut out = vec![0.0; self.n];
        for (tree, table) in self.trees.iter().zip(&self.tables) {
            for (i, (&l, &m)) in tree.train_leaf_ids().iter().zip(tree.subsample_mask()).enumerate() {
                if m {
                    out[i] += table.weight[l as usize] * inv;
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelOptions {
    pub symmetrize: bool,
    pub dense_cap: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            symmetrize: false,
            dense_cap: DEFAULT_DENSE_CAP,
        }
    }
}

/// Dense `K̂` together with the KRR system of the model that produced it.
#[derive(Clone, Debug)]
pub struct KernelEstimate {
    khat: DMatrix<f64>,
    system: KrrSystem,
    symmetrized: bool,
}

impl KernelEstimate {
    pub fn khat(&self) -> &DMatrix<f64> {
        &self.khat
    }

    pub fn system(&self) -> KrrSystem {
        self.system
    }

    pub fn symmetrized(&self) -> bool {
        self.symmetrized
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.khat.row_iter().map(|r| r.sum()).collect()
    }

    pub fn solver(&self) -> Result<KrrSolver> {
        KrrSolver::new(&self.khat, self.system)
    }
}

pub fn estimate_k_matrix(model: &BratModel, opts: &KernelOptions) -> Result<KernelEstimate> {
    let tk = TreeKernel::from_model(model)?;
    let mut khat = tk.dense(opts.dense_cap)?;
    if opts.symmetrize {
        khat = (&khat + khat.transpose()) * 0.5;
    }
    Ok(KernelEstimate {
        khat,
        system: model.params().krr_system(),
        symmetrized: opts.symmetrize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boost::{train, Algo, BoostParams};
    use crate::data::{gen_friedman, Dataset};
    use crate::tree::{fit_tree, MinLeaf, SplitRule, TreeParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn depth1() -> TreeParams {
        TreeParams {
            max_depth: 1,
            min_leaf: MinLeaf::Fixed(1),
            split_rule: SplitRule::GreedyVariance,
        }
    }

    fn three_points() -> Dataset {
        Dataset::new(vec![0.1, 0.2, 0.9], 1, vec![0.0; 3]).unwrap()
    }

    #[test]
    fn average_of_two_structure_vectors() {
        let ds = three_points();
        // constant residuals: root-only tree on {0,1} -> (1/2, 1/2, 0)
        let a = fit_tree(&ds, &[1.0; 3], &[0, 1], &depth1()).unwrap();
        // point 0 isolated -> (1, 0, 0)
        let b = fit_tree(&ds, &[0.0, 1.0, 1.0], &[0, 1, 2], &depth1()).unwrap();
        let trees = [a, b];
        let tk = TreeKernel::new(&trees).unwrap();
        let k = tk.k_vec(&[0.1]).unwrap();
        assert_eq!(k, vec![0.75, 0.25, 0.0]);
        assert_eq!(tk.k_vec_sparse(&[0.1]).unwrap(), vec![(0, 0.75), (1, 0.25)]);
    }

    #[test]
    fn root_only_tree_gives_uniform_kernel() {
        let ds = three_points();
        let trees = [fit_tree(&ds, &[2.0; 3], &[0, 1, 2], &depth1()).unwrap()];
        let tk = TreeKernel::new(&trees).unwrap();
        let k = tk.dense(10).unwrap();
        assert!(k.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert!(tk.k_vec(&[0.5]).unwrap().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn isolated_points_give_identity() {
        let ds = Dataset::new(vec![0.1, 0.9], 1, vec![0.0, 1.0]).unwrap();
        let trees = [fit_tree(&ds, ds.response(), &[0, 1], &depth1()).unwrap()];
        let tk = TreeKernel::new(&trees).unwrap();
        assert_eq!(tk.dense(10).unwrap(), DMatrix::identity(2, 2));
        assert_eq!(tk.k_vec(&[0.95]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn pair_shared_in_one_of_two_trees() {
        let ds = three_points();
        // tree 1: {0,1} share a leaf with full subsample; tree 2: all isolated
        let t1 = fit_tree(&ds, &[0.0, 0.0, 1.0], &[0, 1, 2], &depth1()).unwrap();
        let deep = TreeParams {
            max_depth: 2,
            ..depth1()
        };
        let t2 = fit_tree(&ds, &[0.0, 1.0, 2.0], &[0, 1, 2], &deep).unwrap();
        let trees = [t1, t2];
        let k = TreeKernel::new(&trees).unwrap().dense(10).unwrap();
        assert_relative_eq!(k[(0, 1)], 0.5 * 0.5, epsilon = 1e-15);
        assert_relative_eq!(k[(0, 0)], 0.5 * 0.5 + 0.5, epsilon = 1e-15);
    }

    #[test]
    fn dense_cap_is_enforced() {
        let ds = three_points();
        let trees = [fit_tree(&ds, &[2.0; 3], &[0, 1, 2], &depth1()).unwrap()];
        let tk = TreeKernel::new(&trees).unwrap();
        assert!(tk.dense(2).is_err());
    }

    #[test]
    fn implicit_access_matches_dense() {
        let ds = gen_friedman(120, 1.0, 3).unwrap();
        let mut p = BoostParams::new(Algo::BratD);
        p.rounds = 25;
        let model = train(&ds, &p).unwrap();
        let tk = TreeKernel::from_model(&model).unwrap();
        let k = tk.dense(1000).unwrap();
        for j in [0, 17, 119] {
            let col = tk.column(j);
            let row = KernelAccess::row(&tk, j);
            for i in 0..ds.n() {
                assert_relative_eq!(col[i], k[(i, j)], epsilon = 1e-15);
                assert_relative_eq!(row[i], k[(j, i)], epsilon = 1e-15);
            }
            let kx = tk.k_vec(ds.row(j)).unwrap();
            assert_eq!(kx, row);
        }
        let diag = tk.diag();
        for i in 0..ds.n() {
            assert_relative_eq!(diag[i], k[(i, i)], epsilon = 1e-15);
        }
        let sym = Symmetrized(&tk);
        let ks = (&k + k.transpose()) * 0.5;
        for i in [0, 5] {
            let r = sym.row(i);
            for j in 0..ds.n() {
                assert_relative_eq!(r[j], ks[(i, j)], epsilon = 1e-15);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rows_are_stochastic(seed in 0u64..1000, xi in 0.3f64..1.0, parallel in any::<bool>()) {
            let ds = gen_friedman(60, 1.0, seed).unwrap();
            let algo = if parallel { Algo::BratP } else { Algo::BratD };
            let mut p = BoostParams::new(algo);
            p.rounds = 8;
            p.subsample_xi = xi;
            p.seed = seed;
            let model = train(&ds, &p).unwrap();
            let ke = estimate_k_matrix(&model, &KernelOptions::default()).unwrap();
            for s in ke.row_sums() {
                prop_assert!((s - 1.0).abs() < 1e-8);
            }
            prop_assert!(ke.khat().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let tk = TreeKernel::from_model(&model).unwrap();
            let kx = tk.k_vec(&[0.3, 0.2, 0.9, 0.5, 0.1]).unwrap();
            prop_assert!((kx.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
    }
}
