//! Nyström sketching of the KRR weights.
//!
//! With landmarks `L` (|L| = s), `C = K̂[:, L]`, `R = K̂[L, :]` and
//! `W = K̂[L, L]`, the kernel is approximated by `C W† R` and a query row
//! `k̂(x)ᵀ` by `k̃(x)ᵀ W† R`, where `k̃(x) = k̂(x)[L]`. Writing `P = W† R`,
//! the push-through identity gives
//!
//! ```text
//! r̃(x)ᵀ = scale · k̃ᵀ P (aI + cCP)⁻¹ = k̃ᵀ Λ̃ᵀ,   Λ̃ᵀ = scale · (aI_s + cPC)⁻¹ P
//! ```
//!
//! so `‖r̃(x)‖² = k̃ᵀ Σ̂ k̃` with `Σ̂ = Λ̃ᵀΛ̃` and `⟨r̃(x), y⟩ = ⟨k̃, α̃⟩` with
//! `α̃ = Λ̃ᵀ y`. Nothing of size `n × n` is formed. The row form is used
//! because `K̂` need not be symmetric.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BratError, Result};
use crate::kernel::{KernelAccess, KrrSystem, TreeKernel};
use crate::rng::rng_from_seed;
use crate::tree::RegressionTree;

/// Singular values below this fraction of the largest are dropped in `W†`.
const PINV_CUTOFF: f64 = 1e-10;
/// Quadratic forms more negative than this are a numerical failure.
const NEGATIVE_TOL: f64 = 1e-10;
/// Expected sample size per recursion level, as a multiple of `s`.
const OVERSAMPLE: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchMethod {
    #[default]
    Uniform,
    Recursive,
}

impl std::str::FromStr for SketchMethod {
    type Err = BratError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SketchMethod::Uniform),
            "recursive" => Ok(SketchMethod::Recursive),
            _ => Err(BratError::param("sketch.method", format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NystromSketch {
    landmarks: Vec<usize>,
    /// `Λ̃ᵀ`, s × n.
    lambda_t: DMatrix<f64>,
    sigma_hat: DMatrix<f64>,
    alpha_tilde: Option<DVector<f64>>,
    method: SketchMethod,
}

impl NystromSketch {
    pub fn landmarks(&self) -> &[usize] {
        &self.landmarks
    }

    pub fn s(&self) -> usize {
        self.landmarks.len()
    }

    pub fn method(&self) -> SketchMethod {
        self.method
    }

    /// `Λ̃`, n × s.
    pub fn lambda_tilde(&self) -> DMatrix<f64> {
        self.lambda_t.transpose()
    }

    pub fn sigma_hat(&self) -> &DMatrix<f64> {
        &self.sigma_hat
    }

    pub fn alpha_tilde(&self) -> Option<&DVector<f64>> {
        self.alpha_tilde.as_ref()
    }

    fn check_len(&self, ktilde: &[f64]) -> Result<()> {
        if ktilde.len() != self.s() {
            return Err(BratError::Dimension {
                expected: self.s(),
                got: ktilde.len(),
            });
        }
        Ok(())
    }

    /// Approximate weights `r̃(x) = Λ̃ k̃(x)`, length n.
    pub fn weights(&self, ktilde: &[f64]) -> Result<Vec<f64>> {
        self.check_len(ktilde)?;
        let k = DVector::from_column_slice(ktilde);
        Ok(self.lambda_t.tr_mul(&k).as_slice().to_vec())
    }

    /// `sqrt(k̃ᵀ Σ̂ k̃)` in O(s²).
    pub fn r_norm(&self, ktilde: &[f64]) -> Result<f64> {
        self.check_len(ktilde)?;
        let k = DVector::from_column_slice(ktilde);
        let q = k.dot(&(&self.sigma_hat * &k));
        if q < -NEGATIVE_TOL {
            return Err(BratError::Numerical(format!(
                "sketched quadratic form is negative ({q:.3e})"
            )));
        }
        Ok(q.max(0.0).sqrt())
    }

    /// `⟨k̃, α̃⟩` in O(s). Needs a sketch built with a response.
    pub fn predict(&self, ktilde: &[f64]) -> Result<f64> {
        self.check_len(ktilde)?;
        let alpha = self
            .alpha_tilde
            .as_ref()
            .ok_or_else(|| BratError::Data("sketch was built without a response".into()))?;
        Ok(ktilde.iter().zip(alpha.iter()).map(|(a, b)| a * b).sum())
    }
}

/// Chooses `s` landmarks. The recursive method samples by approximate
/// ridge leverage scores of the symmetrized kernel.
pub fn select_landmarks(
    kernel: &dyn KernelAccess,
    s: usize,
    method: SketchMethod,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = kernel.n();
    if s == 0 || s > n {
        return Err(BratError::param("sketch.s", format!("{s} is outside [1, {n}]")));
    }
    let mut rng = rng_from_seed(seed);
    let mut chosen = if s == n {
        (0..n).collect()
    } else {
        match method {
            SketchMethod::Uniform => rand::seq::index::sample(&mut rng, n, s).into_vec(),
            SketchMethod::Recursive => recursive_leverage(kernel, s, &mut rng)?,
        }
    };
    chosen.sort_unstable();
    Ok(chosen)
}

/// Ridge leverage scores of `idx` against a weighted sample:
/// `(K_ii − K_iS D (D K_SS D + μI)⁻¹ D K_Si) / μ`.
fn leverage(
    cols: &[Vec<f64>],
    diag: &[f64],
    idx: &[usize],
    sample: &[usize],
    weights: &[f64],
    mu: f64,
) -> Vec<f64> {
    let m = sample.len();
    let mut a = DMatrix::from_fn(m, m, |p, q| weights[p] * cols[q][sample[p]] * weights[q]);
    for p in 0..m {
        a[(p, p)] += mu;
    }
    let a = (&a + a.transpose()) * 0.5;
    let lu = a.lu();
    idx.par_iter()
        .map(|&i| {
            let b = DVector::from_fn(m, |p, _| weights[p] * cols[p][i]);
            let quad = lu.solve(&b).map_or(0.0, |v| b.dot(&v));
            ((diag[i] - quad) / mu).clamp(1e-12, 1.0)
        })
        .collect()
}

fn recursive_leverage(kernel: &dyn KernelAccess, s: usize, rng: &mut crate::rng::Rng) -> Result<Vec<usize>> {
    let n = kernel.n();
    let diag = kernel.diag();
    let trace: f64 = diag.iter().sum();
    if trace <= 0.0 {
        return Err(BratError::Numerical("kernel has zero trace".into()));
    }
    let mu = trace / s as f64;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);

    let mut sizes = vec![n];
    while *sizes.last().unwrap() > 2 * s {
        sizes.push(sizes.last().unwrap() / 2);
    }
    sizes.reverse();

    let sym = |j: usize| {
        let mut c = kernel.column(j);
        for (a, b) in c.iter_mut().zip(kernel.row(j)) {
            *a = 0.5 * (*a + b);
        }
        c
    };

    let mut sample: Vec<usize> = perm[..sizes[0]].to_vec();
    let mut weights = vec![1.0; sample.len()];
    for (level, &m) in sizes.iter().enumerate() {
        let idx = &perm[..m];
        let cols: Vec<Vec<f64>> = sample.par_iter().map(|&j| sym(j)).collect();
        let lev = leverage(&cols, &diag, idx, &sample, &weights, mu);
        if level + 1 == sizes.len() {
            // exactly s without replacement, proportional to leverage
            let mut keyed: Vec<(f64, usize)> = idx
                .iter()
                .zip(&lev)
                .map(|(&i, &l)| {
                    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    (u.ln() / l, i)
                })
                .collect();
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            return Ok(keyed[..s].iter().map(|&(_, i)| i).collect());
        }
        let total: f64 = lev.iter().sum();
        let mut next = Vec::new();
        let mut next_w = Vec::new();
        for (&i, &l) in idx.iter().zip(&lev) {
            let p = (OVERSAMPLE * s as f64 * l / total).min(1.0);
            if rng.random::<f64>() < p {
                next.push(i);
                next_w.push(1.0 / p.sqrt());
            }
        }
        if next.is_empty() {
            next.push(idx[0]);
            next_w.push(1.0);
        }
        sample = next;
        weights = next_w;
    }
    unreachable!("the last level always returns")
}

/// Builds the sketch factors for the given landmarks.
pub fn nystrom_from_landmarks(
    kernel: &dyn KernelAccess,
    system: KrrSystem,
    landmarks: Vec<usize>,
    y: Option<&[f64]>,
    method: SketchMethod,
) -> Result<NystromSketch> {
    let n = kernel.n();
    let s = landmarks.len();
    let mut uniq = landmarks.clone();
    uniq.sort_unstable();
    uniq.dedup();
    if s == 0 || uniq.len() != s || landmarks.iter().any(|&j| j >= n) {
        return Err(BratError::param("sketch.s", "landmarks must be s ≤ n distinct valid indices"));
    }
    if let Some(y) = y {
        if y.len() != n {
            return Err(BratError::Data(format!("response has {} entries for {n} points", y.len())));
        }
    }
    let cols: Vec<Vec<f64>> = landmarks.par_iter().map(|&j| kernel.column(j)).collect();
    let rows: Vec<Vec<f64>> = landmarks.par_iter().map(|&j| kernel.row(j)).collect();
    let c = DMatrix::from_fn(n, s, |i, p| cols[p][i]);
    let r = DMatrix::from_fn(s, n, |p, i| rows[p][i]);
    let w = DMatrix::from_fn(s, s, |p, q| rows[p][landmarks[q]]);

    let p = if s == n {
        // every point is a landmark, so k̃(x) already is k̂(x) up to order;
        // W†R would project it onto the row space of a possibly singular K̂
        let mut p = DMatrix::zeros(s, n);
        for (q, &j) in landmarks.iter().enumerate() {
            p[(q, j)] = 1.0;
        }
        p
    } else {
        let svd = w.svd(true, true);
        let smax = svd.singular_values.max();
        if !(smax > 0.0) {
            return Err(BratError::Numerical("landmark block of the kernel is all zero".into()));
        }
        let w_pinv = svd
            .pseudo_inverse(PINV_CUTOFF * smax)
            .map_err(|e| BratError::Numerical(e.to_string()))?;
        &w_pinv * &r
    };
    let g = &p * &c;
    let z = g * system.c + DMatrix::identity(s, s) * system.a;
    let lu = z.clone().lu();
    let mut lambda_t = lu.solve(&p).ok_or_else(|| {
        BratError::Numerical("sketched system aI + cPC is singular".into())
    })?;
    lambda_t *= system.scale;
    let sigma = &lambda_t * lambda_t.transpose();
    let sigma_hat = (&sigma + sigma.transpose()) * 0.5;
    let alpha_tilde = y.map(|y| &lambda_t * DVector::from_column_slice(y));
    Ok(NystromSketch {
        landmarks,
        lambda_t,
        sigma_hat,
        alpha_tilde,
        method,
    })
}

/// Selects `s` landmarks and builds the sketch.
pub fn nystrom_build(
    kernel: &dyn KernelAccess,
    system: KrrSystem,
    s: usize,
    method: SketchMethod,
    y: Option<&[f64]>,
    seed: u64,
) -> Result<NystromSketch> {
    let landmarks = select_landmarks(kernel, s, method, seed)?;
    nystrom_from_landmarks(kernel, system, landmarks, y, method)
}

/// `C W† R` as a dense matrix, for inspection on small problems.
pub fn nystrom_approximation(kernel: &dyn KernelAccess, landmarks: &[usize]) -> Result<DMatrix<f64>> {
    let n = kernel.n();
    let s = landmarks.len();
    let c = DMatrix::from_fn(n, s, |i, p| kernel.column(landmarks[p])[i]);
    let r = DMatrix::from_fn(s, n, |p, i| kernel.row(landmarks[p])[i]);
    let w = DMatrix::from_fn(s, s, |p, q| r[(p, landmarks[q])]);
    let svd = w.svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return Err(BratError::Numerical("landmark block of the kernel is all zero".into()));
    }
    let w_pinv = svd
        .pseudo_inverse(PINV_CUTOFF * smax)
        .map_err(|e| BratError::Numerical(e.to_string()))?;
    Ok(c * w_pinv * r)
}

/// Per-tree lookup of landmarks by leaf, giving `k̃(x)` without touching
/// the other `n − s` training points.
pub struct LandmarkIndex<'a> {
    trees: &'a [RegressionTree],
    /// For each tree, landmark positions and weights grouped by leaf.
    offsets: Vec<Vec<usize>>,
    entries: Vec<Vec<(u32, f64)>>,
    s: usize,
}

impl<'a> LandmarkIndex<'a> {
    pub fn new(kernel: &TreeKernel<'a>, landmarks: &[usize]) -> Self {
        let inv = 1.0 / kernel.n_trees() as f64;
        let (offsets, entries) = kernel
            .trees()
            .iter()
            .map(|tree| {
                let leaves = tree.n_leaves();
                let counts = tree.leaf_subsample_counts();
                let mut by_leaf: Vec<Vec<(u32, f64)>> = vec![Vec::new(); leaves];
                for (p, &j) in landmarks.iter().enumerate() {
                    if tree.subsample_mask()[j] {
                        let l = tree.train_leaf_ids()[j] as usize;
                        by_leaf[l].push((p as u32, inv / counts[l] as f64));
                    }
                }
                let mut offsets = Vec::with_capacity(leaves + 1);
                offsets.push(0);
                let mut flat = Vec::new();
                for group in by_leaf {
                    flat.extend(group);
                    offsets.push(flat.len());
                }
                (offsets, flat)
            })
            .unzip();
        LandmarkIndex {
            trees: kernel.trees(),
            offsets,
            entries,
            s: landmarks.len(),
        }
    }

    /// `k̂(x)` restricted to the landmarks.
    pub fn coords(&self, x: &[f64]) -> Result<Vec<f64>> {
        let trees = self.trees;
        let d = trees[0].n_features();
        if x.len() != d {
            return Err(BratError::Dimension {
                expected: d,
                got: x.len(),
            });
        }
        let mut out = vec![0.0; self.s];
        for (t, tree) in trees.iter().enumerate() {
            let leaf = tree.leaf_of(x);
            let off = &self.offsets[t];
            for &(p, w) in &self.entries[t][off[leaf]..off[leaf + 1]] {
                out[p as usize] += w;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boost::{train, Algo, BoostParams};
    use crate::data::gen_friedman;
    use crate::kernel::KrrSolver;
    use approx::assert_relative_eq;

    fn sketch_for(k: &DMatrix<f64>, landmarks: Vec<usize>) -> NystromSketch {
        nystrom_from_landmarks(k, KrrSystem::dropout(0.8, 0.5), landmarks, None, SketchMethod::Uniform).unwrap()
    }

    #[test]
    fn full_sketch_of_spd_kernel_is_exact() {
        let a = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 / 10.0);
        let k = &a * a.transpose() / 5.0 + DMatrix::identity(5, 5) * 0.1;
        let approx = nystrom_approximation(&k, &[0, 1, 2, 3, 4]).unwrap();
        assert_relative_eq!(approx, k, epsilon = 1e-10);
    }

    #[test]
    fn rank_one_with_one_landmark_is_exact() {
        let v = DVector::from_column_slice(&[0.5, 0.2, 0.0, 0.9]);
        let k = &v * v.transpose();
        let approx = nystrom_approximation(&k, &[3]).unwrap();
        assert_relative_eq!(approx, k, epsilon = 1e-14);
    }

    #[test]
    fn identity_keeps_sampled_diagonal() {
        let k = DMatrix::<f64>::identity(5, 5);
        let approx = nystrom_approximation(&k, &[1, 3]).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j && (i == 1 || i == 3) { 1.0 } else { 0.0 };
                assert_eq!(approx[(i, j)], expect);
            }
        }
    }

    #[test]
    fn zero_landmark_block_is_an_error() {
        let k = DMatrix::<f64>::zeros(3, 3);
        let r = nystrom_from_landmarks(&k, KrrSystem::parallel(2), vec![0], None, SketchMethod::Uniform);
        assert!(matches!(r, Err(BratError::Numerical(_))));
    }

    #[test]
    fn s_larger_than_n_is_rejected() {
        let k = DMatrix::<f64>::identity(3, 3);
        assert!(select_landmarks(&k, 4, SketchMethod::Uniform, 0).is_err());
        assert!(select_landmarks(&k, 0, SketchMethod::Uniform, 0).is_err());
    }

    #[test]
    fn norm_and_prediction_examples() {
        let k = DMatrix::<f64>::identity(2, 2);
        let mut sk = sketch_for(&k, vec![0, 1]);
        assert_eq!(sk.r_norm(&[0.0, 0.0]).unwrap(), 0.0);
        sk.sigma_hat = DMatrix::identity(2, 2);
        assert_relative_eq!(sk.r_norm(&[3.0, 4.0]).unwrap(), 5.0, epsilon = 1e-15);
        sk.alpha_tilde = Some(DVector::from_column_slice(&[0.7, -1.0]));
        assert_relative_eq!(sk.predict(&[1.0, 0.0]).unwrap(), 0.7);
        sk.alpha_tilde = Some(DVector::zeros(2));
        assert_eq!(sk.predict(&[0.3, 0.4]).unwrap(), 0.0);
        assert!(sk.predict(&[1.0]).is_err());
        sk.sigma_hat = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(sk.r_norm(&[1.0, 0.0]), Err(BratError::Numerical(_))));
    }

    #[test]
    fn sigma_hat_is_symmetric_psd() {
        let ds = gen_friedman(150, 1.0, 2).unwrap();
        let mut p = BoostParams::new(Algo::BratD);
        p.rounds = 40;
        let model = train(&ds, &p).unwrap();
        let tk = TreeKernel::from_model(&model).unwrap();
        for method in [SketchMethod::Uniform, SketchMethod::Recursive] {
            let sk = nystrom_build(&tk, p.krr_system(), 30, method, Some(ds.response()), 4).unwrap();
            let sig = sk.sigma_hat();
            assert_relative_eq!(sig.clone(), sig.transpose(), epsilon = 1e-12);
            let min_ev = sig.clone().symmetric_eigenvalues().min();
            assert!(min_ev >= -1e-8 * sig.norm().max(1.0));
            assert_eq!(sk.s(), 30);
            let mut l = sk.landmarks().to_vec();
            l.dedup();
            assert_eq!(l.len(), 30);
        }
    }

    #[test]
    fn full_sketch_matches_exact_weights() {
        let ds = gen_friedman(120, 1.0, 5).unwrap();
        for algo in [Algo::BratD, Algo::BratP] {
            let mut p = BoostParams::new(algo);
            p.rounds = 60;
            let model = train(&ds, &p).unwrap();
            let tk = TreeKernel::from_model(&model).unwrap();
            let k = tk.dense(1000).unwrap();
            let solver = KrrSolver::new(&k, p.krr_system()).unwrap();
            let all: Vec<usize> = (0..ds.n()).collect();
            let sk = nystrom_from_landmarks(&tk, p.krr_system(), all.clone(), Some(ds.response()), SketchMethod::Uniform)
                .unwrap();
            let index = LandmarkIndex::new(&tk, &all);
            for x in [[0.1, 0.5, 0.3, 0.9, 0.2], [0.7, 0.7, 0.1, 0.4, 0.8]] {
                let kx = tk.k_vec(&x).unwrap();
                let coords = index.coords(&x).unwrap();
                for (a, b) in kx.iter().zip(&coords) {
                    assert_relative_eq!(*a, *b, epsilon = 1e-15);
                }
                let exact = solver.weights(&kx).unwrap();
                let norm = sk.r_norm(&coords).unwrap();
                assert_relative_eq!(norm, exact.norm2, max_relative = 1e-8);
                let pred = sk.predict(&coords).unwrap();
                assert_relative_eq!(pred, exact.dot(ds.response()), max_relative = 1e-8);
            }
        }
    }
}
