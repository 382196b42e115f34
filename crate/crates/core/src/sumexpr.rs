//! Sum-expressions: unevaluated sums of low-rank matrices and H-matrix
//! products restricted to one block of the product.
//!
//! `S(tau, sigma) = sum_j A_j B_j^T + sum_j H|_{tau x rho_j} K|_{rho_j x sigma}`
//!
//! Restricting to a child block only shifts indices of the low-rank part;
//! products are split over the children of `rho` and any sub-product with a
//! far-field factor is multiplied out into a low-rank term. Nothing is
//! truncated, so every expression represents its block of `H K` exactly.

use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};

use crate::cluster::{BlockClusterTree, BlockKind};
use crate::compress::LinearMap;
use crate::error::{HmError, Result};
use crate::hmatrix::{BlockData, HMatrix, OpCounter};
use crate::lowrank::LowRank;
use crate::scalar::Real;

/// Largest block `evaluate_dense` will materialize, per dimension.
pub const MAX_EVALUATE_DIM: usize = 6144;

/// A window `[row_off.., col_off..]` of a shared low-rank matrix.
#[derive(Debug, Clone)]
pub struct LowRankView<T: Real> {
    pub term: Arc<LowRank<T>>,
    pub row_off: usize,
    pub col_off: usize,
    pub nrows: usize,
    pub ncols: usize,
}

impl<T: Real> LowRankView<T> {
    pub fn whole(term: LowRank<T>) -> Self {
        let (nrows, ncols) = (term.nrows(), term.ncols());
        LowRankView {
            term: Arc::new(term),
            row_off: 0,
            col_off: 0,
            nrows,
            ncols,
        }
    }

    pub fn left(&self) -> DMatrixView<'_, T> {
        self.term.left.rows(self.row_off, self.nrows)
    }

    pub fn right(&self) -> DMatrixView<'_, T> {
        self.term.right.rows(self.col_off, self.ncols)
    }

    pub fn rank(&self) -> usize {
        self.term.rank()
    }

    pub fn to_owned(&self) -> LowRank<T> {
        LowRank {
            left: self.left().into_owned(),
            right: self.right().into_owned(),
        }
    }

    fn window(&self, rows: (usize, usize), cols: (usize, usize)) -> Self {
        LowRankView {
            term: self.term.clone(),
            row_off: self.row_off + rows.0,
            col_off: self.col_off + cols.0,
            nrows: rows.1,
            ncols: cols.1,
        }
    }
}

/// `S(tau, sigma)` for the block `block` of the common block-cluster tree.
#[derive(Debug, Clone)]
pub struct SumExpression<'a, T: Real> {
    pub h: &'a HMatrix<T>,
    pub k: &'a HMatrix<T>,
    pub block: usize,
    pub lowrank: Vec<LowRankView<T>>,
    /// Pairs of block ids `(tau x rho, rho x sigma)` into `h` and `k`.
    pub products: Vec<(usize, usize)>,
    counter: Option<&'a OpCounter>,
}

impl<'a, T: Real> SumExpression<'a, T> {
    /// `S_H(I, I) = H K` for two H-matrices on the same structure.
    pub fn root(h: &'a HMatrix<T>, k: &'a HMatrix<T>) -> Result<Self> {
        if !Arc::ptr_eq(&h.tree, &k.tree) && *h.tree != *k.tree {
            return Err(HmError::TreeMismatch);
        }
        Ok(SumExpression {
            h,
            k,
            block: BlockClusterTree::ROOT,
            lowrank: Vec::new(),
            products: vec![(BlockClusterTree::ROOT, BlockClusterTree::ROOT)],
            counter: None,
        })
    }

    /// Counts multiply-adds of every later restriction and application.
    pub fn with_counter(mut self, counter: &'a OpCounter) -> Self {
        self.counter = Some(counter);
        self
    }

    pub fn tree(&self) -> &'a BlockClusterTree {
        &self.h.tree
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tree().shape(self.block)
    }

    fn empty_at(&self, block: usize) -> Self {
        SumExpression {
            h: self.h,
            k: self.k,
            block,
            lowrank: Vec::new(),
            products: Vec::new(),
            counter: self.counter,
        }
    }

    /// `S(tau', sigma')` for a child `tau' x sigma'` of this block.
    pub fn restrict(&self, child: usize) -> Result<Self> {
        let tree = self.tree();
        if tree.block(child).parent != Some(self.block) {
            return Err(HmError::NotAChild {
                parent: self.block,
                block: child,
            });
        }
        let (rr, cr) = (tree.row_range(child), tree.col_range(child));
        let (r0, c0) = (tree.row_range(self.block).start, tree.col_range(self.block).start);
        let rows = (rr.start - r0, rr.len());
        let cols = (cr.start - c0, cr.len());
        let mut out = self.empty_at(child);
        out.lowrank = self.lowrank.iter().map(|v| v.window(rows, cols)).collect();

        let (tau, sigma) = (tree.block(child).row, tree.block(child).col);
        for &(bh, bk) in &self.products {
            let rho = tree.block(bh).col;
            let sons = tree.clusters.children(rho);
            if sons.is_empty() {
                // H|_{tau x rho} and K|_{rho x sigma} are dense leaves over a
                // leaf cluster rho: the child product has rank at most #rho.
                out.lowrank.push(LowRankView::whole(self.leaf_cluster_product(bh, bk, rows, cols)));
                continue;
            }
            for &rho_c in sons {
                let sub_h = tree.lookup(tau, rho_c).expect("level-conserving tree");
                let sub_k = tree.lookup(rho_c, sigma).expect("level-conserving tree");
                let far = |b: usize| tree.block(b).kind == BlockKind::FarLeaf;
                if far(sub_h) || far(sub_k) {
                    let lr = self.far_product(sub_h, sub_k);
                    if lr.rank() > 0 {
                        out.lowrank.push(LowRankView::whole(lr));
                    }
                } else {
                    out.products.push((sub_h, sub_k));
                }
            }
        }
        Ok(out)
    }

    fn count(&self, n: usize) {
        if let Some(c) = self.counter {
            c.add(n as u64);
        }
    }

    /// `H|_bh K|_bk` as a low-rank matrix when at least one factor is far.
    fn far_product(&self, bh: usize, bk: usize) -> LowRank<T> {
        match (&self.h.blocks[bh], &self.k.blocks[bk]) {
            (BlockData::Far(a), BlockData::Far(c)) => {
                // A (B^T C) D^T; push the coupling into the larger-rank side.
                let coupling = a.right.tr_mul(&c.left);
                self.count(a.ncols() * a.rank() * c.rank());
                if a.rank() <= c.rank() {
                    self.count(c.ncols() * c.rank() * a.rank());
                    LowRank {
                        left: a.left.clone(),
                        right: &c.right * coupling.transpose(),
                    }
                } else {
                    self.count(a.nrows() * a.rank() * c.rank());
                    LowRank {
                        left: &a.left * coupling,
                        right: c.right.clone(),
                    }
                }
            }
            (BlockData::Far(a), _) => {
                // A (K^T B)^T
                let (_, n) = self.tree().shape(bk);
                let mut right = DMatrix::zeros(n, a.rank());
                self.k
                    .block_mul_add_transpose(bk, &a.right.as_view(), &mut right.as_view_mut(), self.counter);
                LowRank {
                    left: a.left.clone(),
                    right,
                }
            }
            (_, BlockData::Far(c)) => {
                // (H C) D^T
                let (m, _) = self.tree().shape(bh);
                let mut left = DMatrix::zeros(m, c.rank());
                self.h
                    .block_mul_add(bh, &c.left.as_view(), &mut left.as_view_mut(), self.counter);
                LowRank {
                    left,
                    right: c.right.clone(),
                }
            }
            _ => unreachable!("far_product needs a far factor"),
        }
    }

    /// Exact rank-`#rho` form of the `rows x cols` window of
    /// `H|_bh K|_bk` where `rho` is a leaf cluster.
    fn leaf_cluster_product(&self, bh: usize, bk: usize, rows: (usize, usize), cols: (usize, usize)) -> LowRank<T> {
        let window = |data: &BlockData<T>, b: usize, r: (usize, usize), c: (usize, usize)| -> DMatrix<T> {
            match data {
                BlockData::Near(d) => d.view((r.0, c.0), (r.1, c.1)).into_owned(),
                BlockData::Far(lr) => {
                    let l = lr.left.rows(r.0, r.1);
                    let rt = lr.right.rows(c.0, c.1);
                    self.count(r.1 * c.1 * lr.rank());
                    l * rt.transpose()
                }
                BlockData::Inner => unreachable!("block {b} over a leaf cluster is a leaf"),
            }
        };
        let rho_len = self.tree().shape(bh).1;
        let left = window(&self.h.blocks[bh], bh, rows, (0, rho_len));
        let right = window(&self.k.blocks[bk], bk, (0, rho_len), cols).transpose();
        LowRank { left, right }
    }

    /// `Y += S X`, `X` with `#sigma` rows.
    pub fn mul_add(&self, x: &DMatrixView<'_, T>, y: &mut DMatrixViewMut<'_, T>) {
        let r = x.ncols();
        for v in &self.lowrank {
            if v.rank() == 0 {
                continue;
            }
            self.count((v.nrows + v.ncols) * v.rank() * r);
            let t = v.right().tr_mul(x);
            y.gemm(T::one(), &v.left(), &t, T::one());
        }
        for &(bh, bk) in &self.products {
            let rho = self.tree().shape(bh).1;
            let mut t = DMatrix::zeros(rho, r);
            self.k.block_mul_add(bk, x, &mut t.as_view_mut(), self.counter);
            self.h.block_mul_add(bh, &t.as_view(), y, self.counter);
        }
    }

    /// `Y += S^T X`, `X` with `#tau` rows.
    pub fn mul_add_transpose(&self, x: &DMatrixView<'_, T>, y: &mut DMatrixViewMut<'_, T>) {
        let r = x.ncols();
        for v in &self.lowrank {
            if v.rank() == 0 {
                continue;
            }
            self.count((v.nrows + v.ncols) * v.rank() * r);
            let t = v.left().tr_mul(x);
            y.gemm(T::one(), &v.right(), &t, T::one());
        }
        for &(bh, bk) in &self.products {
            let rho = self.tree().shape(bh).1;
            let mut t = DMatrix::zeros(rho, r);
            self.h.block_mul_add_transpose(bh, x, &mut t.as_view_mut(), self.counter);
            self.k.block_mul_add_transpose(bk, &t.as_view(), y, self.counter);
        }
    }

    /// The represented block as a dense matrix.
    pub fn evaluate_dense(&self) -> Result<DMatrix<T>> {
        let (m, n) = self.shape();
        if m > MAX_EVALUATE_DIM || n > MAX_EVALUATE_DIM {
            return Err(HmError::Capacity {
                what: "sum-expression evaluation",
                requested: m.max(n),
                limit: MAX_EVALUATE_DIM,
            });
        }
        Ok(LinearMap::apply_block(self, &DMatrix::identity(n, n)))
    }
}

impl<T: Real> LinearMap<T> for SumExpression<'_, T> {
    fn nrows(&self) -> usize {
        self.shape().0
    }
    fn ncols(&self) -> usize {
        self.shape().1
    }
    fn apply_block(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut y = DMatrix::zeros(self.nrows(), x.ncols());
        self.mul_add(&x.as_view(), &mut y.as_view_mut());
        y
    }
    fn apply_transpose_block(&self, y: &DMatrix<T>) -> DMatrix<T> {
        let mut x = DMatrix::zeros(self.ncols(), y.ncols());
        self.mul_add_transpose(&y.as_view(), &mut x.as_view_mut());
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::sparsity_constant;
    use crate::geometry::KernelKind;
    use crate::hmatrix::tests::kernel_setup;
    use crate::lowrank::tests::random_matrix;
    use crate::lowrank::TruncationPolicy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(level: u32, n_min: usize) -> (HMatrix<f64>, HMatrix<f64>) {
        let (h, _) = kernel_setup(level, n_min, KernelKind::Exponential, TruncationPolicy::EpsRank(1e-8));
        let (k0, _) = kernel_setup(level, n_min, KernelKind::SingleLayer, TruncationPolicy::FixedRank(6));
        // Same structure, built independently: rewire onto h's tree.
        let k = HMatrix {
            tree: h.tree.clone(),
            ..k0
        };
        (h, k)
    }

    fn sub(m: &DMatrix<f64>, tree: &BlockClusterTree, b: usize) -> DMatrix<f64> {
        let (rr, cr) = (tree.row_range(b), tree.col_range(b));
        m.view((rr.start, cr.start), (rr.len(), cr.len())).into_owned()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn root_is_the_product() {
        for (level, n_min) in [(1, 4), (2, 6)] {
            let (h, k) = pair(level, n_min);
            let s = SumExpression::root(&h, &k).unwrap();
            assert_eq!((s.lowrank.len(), s.products.len()), (0, 1));
            let exact = h.to_dense().unwrap() * k.to_dense().unwrap();
            assert!(rel(&s.evaluate_dense().unwrap(), &exact) <= 1e-12);
            let x = random_matrix(h.size(), 1, 3);
            let direct = h.matmul(&k.matmul(&x, None).unwrap(), None).unwrap();
            assert!(rel(&s.apply_block(&x), &direct) <= 1e-12);
        }
    }

    #[test]
    fn tree_mismatch_is_rejected() {
        let (h, _) = pair(2, 6);
        let (other, _) = kernel_setup(2, 12, KernelKind::Exponential, TruncationPolicy::EpsRank(1e-6));
        assert!(matches!(SumExpression::root(&h, &other), Err(HmError::TreeMismatch)));
    }

    /// Descends along random children; every level must match the dense product.
    #[test]
    fn restriction_is_exact_along_random_paths() {
        let (h, k) = pair(3, 16);
        let tree = h.tree.clone();
        let exact = h.to_dense().unwrap() * k.to_dense().unwrap();
        let csp = sparsity_constant(&tree);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        for _ in 0..20 {
            let mut s = SumExpression::root(&h, &k).unwrap();
            loop {
                let kids = tree.block(s.block).children.clone();
                if kids.is_empty() {
                    break;
                }
                for &c in &kids {
                    let r = s.restrict(c).unwrap();
                    let want = sub(&exact, &tree, c);
                    assert!(rel(&r.evaluate_dense().unwrap(), &want) <= 1e-12, "block {c}");
                    assert!(r.lowrank.len() <= csp * tree.block(c).level);
                    for &(bh, bk) in &r.products {
                        assert_ne!(tree.block(bh).kind, BlockKind::FarLeaf);
                        assert_ne!(tree.block(bk).kind, BlockKind::FarLeaf);
                    }
                    checked += 1;
                }
                let next = kids[rng.random_range(0..kids.len())];
                s = s.restrict(next).unwrap();
            }
        }
        assert!(checked > 40);
    }

    #[test]
    fn restrict_rejects_non_children() {
        let (h, k) = pair(2, 6);
        let s = SumExpression::root(&h, &k).unwrap();
        let grandchild = h.tree.block(h.tree.block(0).children[0]).children[0];
        assert!(matches!(s.restrict(grandchild), Err(HmError::NotAChild { .. })));
    }

    #[test]
    fn lowrank_part_is_shifted_without_arithmetic() {
        let (h, k) = pair(2, 6);
        let mut s = SumExpression::root(&h, &k).unwrap();
        s.products.clear();
        let lr = LowRank::new(random_matrix(96, 2, 1), random_matrix(96, 2, 2)).unwrap();
        let dense = lr.to_dense();
        s.lowrank.push(LowRankView::whole(lr));
        let counter = OpCounter::new();
        let s = s.with_counter(&counter);
        for &c in &h.tree.block(0).children {
            let r = s.restrict(c).unwrap();
            assert!(Arc::ptr_eq(&r.lowrank[0].term, &s.lowrank[0].term));
            assert_eq!(counter.get(), 0);
            assert!(rel(&r.lowrank[0].to_owned().to_dense(), &sub(&dense, &h.tree, c)) <= 1e-15);
        }
    }

    #[test]
    fn apply_and_transpose_agree_with_dense() {
        let (h, k) = pair(2, 6);
        let tree = h.tree.clone();
        let root = SumExpression::root(&h, &k).unwrap();
        let b = tree.block(0).children[1];
        let s = root.restrict(b).unwrap();
        let d = s.evaluate_dense().unwrap();
        let (m, n) = s.shape();
        for seed in 0..10 {
            let v = random_matrix(n, 1, seed);
            assert!(rel(&s.apply_block(&v), &(&d * &v)) <= 1e-12);
            let w = random_matrix(m, 1, seed + 50);
            let lhs = s.apply_block(&v).dot(&w);
            let rhs = v.dot(&s.apply_transpose_block(&w));
            assert!((lhs - rhs).abs() <= 1e-11 * lhs.abs());
        }
        assert_eq!(s.apply_block(&DMatrix::zeros(n, 1)).amax(), 0.0);
    }

    #[test]
    fn empty_and_single_term_evaluation() {
        let (h, k) = pair(1, 4);
        let mut s = SumExpression::root(&h, &k).unwrap();
        s.products.clear();
        assert_eq!(s.evaluate_dense().unwrap(), DMatrix::zeros(24, 24));
        let lr = LowRank::new(random_matrix(24, 1, 1), random_matrix(24, 1, 2)).unwrap();
        let want = lr.to_dense();
        s.lowrank.push(LowRankView::whole(lr));
        assert!(rel(&s.evaluate_dense().unwrap(), &want) <= 1e-15);
    }
}
