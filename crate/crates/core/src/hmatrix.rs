//! Hierarchical matrices on a block-cluster tree.
//!
//! All vectors are in tree order: position `t` belongs to panel
//! `clusters.permutation[t]`. Restricting to a block is then a contiguous
//! slice of rows and columns and costs nothing.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};
use rayon::prelude::*;

use crate::cluster::{
    build_block_cluster_tree, build_cluster_tree_from_points, BlockClusterTree, BlockKind, DEFAULT_ETA,
};
use crate::compress::{aca, LinearMap};
use crate::error::{HmError, Result};
use crate::geometry::{kernel_entry, KernelKind, PanelSet, MAX_DENSE_PANELS};
use crate::lowrank::{truncate_dense, LowRank, TruncationPolicy};
use crate::scalar::Real;

/// Counts multiply-adds. Shared between threads.
#[derive(Debug, Default)]
pub struct OpCounter(AtomicU64);

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

fn count(counter: Option<&OpCounter>, n: usize) {
    if let Some(c) = counter {
        c.add(n as u64);
    }
}

/// Payload of one block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockData<T: Real> {
    /// Subdivided; the children carry the data.
    Inner,
    Far(LowRank<T>),
    Near(DMatrix<T>),
}

#[derive(Debug, Clone)]
pub struct HMatrix<T: Real> {
    pub tree: Arc<BlockClusterTree>,
    /// Indexed like `tree.blocks`.
    pub blocks: Vec<BlockData<T>>,
    /// Far blocks whose compression did not converge; stored at full rank.
    pub degraded: Vec<usize>,
}

/// `y += op(A) x` for a block payload; `op` is the transpose when `trans`.
fn leaf_mul_add<T: Real>(
    data: &BlockData<T>,
    x: &DMatrixView<'_, T>,
    y: &mut DMatrixViewMut<'_, T>,
    trans: bool,
    counter: Option<&OpCounter>,
) {
    let r = x.ncols();
    match data {
        BlockData::Inner => unreachable!("leaf product on an inner block"),
        BlockData::Near(d) => {
            count(counter, d.nrows() * d.ncols() * r);
            if trans {
                y.gemm_tr(T::one(), d, x, T::one());
            } else {
                y.gemm(T::one(), d, x, T::one());
            }
        }
        BlockData::Far(lr) => {
            if lr.rank() == 0 {
                return;
            }
            count(counter, (lr.nrows() + lr.ncols()) * lr.rank() * r);
            let (inner, outer) = if trans {
                (&lr.left, &lr.right)
            } else {
                (&lr.right, &lr.left)
            };
            let t = inner.tr_mul(x);
            y.gemm(T::one(), outer, &t, T::one());
        }
    }
}

impl<T: Real> HMatrix<T> {
    pub fn size(&self) -> usize {
        self.tree.size()
    }

    pub fn block(&self, b: usize) -> &BlockData<T> {
        &self.blocks[b]
    }

    /// `y += H|_b x` where `x` has `#col(b)` rows and `y` has `#row(b)` rows.
    pub fn block_mul_add(
        &self,
        b: usize,
        x: &DMatrixView<'_, T>,
        y: &mut DMatrixViewMut<'_, T>,
        counter: Option<&OpCounter>,
    ) {
        self.block_mul_add_impl(b, x, y, false, counter);
    }

    /// `y += (H|_b)^T x` where `x` has `#row(b)` rows and `y` has `#col(b)` rows.
    pub fn block_mul_add_transpose(
        &self,
        b: usize,
        x: &DMatrixView<'_, T>,
        y: &mut DMatrixViewMut<'_, T>,
        counter: Option<&OpCounter>,
    ) {
        self.block_mul_add_impl(b, x, y, true, counter);
    }

    fn block_mul_add_impl(
        &self,
        b: usize,
        x: &DMatrixView<'_, T>,
        y: &mut DMatrixViewMut<'_, T>,
        trans: bool,
        counter: Option<&OpCounter>,
    ) {
        if self.tree.block(b).kind.is_leaf() {
            leaf_mul_add(&self.blocks[b], x, y, trans, counter);
            return;
        }
        let (r0, c0) = (self.tree.row_range(b).start, self.tree.col_range(b).start);
        for &child in &self.tree.block(b).children {
            let (rr, cr) = (self.tree.row_range(child), self.tree.col_range(child));
            let (mut xr, mut yr) = ((cr.start - c0, cr.len()), (rr.start - r0, rr.len()));
            if trans {
                std::mem::swap(&mut xr, &mut yr);
            }
            let xs = x.rows(xr.0, xr.1);
            let mut ys = y.rows_mut(yr.0, yr.1);
            self.block_mul_add_impl(child, &xs, &mut ys, trans, counter);
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.size() {
            return Err(HmError::DimensionMismatch {
                context: "H-matrix product",
                expected: self.size(),
                actual: len,
            });
        }
        Ok(())
    }

    /// `H X` for an `N x r` block `X`.
    pub fn matmul(&self, x: &DMatrix<T>, counter: Option<&OpCounter>) -> Result<DMatrix<T>> {
        self.check_len(x.nrows())?;
        let mut y = DMatrix::zeros(self.size(), x.ncols());
        self.block_mul_add(BlockClusterTree::ROOT, &x.as_view(), &mut y.as_view_mut(), counter);
        Ok(y)
    }

    /// `H^T X` for an `N x r` block `X`.
    pub fn matmul_transpose(&self, x: &DMatrix<T>, counter: Option<&OpCounter>) -> Result<DMatrix<T>> {
        self.check_len(x.nrows())?;
        let mut y = DMatrix::zeros(self.size(), x.ncols());
        self.block_mul_add_transpose(BlockClusterTree::ROOT, &x.as_view(), &mut y.as_view_mut(), counter);
        Ok(y)
    }

    pub fn matvec(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.matvec_counted(x, None)
    }

    pub fn matvec_counted(&self, x: &DVector<T>, counter: Option<&OpCounter>) -> Result<DVector<T>> {
        let x = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(DVector::from_column_slice(self.matmul(&x, counter)?.as_slice()))
    }

    pub fn matvec_transpose(&self, x: &DVector<T>) -> Result<DVector<T>> {
        let x = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(DVector::from_column_slice(self.matmul_transpose(&x, None)?.as_slice()))
    }

    /// Dense copy of the sub-block `b`.
    pub fn block_to_dense(&self, b: usize) -> DMatrix<T> {
        let (m, n) = self.tree.shape(b);
        let mut out = DMatrix::zeros(m, n);
        self.fill_dense(b, &mut out.as_view_mut());
        out
    }

    fn fill_dense(&self, b: usize, out: &mut DMatrixViewMut<'_, T>) {
        match &self.blocks[b] {
            BlockData::Near(d) => out.copy_from(d),
            BlockData::Far(lr) => out.copy_from(&lr.to_dense()),
            BlockData::Inner => {
                let (r0, c0) = (self.tree.row_range(b).start, self.tree.col_range(b).start);
                for &child in &self.tree.block(b).children {
                    let (rr, cr) = (self.tree.row_range(child), self.tree.col_range(child));
                    let mut sub = out.view_mut((rr.start - r0, cr.start - c0), (rr.len(), cr.len()));
                    self.fill_dense(child, &mut sub);
                }
            }
        }
    }

    /// Materializes the whole matrix in tree order.
    pub fn to_dense(&self) -> Result<DMatrix<T>> {
        if self.size() > MAX_DENSE_PANELS {
            return Err(HmError::Capacity {
                what: "dense H-matrix conversion",
                requested: self.size(),
                limit: MAX_DENSE_PANELS,
            });
        }
        Ok(self.block_to_dense(BlockClusterTree::ROOT))
    }

    pub fn frobenius_norm(&self) -> T {
        let mut sq = T::zero();
        for b in self.tree.leaves() {
            sq += match &self.blocks[b] {
                BlockData::Near(d) => d.norm_squared(),
                BlockData::Far(lr) => {
                    let f = lr.frobenius_norm();
                    f * f
                }
                BlockData::Inner => T::zero(),
            };
        }
        sq.sqrt()
    }

    pub fn max_far_rank(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(|d| match d {
                BlockData::Far(lr) => Some(lr.rank()),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Number of stored scalars.
    pub fn storage(&self) -> usize {
        self.blocks
            .iter()
            .map(|d| match d {
                BlockData::Inner => 0,
                BlockData::Near(m) => m.len(),
                BlockData::Far(lr) => lr.left.len() + lr.right.len(),
            })
            .sum()
    }

    /// Builds payloads leaf by leaf; `leaf` returns the data and whether it
    /// is degraded.
    pub fn from_leaves<F>(tree: Arc<BlockClusterTree>, leaf: F) -> Result<Self>
    where
        F: Fn(usize, BlockKind) -> Result<(BlockData<T>, bool)> + Sync,
    {
        let leaves: Vec<usize> = tree.leaves().collect();
        let filled: Vec<(usize, BlockData<T>, bool)> = leaves
            .par_iter()
            .map(|&b| leaf(b, tree.block(b).kind).map(|(d, flag)| (b, d, flag)))
            .collect::<Result<_>>()?;
        Self::from_parts(tree, filled)
    }

    /// Assembles from `(block, payload, degraded)` triples covering every leaf.
    pub fn from_parts(tree: Arc<BlockClusterTree>, parts: Vec<(usize, BlockData<T>, bool)>) -> Result<Self> {
        let leaf_count = tree.leaves().count();
        if parts.len() != leaf_count {
            return Err(HmError::DimensionMismatch {
                context: "leaf payloads",
                expected: leaf_count,
                actual: parts.len(),
            });
        }
        let mut blocks = vec![BlockData::Inner; tree.len()];
        let mut degraded = Vec::new();
        for (b, data, flag) in parts {
            let (m, n) = tree.shape(b);
            let ok = match (&data, tree.block(b).kind) {
                (BlockData::Near(d), BlockKind::NearLeaf) => d.shape() == (m, n),
                (BlockData::Far(lr), BlockKind::FarLeaf) => lr.nrows() == m && lr.ncols() == n,
                _ => false,
            };
            if !ok {
                return Err(HmError::InvalidArgument(format!(
                    "payload for block {b} does not match its {m}x{n} {} slot",
                    tree.block(b).kind.label()
                )));
            }
            if flag {
                degraded.push(b);
            }
            blocks[b] = data;
        }
        degraded.sort_unstable();
        Ok(HMatrix {
            tree,
            blocks,
            degraded,
        })
    }

    /// Near blocks copied, far blocks truncated under `policy`.
    pub fn from_dense(tree: Arc<BlockClusterTree>, dense: &DMatrix<T>, policy: TruncationPolicy) -> Result<Self> {
        policy.validate()?;
        let n = tree.size();
        if dense.shape() != (n, n) {
            return Err(HmError::DimensionMismatch {
                context: "dense source for H-matrix",
                expected: n,
                actual: dense.nrows(),
            });
        }
        let t = tree.clone();
        Self::from_leaves(tree, move |b, kind| {
            let (rr, cr) = (t.row_range(b), t.col_range(b));
            let sub = dense.view((rr.start, cr.start), (rr.len(), cr.len())).into_owned();
            Ok(match kind {
                BlockKind::FarLeaf => (BlockData::Far(truncate_dense(&sub, policy)), false),
                _ => (BlockData::Near(sub), false),
            })
        })
    }

    /// The identity on the given structure.
    pub fn identity(tree: Arc<BlockClusterTree>) -> Result<Self> {
        let t = tree.clone();
        Self::from_leaves(tree, move |b, kind| {
            let (m, n) = t.shape(b);
            Ok(match kind {
                BlockKind::FarLeaf => (BlockData::Far(LowRank::zeros(m, n)), false),
                _ => {
                    let same = t.row_range(b) == t.col_range(b);
                    let d = if same { DMatrix::identity(m, n) } else { DMatrix::zeros(m, n) };
                    (BlockData::Near(d), false)
                }
            })
        })
    }
}

impl<T: Real> HMatrix<T> {
    /// A square dense matrix wrapped as an H-matrix with one near block.
    pub fn single_block(dense: DMatrix<T>) -> Result<Self> {
        let n = dense.nrows();
        if dense.ncols() != n {
            return Err(HmError::DimensionMismatch {
                context: "single-block H-matrix",
                expected: n,
                actual: dense.ncols(),
            });
        }
        let points = vec![[0.0; 3]; n];
        let ct = Arc::new(build_cluster_tree_from_points(&points, n.max(1))?);
        let tree = Arc::new(build_block_cluster_tree(ct, DEFAULT_ETA)?);
        Self::from_parts(tree, vec![(BlockClusterTree::ROOT, BlockData::Near(dense), false)])
    }
}

/// Entry access to a kernel sub-block, rows and columns in tree order.
pub struct KernelBlock<'a> {
    pub kind: KernelKind,
    pub panels: &'a PanelSet,
    pub rows: &'a [usize],
    pub cols: &'a [usize],
}

impl KernelBlock<'_> {
    fn entry<T: Real>(&self, i: usize, j: usize) -> T {
        T::of(kernel_entry(self.kind, self.rows[i], self.cols[j], self.panels))
    }

    pub fn to_dense<T: Real>(&self) -> DMatrix<T> {
        DMatrix::from_fn(self.rows.len(), self.cols.len(), |i, j| self.entry(i, j))
    }
}

impl<T: Real> LinearMap<T> for KernelBlock<'_> {
    fn nrows(&self) -> usize {
        self.rows.len()
    }
    fn ncols(&self) -> usize {
        self.cols.len()
    }
    fn apply_block(&self, x: &DMatrix<T>) -> DMatrix<T> {
        self.to_dense::<T>() * x
    }
    fn apply_transpose_block(&self, y: &DMatrix<T>) -> DMatrix<T> {
        self.to_dense::<T>().tr_mul(y)
    }
    fn row(&self, i: usize) -> DVector<T> {
        DVector::from_fn(self.cols.len(), |j, _| self.entry(i, j))
    }
    fn column(&self, j: usize) -> DVector<T> {
        DVector::from_fn(self.rows.len(), |i, _| self.entry(i, j))
    }
}

/// Exact full-rank factorization of a dense block, used when compression
/// gives up.
fn full_rank<T: Real>(d: DMatrix<T>) -> LowRank<T> {
    let (m, n) = d.shape();
    if m <= n {
        LowRank {
            left: DMatrix::identity(m, m),
            right: d.transpose(),
        }
    } else {
        LowRank {
            left: d,
            right: DMatrix::identity(n, n),
        }
    }
}

/// Kernel matrix on `bct`: near blocks exact, far blocks by ACA under `policy`.
pub fn assemble_hmatrix<T: Real>(
    kind: KernelKind,
    panels: &PanelSet,
    bct: Arc<BlockClusterTree>,
    policy: TruncationPolicy,
) -> Result<HMatrix<T>> {
    policy.validate()?;
    if panels.len() != bct.size() {
        return Err(HmError::DimensionMismatch {
            context: "panels for block-cluster tree",
            expected: bct.size(),
            actual: panels.len(),
        });
    }
    let t = bct.clone();
    let perm = &t.clusters.permutation;
    let h = HMatrix::from_leaves(bct, |b, blk_kind| {
        let (rr, cr) = (t.row_range(b), t.col_range(b));
        let map = KernelBlock {
            kind,
            panels,
            rows: &perm[rr],
            cols: &perm[cr],
        };
        Ok(match blk_kind {
            BlockKind::FarLeaf => {
                let c = aca(&map, policy);
                if c.degraded {
                    log::warn!("ACA did not converge on block {b}; storing it at full rank");
                    (BlockData::Far(full_rank(map.to_dense())), true)
                } else {
                    (BlockData::Far(c.lowrank), false)
                }
            }
            _ => (BlockData::Near(map.to_dense()), false),
        })
    })?;
    Ok(h)
}
