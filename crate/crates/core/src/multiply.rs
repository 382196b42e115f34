//! H-matrix products.
//!
//! Both modes walk the block-cluster tree of the result with a
//! sum-expression per block. The new multiplication compresses the whole
//! expression of a far-field leaf at once; the traditional one converts
//! every product term to low rank on its own and merges the pieces with
//! fast truncation, which costs extra truncation error.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::cluster::BlockKind;
use crate::compress::{compress, CompressorKind, CountingMap};
use crate::error::{HmError, Result};
use crate::hmatrix::{BlockData, HMatrix, OpCounter};
use crate::lowrank::{fast_truncate_sum, thin_qr, truncate, truncate_dense, LowRank, TruncationPolicy};
use crate::scalar::Real;
use crate::sumexpr::{LowRankView, SumExpression};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiplyMode {
    New,
    Traditional,
}

/// How the traditional mode turns one product term into a low-rank matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Converter {
    /// Leaves first, then agglomeration up the block hierarchy.
    HierApprox,
    /// A compressor applied to the product as a linear map.
    Compress(CompressorKind),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiplyConfig {
    pub mode: MultiplyMode,
    pub compressor: CompressorKind,
    pub policy: TruncationPolicy,
    /// Only used by the traditional mode.
    pub converter: Converter,
}

impl MultiplyConfig {
    pub fn new(compressor: CompressorKind, policy: TruncationPolicy) -> Self {
        MultiplyConfig {
            mode: MultiplyMode::New,
            compressor,
            policy,
            converter: Converter::HierApprox,
        }
    }

    pub fn traditional(converter: Converter, policy: TruncationPolicy) -> Self {
        let compressor = match converter {
            Converter::Compress(kind) => kind,
            Converter::HierApprox => CompressorKind::DenseSvd,
        };
        MultiplyConfig {
            mode: MultiplyMode::Traditional,
            compressor,
            policy,
            converter,
        }
    }
}

/// What happened during one multiplication.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MultiplyReport {
    /// Far leaves whose compressor stopped without meeting its tolerance.
    pub degraded_blocks: Vec<usize>,
    pub max_far_rank: usize,
    /// Operator applications made by compressors.
    pub matvecs: u64,
    /// Multiply-adds spent in restrictions, applications and evaluations.
    pub ops: u64,
}

#[derive(Default)]
struct Tally {
    degraded: Mutex<Vec<usize>>,
    max_rank: AtomicUsize,
    matvecs: AtomicU64,
    ops: OpCounter,
}

#[derive(Debug, Clone)]
pub struct Product<T: Real> {
    pub matrix: HMatrix<T>,
    pub report: MultiplyReport,
}

/// `L ~ H K` on the common block structure of `H` and `K`.
pub fn multiply<T: Real>(h: &HMatrix<T>, k: &HMatrix<T>, cfg: &MultiplyConfig) -> Result<Product<T>> {
    cfg.policy.validate()?;
    let tally = Tally::default();
    let root = SumExpression::root(h, k)?.with_counter(&tally.ops);
    let parts = visit(&root, cfg, &tally)?;
    let mut report = MultiplyReport {
        degraded_blocks: tally.degraded.into_inner().expect("no poisoned lock"),
        max_far_rank: tally.max_rank.load(Ordering::Relaxed),
        matvecs: tally.matvecs.load(Ordering::Relaxed),
        ops: tally.ops.get(),
    };
    report.degraded_blocks.sort_unstable();
    for &b in &report.degraded_blocks {
        log::warn!("compression of product block {b} stopped before reaching its tolerance");
    }
    let matrix = HMatrix::from_parts(h.tree.clone(), parts)?;
    Ok(Product { matrix, report })
}

/// The new multiplication; `cfg.mode` is ignored.
pub fn hmult_new<T: Real>(h: &HMatrix<T>, k: &HMatrix<T>, cfg: &MultiplyConfig) -> Result<Product<T>> {
    multiply(h, k, &MultiplyConfig { mode: MultiplyMode::New, ..*cfg })
}

/// The traditional multiplication; `cfg.mode` is ignored.
pub fn hmult_traditional<T: Real>(h: &HMatrix<T>, k: &HMatrix<T>, cfg: &MultiplyConfig) -> Result<Product<T>> {
    multiply(h, k, &MultiplyConfig { mode: MultiplyMode::Traditional, ..*cfg })
}

type Parts<T> = Vec<(usize, BlockData<T>, bool)>;

fn visit<T: Real>(s: &SumExpression<'_, T>, cfg: &MultiplyConfig, tally: &Tally) -> Result<Parts<T>> {
    let tree = s.tree();
    let b = s.block;
    match tree.block(b).kind {
        BlockKind::Inner => {
            let nested: Vec<Parts<T>> = tree
                .block(b)
                .children
                .par_iter()
                .map(|&c| s.restrict(c).and_then(|child| visit(&child, cfg, tally)))
                .collect::<Result<_>>()?;
            Ok(nested.into_iter().flatten().collect())
        }
        BlockKind::NearLeaf => Ok(vec![(b, BlockData::Near(s.evaluate_dense()?), false)]),
        BlockKind::FarLeaf => {
            let (lr, degraded) = match cfg.mode {
                MultiplyMode::New => {
                    let counted = CountingMap::new(s);
                    let c = compress(&counted, cfg.compressor, cfg.policy, b as u64)?;
                    tally.matvecs.fetch_add(counted.total() as u64, Ordering::Relaxed);
                    (c.lowrank, c.degraded)
                }
                MultiplyMode::Traditional => traditional_leaf(s, cfg, tally)?,
            };
            if degraded {
                tally.degraded.lock().expect("no poisoned lock").push(b);
            }
            tally.max_rank.fetch_max(lr.rank(), Ordering::Relaxed);
            Ok(vec![(b, BlockData::Far(lr), degraded)])
        }
    }
}

fn traditional_leaf<T: Real>(
    s: &SumExpression<'_, T>,
    cfg: &MultiplyConfig,
    tally: &Tally,
) -> Result<(LowRank<T>, bool)> {
    let (m, n) = s.shape();
    let mut terms: Vec<LowRank<T>> = s.lowrank.iter().map(LowRankView::to_owned).collect();
    let mut degraded = false;
    for &(bh, bk) in &s.products {
        let term = match cfg.converter {
            Converter::HierApprox => hier_product(s.h, bh, s.k, bk, cfg.policy, &tally.ops)?,
            Converter::Compress(kind) => {
                let mut single = s.clone();
                single.lowrank.clear();
                single.products = vec![(bh, bk)];
                let counted = CountingMap::new(&single);
                let c = compress(&counted, kind, cfg.policy, s.block as u64)?;
                tally.matvecs.fetch_add(counted.total() as u64, Ordering::Relaxed);
                degraded |= c.degraded;
                c.lowrank
            }
        };
        terms.push(term);
    }
    terms.retain(|t| t.rank() > 0);
    if terms.is_empty() {
        return Ok((LowRank::zeros(m, n), degraded));
    }
    Ok((fast_truncate_sum(&terms, cfg.policy)?, degraded))
}

/// Exact low-rank form of `H|_bh K|_bk` when one factor is a near leaf and
/// neither is far.
fn near_product<T: Real>(h: &HMatrix<T>, bh: usize, k: &HMatrix<T>, bk: usize, ops: &OpCounter) -> LowRank<T> {
    let (tau, rho) = h.tree.shape(bh);
    let sigma = k.tree.shape(bk).1;
    match (&h.blocks[bh], &k.blocks[bk]) {
        (BlockData::Near(hd), BlockData::Near(kd)) => {
            if rho <= tau.min(sigma) {
                return LowRank {
                    left: hd.clone(),
                    right: kd.transpose(),
                };
            }
            ops.add((tau * rho * sigma) as u64);
            let p = hd * kd;
            if tau <= sigma {
                LowRank {
                    left: DMatrix::identity(tau, tau),
                    right: p.transpose(),
                }
            } else {
                LowRank {
                    left: p,
                    right: DMatrix::identity(sigma, sigma),
                }
            }
        }
        (BlockData::Near(hd), _) => {
            // I (K^T H_d^T)^T, rank #tau
            let mut right = DMatrix::zeros(sigma, tau);
            let hdt = hd.transpose();
            k.block_mul_add_transpose(bk, &hdt.as_view(), &mut right.as_view_mut(), Some(ops));
            LowRank {
                left: DMatrix::identity(tau, tau),
                right,
            }
        }
        (_, BlockData::Near(kd)) => {
            // (H K_d) I, rank #sigma
            let mut left = DMatrix::zeros(tau, sigma);
            h.block_mul_add(bh, &kd.as_view(), &mut left.as_view_mut(), Some(ops));
            LowRank {
                left,
                right: DMatrix::identity(sigma, sigma),
            }
        }
        _ => unreachable!("near_product needs a near factor"),
    }
}

fn far_product<T: Real>(h: &HMatrix<T>, bh: usize, k: &HMatrix<T>, bk: usize, ops: &OpCounter) -> LowRank<T> {
    let (tau, _) = h.tree.shape(bh);
    let (_, sigma) = k.tree.shape(bk);
    match (&h.blocks[bh], &k.blocks[bk]) {
        (BlockData::Far(a), BlockData::Far(c)) => {
            ops.add((a.ncols() * a.rank() * c.rank()) as u64);
            let coupling = a.right.tr_mul(&c.left);
            LowRank {
                left: &a.left * coupling,
                right: c.right.clone(),
            }
        }
        (BlockData::Far(a), _) => {
            let mut right = DMatrix::zeros(sigma, a.rank());
            k.block_mul_add_transpose(bk, &a.right.as_view(), &mut right.as_view_mut(), Some(ops));
            LowRank {
                left: a.left.clone(),
                right,
            }
        }
        (_, BlockData::Far(c)) => {
            let mut left = DMatrix::zeros(tau, c.rank());
            h.block_mul_add(bh, &c.left.as_view(), &mut left.as_view_mut(), Some(ops));
            LowRank {
                left,
                right: c.right.clone(),
            }
        }
        _ => unreachable!("far_product needs a far factor"),
    }
}

/// Hierarchical approximation of the product `H|_bh K|_bk`: sub-products
/// are converted at the leaves, truncated, summed per child block with fast
/// truncation and agglomerated into the parent.
fn hier_product<T: Real>(
    h: &HMatrix<T>,
    bh: usize,
    k: &HMatrix<T>,
    bk: usize,
    policy: TruncationPolicy,
    ops: &OpCounter,
) -> Result<LowRank<T>> {
    let tree = &h.tree;
    let (kh, kk) = (tree.block(bh).kind, tree.block(bk).kind);
    if kh == BlockKind::FarLeaf || kk == BlockKind::FarLeaf {
        return Ok(truncate(&far_product(h, bh, k, bk, ops), policy));
    }
    if kh == BlockKind::NearLeaf || kk == BlockKind::NearLeaf {
        return Ok(truncate(&near_product(h, bh, k, bk, ops), policy));
    }
    let (tau, rho, sigma) = (tree.block(bh).row, tree.block(bh).col, tree.block(bk).col);
    let (m, n) = (tree.clusters.nodes[tau].size(), tree.clusters.nodes[sigma].size());
    let (r0, c0) = (tree.clusters.nodes[tau].start, tree.clusters.nodes[sigma].start);
    let mut pieces = Vec::new();
    for &tc in tree.clusters.children(tau) {
        for &sc in tree.clusters.children(sigma) {
            let mut sub = Vec::new();
            for &rc in tree.clusters.children(rho) {
                let sh = tree.lookup(tc, rc).expect("level-conserving tree");
                let sk = tree.lookup(rc, sc).expect("level-conserving tree");
                let t = hier_product(h, sh, k, sk, policy, ops)?;
                if t.rank() > 0 {
                    sub.push(t);
                }
            }
            if sub.is_empty() {
                continue;
            }
            let lr = fast_truncate_sum(&sub, policy)?;
            let (tn, sn) = (&tree.clusters.nodes[tc], &tree.clusters.nodes[sc]);
            pieces.push(lr.pad(m, n, tn.start - r0, sn.start - c0));
        }
    }
    if pieces.is_empty() {
        return Ok(LowRank::zeros(m, n));
    }
    fast_truncate_sum(&pieces, policy)
}

/// Converts the sub-block `b` of an H-matrix to one low-rank matrix:
/// leaves directly, inner blocks by padding and fast truncation of their
/// converted children (row-child-major order).
pub fn hierarchical_approximation<T: Real>(
    h: &HMatrix<T>,
    b: usize,
    policy: TruncationPolicy,
) -> Result<LowRank<T>> {
    policy.validate()?;
    let tree = &h.tree;
    match &h.blocks[b] {
        BlockData::Near(d) => Ok(truncate_dense(d, policy)),
        BlockData::Far(lr) => Ok(truncate(lr, policy)),
        BlockData::Inner => {
            let (m, n) = tree.shape(b);
            let (r0, c0) = (tree.row_range(b).start, tree.col_range(b).start);
            let mut pieces = Vec::new();
            for &c in &tree.block(b).children {
                let lr = hierarchical_approximation(h, c, policy)?;
                if lr.rank() > 0 {
                    pieces.push(lr.pad(m, n, tree.row_range(c).start - r0, tree.col_range(c).start - c0));
                }
            }
            if pieces.is_empty() {
                return Ok(LowRank::zeros(m, n));
            }
            fast_truncate_sum(&pieces, policy)
        }
    }
}

pub const DEFAULT_ESTIMATE_ITERS: usize = 10;
pub const DEFAULT_ESTIMATE_BLOCK: usize = 100;

/// Frobenius norm of `L - H K` captured by block subspace iteration on the
/// residual operator. A lower bound that is sharp when the residual has at
/// most `block_size` dominant singular values.
pub fn estimate_product_error<T: Real>(
    h: &HMatrix<T>,
    k: &HMatrix<T>,
    l: &HMatrix<T>,
    iters: usize,
    block_size: usize,
    seed: u64,
) -> Result<f64> {
    let n = l.size();
    if h.size() != n || k.size() != n {
        return Err(HmError::DimensionMismatch {
            context: "product error estimate",
            expected: n,
            actual: h.size().max(k.size()),
        });
    }
    if block_size == 0 || block_size > n {
        return Err(HmError::InvalidArgument(format!(
            "subspace size {block_size} outside 1..={n}"
        )));
    }
    let residual = |x: &DMatrix<T>| -> Result<DMatrix<T>> {
        Ok(l.matmul(x, None)? - h.matmul(&k.matmul(x, None)?, None)?)
    };
    let residual_t = |x: &DMatrix<T>| -> Result<DMatrix<T>> {
        Ok(l.matmul_transpose(x, None)? - k.matmul_transpose(&h.matmul_transpose(x, None)?, None)?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = DMatrix::from_fn(n, block_size, |_, _| T::of(StandardNormal.sample(&mut rng)));
    let mut y = thin_qr(&start).0;
    for _ in 0..iters {
        let q = thin_qr(&residual(&y)?).0;
        y = thin_qr(&residual_t(&q)?).0;
    }
    Ok(residual(&y)?.norm().as_f64())
}

/// `estimate_product_error` with ten iterations on `min(100, N)` vectors.
pub fn estimate_product_error_default<T: Real>(
    h: &HMatrix<T>,
    k: &HMatrix<T>,
    l: &HMatrix<T>,
    seed: u64,
) -> Result<f64> {
    let block = DEFAULT_ESTIMATE_BLOCK.min(l.size());
    estimate_product_error(h, k, l, DEFAULT_ESTIMATE_ITERS, block, seed)
}

/// Shared handle so callers can keep multiplying with one structure.
pub fn same_structure<T: Real>(a: &HMatrix<T>, b: &HMatrix<T>) -> bool {
    Arc::ptr_eq(&a.tree, &b.tree) || *a.tree == *b.tree
}
