//! Matrix-free low-rank approximation of abstract linear maps.
//!
//! Every scheme here touches the operator only through [`LinearMap`]:
//! products with blocks of vectors and with their transposes. Rows and
//! columns are obtained as products with unit vectors unless the map
//! provides cheaper direct access.
//!
//! The adaptive schemes share one stopping rule: stop as soon as the
//! Frobenius norm of the next rank-one update is at most `eps` times the
//! Frobenius norm of the current approximant. Under a constant error
//! reduction rate `theta` this bounds the block error by
//! `eps / (1 - theta) * ||A||_F`.

use std::cell::Cell;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HmError, Result};
use crate::lowrank::{lowrank_svd, thin_qr, truncate, truncate_dense, LowRank, TruncationPolicy};
use crate::scalar::Real;

/// Largest dimension the dense SVD reference materializes.
pub const MAX_DENSE_SVD_DIM: usize = 6144;

/// A linear operator `R^n -> R^m` known only through its action.
pub trait LinearMap<T: Real> {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;

    /// `A X` for an `n x r` block `X`.
    fn apply_block(&self, x: &DMatrix<T>) -> DMatrix<T>;

    /// `A^T Y` for an `m x r` block `Y`.
    fn apply_transpose_block(&self, y: &DMatrix<T>) -> DMatrix<T>;

    fn apply(&self, x: &DVector<T>) -> DVector<T> {
        let x = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        DVector::from_column_slice(self.apply_block(&x).as_slice())
    }

    fn apply_transpose(&self, y: &DVector<T>) -> DVector<T> {
        let y = DMatrix::from_column_slice(y.len(), 1, y.as_slice());
        DVector::from_column_slice(self.apply_transpose_block(&y).as_slice())
    }

    /// Row `i` as a vector of length `n`.
    fn row(&self, i: usize) -> DVector<T> {
        let mut e = DVector::zeros(self.nrows());
        e[i] = T::one();
        self.apply_transpose(&e)
    }

    /// Column `j` as a vector of length `m`.
    fn column(&self, j: usize) -> DVector<T> {
        let mut e = DVector::zeros(self.ncols());
        e[j] = T::one();
        self.apply(&e)
    }
}

/// A dense matrix seen as a linear map.
pub struct DenseMap<'a, T: Real>(pub &'a DMatrix<T>);

impl<T: Real> LinearMap<T> for DenseMap<'_, T> {
    fn nrows(&self) -> usize {
        self.0.nrows()
    }
    fn ncols(&self) -> usize {
        self.0.ncols()
    }
    fn apply_block(&self, x: &DMatrix<T>) -> DMatrix<T> {
        self.0 * x
    }
    fn apply_transpose_block(&self, y: &DMatrix<T>) -> DMatrix<T> {
        self.0.tr_mul(y)
    }
}

impl<T: Real> LinearMap<T> for LowRank<T> {
    fn nrows(&self) -> usize {
        LowRank::nrows(self)
    }
    fn ncols(&self) -> usize {
        LowRank::ncols(self)
    }
    fn apply_block(&self, x: &DMatrix<T>) -> DMatrix<T> {
        &self.left * self.right.tr_mul(x)
    }
    fn apply_transpose_block(&self, y: &DMatrix<T>) -> DMatrix<T> {
        &self.right * self.left.tr_mul(y)
    }
}

/// Wrapper that counts operator applications, one per vector.
///
/// Row and column requests are counted as applications too; the wrapped
/// map cannot be reached in any other way.
pub struct CountingMap<'a, T: Real, M: LinearMap<T> + ?Sized> {
    inner: &'a M,
    applies: Cell<usize>,
    transposed: Cell<usize>,
    _scalar: std::marker::PhantomData<T>,
}

impl<'a, T: Real, M: LinearMap<T> + ?Sized> CountingMap<'a, T, M> {
    pub fn new(inner: &'a M) -> Self {
        CountingMap {
            inner,
            applies: Cell::new(0),
            transposed: Cell::new(0),
            _scalar: std::marker::PhantomData,
        }
    }

    pub fn applies(&self) -> usize {
        self.applies.get()
    }

    pub fn transposed_applies(&self) -> usize {
        self.transposed.get()
    }

    pub fn total(&self) -> usize {
        self.applies() + self.transposed_applies()
    }
}

impl<T: Real, M: LinearMap<T> + ?Sized> LinearMap<T> for CountingMap<'_, T, M> {
    fn nrows(&self) -> usize {
        self.inner.nrows()
    }
    fn ncols(&self) -> usize {
        self.inner.ncols()
    }
    fn apply_block(&self, x: &DMatrix<T>) -> DMatrix<T> {
        self.applies.set(self.applies.get() + x.ncols());
        self.inner.apply_block(x)
    }
    fn apply_transpose_block(&self, y: &DMatrix<T>) -> DMatrix<T> {
        self.transposed.set(self.transposed.get() + y.ncols());
        self.inner.apply_transpose_block(y)
    }
    fn apply(&self, x: &DVector<T>) -> DVector<T> {
        self.applies.set(self.applies.get() + 1);
        self.inner.apply(x)
    }
    fn apply_transpose(&self, y: &DVector<T>) -> DVector<T> {
        self.transposed.set(self.transposed.get() + 1);
        self.inner.apply_transpose(y)
    }
    fn row(&self, i: usize) -> DVector<T> {
        self.transposed.set(self.transposed.get() + 1);
        self.inner.row(i)
    }
    fn column(&self, j: usize) -> DVector<T> {
        self.applies.set(self.applies.get() + 1);
        self.inner.column(j)
    }
}

/// Which matrix-free scheme turns an operator into a low-rank matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressorKind {
    /// Partially pivoted adaptive cross approximation.
    Aca,
    /// Golub-Kahan-Lanczos bidiagonalization with full reorthogonalization.
    BiLanczos,
    /// Gaussian range sampling: adaptive for eps-rank, blocked with
    /// `subspace_iters` power iterations for fixed rank.
    Randomized { subspace_iters: usize, seed: u64 },
    /// Materialize and take a dense SVD; the best-approximation reference.
    DenseSvd,
}

impl CompressorKind {
    pub const DEFAULT_SUBSPACE_ITERS: usize = 1;

    pub fn randomized(seed: u64) -> Self {
        CompressorKind::Randomized {
            subspace_iters: Self::DEFAULT_SUBSPACE_ITERS,
            seed,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CompressorKind::Aca => "aca",
            CompressorKind::BiLanczos => "bilanczos",
            CompressorKind::Randomized { .. } => "randomized",
            CompressorKind::DenseSvd => "svd",
        }
    }
}

/// A compressed operator and whether the scheme stopped without meeting
/// its tolerance.
#[derive(Debug, Clone)]
pub struct Compression<T: Real> {
    pub lowrank: LowRank<T>,
    pub degraded: bool,
}

/// SplitMix64 finalizer, used to derive independent seeds per block.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed used by the Lanczos start vector when none is configured.
const LANCZOS_SEED: u64 = 0x6c61_6e63_7a6f_7321;

/// Dispatches to the scheme selected by `kind`.
///
/// `stream` decorrelates the random draws of different calls that share a
/// configured seed (for example one stream per matrix block).
pub fn compress<T: Real, M: LinearMap<T> + ?Sized>(
    map: &M,
    kind: CompressorKind,
    policy: TruncationPolicy,
    stream: u64,
) -> Result<Compression<T>> {
    policy.validate()?;
    match kind {
        CompressorKind::Aca => Ok(aca(map, policy)),
        CompressorKind::BiLanczos => Ok(bilanczos(map, policy, mix_seed(LANCZOS_SEED, stream))),
        CompressorKind::Randomized {
            subspace_iters,
            seed,
        } => {
            let seed = mix_seed(seed, stream);
            match policy {
                TruncationPolicy::EpsRank(_) => Ok(randomized_adaptive(map, policy, seed)),
                TruncationPolicy::FixedRank(k) => {
                    let k = k.min(map.nrows()).min(map.ncols());
                    if k == 0 {
                        return Ok(Compression {
                            lowrank: LowRank::zeros(map.nrows(), map.ncols()),
                            degraded: false,
                        });
                    }
                    Ok(Compression {
                        lowrank: randomized_fixed(map, k, subspace_iters, seed)?,
                        degraded: false,
                    })
                }
            }
        }
        CompressorKind::DenseSvd => Ok(Compression {
            lowrank: dense_svd_compress(map, policy)?,
            degraded: false,
        }),
    }
}

/// `||l|| * ||u|| <= eps * accumulated_norm`.
pub fn stop_criterion<T: Real>(l: &DVector<T>, u: &DVector<T>, accumulated_norm: T, eps: f64) -> bool {
    update_is_small(l.norm() * u.norm(), accumulated_norm, eps)
}

fn update_is_small<T: Real>(update_norm: T, accumulated_norm: T, eps: f64) -> bool {
    update_norm <= T::of(eps) * accumulated_norm
}

/// Tolerance used by the adaptive loops and the rank cap they run up to.
///
/// Fixed-rank runs still stop once updates drop to roundoff level, so an
/// exactly low-rank operator does not collect noise crosses.
fn loop_limits<T: Real>(policy: TruncationPolicy, m: usize, n: usize) -> (f64, usize, bool) {
    let full = m.min(n);
    match policy {
        TruncationPolicy::FixedRank(k) => (T::MACHINE_EPSILON, k.min(full), false),
        TruncationPolicy::EpsRank(_) => (
            policy.effective_eps::<T>().expect("eps policy"),
            full,
            true,
        ),
    }
}

fn gaussian_vector<T: Real>(n: usize, rng: &mut ChaCha8Rng) -> DVector<T> {
    DVector::from_fn(n, |_, _| T::of(StandardNormal.sample(rng)))
}

fn gaussian_matrix<T: Real>(m: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<T> {
    DMatrix::from_fn(m, n, |_, _| T::of(StandardNormal.sample(rng)))
}

/// Removes the components of `v` along the orthonormal `basis`, twice.
fn orthogonalize<T: Real>(v: &mut DVector<T>, basis: &[DVector<T>]) {
    for _ in 0..2 {
        for b in basis {
            let c = b.dot(v);
            v.axpy(-c, b, T::one());
        }
    }
}

fn columns_to_matrix<T: Real>(rows: usize, cols: &[DVector<T>]) -> DMatrix<T> {
    let mut out = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    out
}

fn argmax_abs<T: Real>(v: &DVector<T>, skip: Option<&[bool]>) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &x) in v.iter().enumerate() {
        if skip.is_some_and(|s| s[i]) {
            continue;
        }
        let a = x.abs();
        if best.is_none_or(|(_, b)| a > b) {
            best = Some((i, a));
        }
    }
    best.map(|(i, _)| i)
}

/// Adaptive cross approximation with partial pivoting.
///
/// Each step takes the residual of row `i_r`, pivots on its largest entry
/// `j_r`, and takes the residual of column `j_r`. The next row is the
/// unused row where the new column is largest. Rows whose residual vanishes
/// are skipped; once every row is used up the residual is zero.
pub fn aca<T: Real, M: LinearMap<T> + ?Sized>(map: &M, policy: TruncationPolicy) -> Compression<T> {
    let (m, n) = (map.nrows(), map.ncols());
    if m == 0 || n == 0 {
        return Compression {
            lowrank: LowRank::zeros(m, n),
            degraded: false,
        };
    }
    let (eps, max_rank, adaptive) = loop_limits::<T>(policy, m, n);
    let mut cols: Vec<DVector<T>> = Vec::new();
    let mut rows: Vec<DVector<T>> = Vec::new();
    let mut used = vec![false; m];
    let mut pivot_row = 0;
    let mut norm_sq = T::zero();
    let mut converged = false;

    while cols.len() < max_rank {
        used[pivot_row] = true;
        let mut u = map.row(pivot_row);
        for (l, r) in cols.iter().zip(&rows) {
            u.axpy(-l[pivot_row], r, T::one());
        }
        let j = argmax_abs(&u, None).expect("n >= 1");
        let pivot = u[j];
        if pivot == T::zero() {
            match used.iter().position(|&x| !x) {
                Some(next) => {
                    pivot_row = next;
                    continue;
                }
                None => {
                    converged = true;
                    break;
                }
            }
        }
        u /= pivot;
        let mut l = map.column(j);
        for (c, r) in cols.iter().zip(&rows) {
            l.axpy(-r[j], c, T::one());
        }
        if !cols.is_empty() && stop_criterion(&l, &u, norm_sq.sqrt(), eps) {
            converged = true;
            break;
        }
        // ||[L l][U u]^T||^2 = ||L U^T||^2 + 2 sum_i (l_i.l)(u_i.u) + |l|^2 |u|^2
        let mut cross = T::zero();
        for (c, r) in cols.iter().zip(&rows) {
            cross += c.dot(&l) * r.dot(&u);
        }
        norm_sq += cross * T::of(2.0) + l.norm_squared() * u.norm_squared();
        let next = argmax_abs(&l, Some(&used));
        cols.push(l);
        rows.push(u);
        match next {
            Some(i) => pivot_row = i,
            None => {
                converged = true;
                break;
            }
        }
    }
    if cols.len() == m.min(n) {
        converged = true;
    }
    let mut lowrank = LowRank {
        left: columns_to_matrix(m, &cols),
        right: columns_to_matrix(n, &rows),
    };
    if adaptive && lowrank.rank() > 1 {
        // Crosses are not orthogonal and overshoot the optimal rank;
        // recompress at the same tolerance.
        lowrank = truncate(&lowrank, policy);
    }
    Compression {
        lowrank,
        degraded: adaptive && !converged,
    }
}

const MAX_LANCZOS_RESTARTS: usize = 3;

/// Golub-Kahan-Lanczos bidiagonalization.
///
/// Runs the recurrence `q_r = A w_r - beta_{r-1} q_{r-1}`,
/// `w_{r+1} = A^T q_r - alpha_r w_r` with both Lanczos bases fully
/// reorthogonalized. The update entering the stopping rule is the new
/// column of the bidiagonal factorization, `alpha_r q_r + beta_{r-1} q_{r-1}`
/// times `w_r^T`, of norm `sqrt(alpha_r^2 + beta_{r-1}^2)`.
///
/// A vanishing `alpha` or `beta` means the current Krylov space is invariant;
/// the iteration restarts from a random vector orthogonal to the right basis
/// (at most three times). The result is `(Q U~ S) V~^T`-form from the SVD of
/// the projection `Q Q^T A = Q Z^T` with `Z = A^T Q` already at hand; its
/// core `Z^T W` is the bidiagonal matrix when no restart happened.
pub fn bilanczos<T: Real, M: LinearMap<T> + ?Sized>(
    map: &M,
    policy: TruncationPolicy,
    seed: u64,
) -> Compression<T> {
    let (m, n) = (map.nrows(), map.ncols());
    if m == 0 || n == 0 {
        return Compression {
            lowrank: LowRank::zeros(m, n),
            degraded: false,
        };
    }
    let (eps, max_rank, adaptive) = loop_limits::<T>(policy, m, n);
    // Cancellation in the three-term recurrence leaves residuals well above
    // machine precision once the Krylov space is exhausted.
    let breakdown = T::of(T::MACHINE_EPSILON.powf(2.0 / 3.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut qs: Vec<DVector<T>> = Vec::new();
    let mut ws: Vec<DVector<T>> = Vec::new();
    // A^T q_r, kept to form the projected core without further products.
    let mut zs: Vec<DVector<T>> = Vec::new();
    let mut norm_sq = T::zero();
    let mut scale = T::zero();
    let mut restarts = 0;
    let mut converged = false;
    let mut exhausted = false;

    let mut w = gaussian_vector::<T>(n, &mut rng);
    w.normalize_mut();
    let mut beta_prev = T::zero();

    while qs.len() < max_rank {
        let mut q = map.apply(&w);
        scale = scale.max(q.norm());
        if let Some(prev) = qs.last() {
            q.axpy(-beta_prev, prev, T::one());
        }
        orthogonalize(&mut q, &qs);
        let alpha = q.norm();
        if alpha <= breakdown * scale {
            // A w lies in span(Q): restart with a fresh direction.
            if restarts == MAX_LANCZOS_RESTARTS || ws.len() + 1 >= n {
                converged = true;
                exhausted = true;
                break;
            }
            restarts += 1;
            let mut fresh = gaussian_vector::<T>(n, &mut rng);
            orthogonalize(&mut fresh, &ws);
            let nf = fresh.norm();
            if nf == T::zero() {
                converged = true;
                break;
            }
            w = fresh / nf;
            beta_prev = T::zero();
            continue;
        }
        let update = (alpha * alpha + beta_prev * beta_prev).sqrt();
        if !qs.is_empty() && update_is_small(update, norm_sq.sqrt(), eps) {
            converged = true;
            break;
        }
        norm_sq += update * update;
        q /= alpha;
        let z = map.apply_transpose(&q);
        let mut w_next = &z - &w * alpha;
        qs.push(q);
        ws.push(w.clone());
        zs.push(z);
        if qs.len() == max_rank {
            break;
        }
        orthogonalize(&mut w_next, &ws);
        let beta = w_next.norm();
        scale = scale.max(beta);
        if beta <= breakdown * scale {
            if restarts == MAX_LANCZOS_RESTARTS || ws.len() >= n {
                converged = true;
                exhausted = true;
                break;
            }
            restarts += 1;
            let mut fresh = gaussian_vector::<T>(n, &mut rng);
            orthogonalize(&mut fresh, &ws);
            let nf = fresh.norm();
            if nf == T::zero() {
                converged = true;
                break;
            }
            w = fresh / nf;
            beta_prev = T::zero();
            continue;
        }
        w = w_next / beta;
        beta_prev = beta;
    }
    if qs.len() == m.min(n) {
        converged = true;
    }
    let k = qs.len();
    if k == 0 {
        return Compression {
            lowrank: LowRank::zeros(m, n),
            degraded: adaptive && !converged,
        };
    }
    // Q Q^T A = Q Z^T; its SVD has the bidiagonal core's singular triples
    // plus the coupling to the next Lanczos vector.
    let mut projected = LowRank {
        left: columns_to_matrix(m, &qs),
        right: columns_to_matrix(n, &zs),
    };
    if exhausted {
        // The Krylov space is invariant, so A has rank k. The recurrence lets
        // Q drift out of range(A) by roundoff amplified through beta/alpha;
        // one subspace step Q = orth(A orth(Z)) puts it back at machine
        // precision. (W itself is no good here: the start vector's null-space
        // part makes A W ill-conditioned.)
        let row_basis = projected.right.clone().qr().q();
        let left = map.apply_block(&row_basis).qr().q();
        let right = map.apply_transpose_block(&left);
        projected = LowRank { left, right };
    }
    // Triples at roundoff level come from Lanczos vectors that only carry
    // noise (a restart into an exhausted space); drop them.
    let svd = lowrank_svd(&projected);
    let floor = svd.s.first().map_or(T::zero(), |&s0| s0 * T::of(64.0 * T::MACHINE_EPSILON));
    let r = svd.s.iter().take(k).filter(|&&s| s > floor).count();
    Compression {
        lowrank: svd.into_lowrank(r),
        degraded: adaptive && !converged,
    }
}


/// Adaptive randomized range finder, one Gaussian sample per step.
///
/// The new basis vector is the normalized projection of `A w` onto the
/// orthogonal complement of the current basis; the new row of `U = L^T A`
/// is `A^T l`. Since `l` is a unit vector the update norm is `||u||`.
pub fn randomized_adaptive<T: Real, M: LinearMap<T> + ?Sized>(
    map: &M,
    policy: TruncationPolicy,
    seed: u64,
) -> Compression<T> {
    let (m, n) = (map.nrows(), map.ncols());
    if m == 0 || n == 0 {
        return Compression {
            lowrank: LowRank::zeros(m, n),
            degraded: false,
        };
    }
    let (eps, max_rank, adaptive) = loop_limits::<T>(policy, m, n);
    let negligible = T::of(1e-14);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ls: Vec<DVector<T>> = Vec::new();
    let mut us: Vec<DVector<T>> = Vec::new();
    let mut norm_sq = T::zero();
    let mut scale = T::zero();
    let mut converged = false;

    while ls.len() < max_rank {
        let omega = gaussian_vector::<T>(n, &mut rng);
        let mut l = map.apply(&omega);
        scale = scale.max(l.norm());
        orthogonalize(&mut l, &ls);
        let nl = l.norm();
        if nl <= negligible * scale || scale == T::zero() {
            converged = true;
            break;
        }
        l /= nl;
        let u = map.apply_transpose(&l);
        let un = u.norm();
        if !ls.is_empty() && update_is_small(un, norm_sq.sqrt(), eps) {
            converged = true;
            break;
        }
        norm_sq += un * un;
        ls.push(l);
        us.push(u);
    }
    if ls.len() == m.min(n) {
        converged = true;
    }
    Compression {
        lowrank: LowRank {
            left: columns_to_matrix(m, &ls),
            right: columns_to_matrix(n, &us),
        },
        degraded: adaptive && !converged,
    }
}

/// Blocked randomized rank-`k` approximation with `q` subspace iterations.
pub fn randomized_fixed<T: Real, M: LinearMap<T> + ?Sized>(
    map: &M,
    k: usize,
    q: usize,
    seed: u64,
) -> Result<LowRank<T>> {
    let (m, n) = (map.nrows(), map.ncols());
    if k == 0 || k > m.min(n) {
        return Err(HmError::InvalidArgument(format!(
            "randomized rank {k} outside 1..={}",
            m.min(n)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = gaussian_matrix::<T>(n, k, &mut rng);
    let mut l = thin_qr(&map.apply_block(&omega)).0;
    for _ in 0..q {
        let u = thin_qr(&map.apply_transpose_block(&l)).0;
        l = thin_qr(&map.apply_block(&u)).0;
    }
    let u = map.apply_transpose_block(&l);
    Ok(LowRank { left: l, right: u })
}

/// Best approximation under `policy` from the SVD of the materialized map.
pub fn dense_svd_compress<T: Real, M: LinearMap<T> + ?Sized>(
    map: &M,
    policy: TruncationPolicy,
) -> Result<LowRank<T>> {
    let (m, n) = (map.nrows(), map.ncols());
    if n > MAX_DENSE_SVD_DIM || m > MAX_DENSE_SVD_DIM {
        return Err(HmError::Capacity {
            what: "dense SVD dimension",
            requested: n.max(m),
            limit: MAX_DENSE_SVD_DIM,
        });
    }
    let a = map.apply_block(&DMatrix::identity(n, n));
    Ok(truncate_dense(&a, policy))
}
