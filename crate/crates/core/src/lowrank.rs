//! Factored low-rank matrices `L R^T` and their SVD-based truncation.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{HmError, Result};
use crate::scalar::Real;

/// How a low-rank approximation chooses its rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TruncationPolicy {
    /// Keep at most `k` singular triples, dropping exact zeros.
    FixedRank(usize),
    /// Keep the smallest rank whose discarded Frobenius tail is at most
    /// `eps` times the Frobenius norm of the whole matrix.
    EpsRank(f64),
}

impl TruncationPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TruncationPolicy::FixedRank(0) => Err(HmError::InvalidArgument(
                "fixed-rank truncation needs k >= 1".into(),
            )),
            TruncationPolicy::EpsRank(e) if !(e > 0.0) => Err(HmError::InvalidArgument(format!(
                "eps-rank truncation needs eps > 0, got {e}"
            ))),
            _ => Ok(()),
        }
    }

    /// Upper bound on the rank, if any.
    pub fn max_rank(&self) -> Option<usize> {
        match *self {
            TruncationPolicy::FixedRank(k) => Some(k),
            TruncationPolicy::EpsRank(_) => None,
        }
    }

    /// Tolerance with requests below the working precision raised to
    /// `max(1e-15, machine epsilon)`.
    pub fn effective_eps<T: Real>(&self) -> Option<f64> {
        match *self {
            TruncationPolicy::FixedRank(_) => None,
            TruncationPolicy::EpsRank(e) => {
                let floor = 1e-15f64.max(T::MACHINE_EPSILON);
                if e <= T::MACHINE_EPSILON {
                    log::warn!("eps {e:e} below machine precision, clamped to {floor:e}");
                    Some(floor)
                } else {
                    Some(e)
                }
            }
        }
    }

    /// Number of leading singular values to keep out of `s` (sorted descending).
    pub fn select_rank<T: Real>(&self, s: &[T]) -> usize {
        match *self {
            TruncationPolicy::FixedRank(k) => s.iter().take(k).filter(|x| **x > T::zero()).count(),
            TruncationPolicy::EpsRank(_) => {
                let eps = self.effective_eps::<T>().unwrap_or(0.0);
                let sq: Vec<f64> = s.iter().map(|x| x.as_f64().powi(2)).collect();
                let total: f64 = sq.iter().sum();
                let bound = eps * eps * total;
                // tail[r] = sum_{i >= r} s_i^2
                let mut tail = 0.0;
                let mut r = s.len();
                while r > 0 {
                    let next = tail + sq[r - 1];
                    if next > bound {
                        break;
                    }
                    tail = next;
                    r -= 1;
                }
                r
            }
        }
    }
}

/// The matrix `left * right^T`, `left` is `m x k`, `right` is `n x k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank<T: Real> {
    pub left: DMatrix<T>,
    pub right: DMatrix<T>,
}

/// Thin SVD `U diag(s) V^T` with singular values in descending order.
#[derive(Debug, Clone)]
pub struct SvdFactors<T: Real> {
    pub u: DMatrix<T>,
    pub s: Vec<T>,
    pub v: DMatrix<T>,
}

impl<T: Real> SvdFactors<T> {
    /// Keeps the first `r` triples and folds the singular values into `U`.
    pub fn into_lowrank(self, r: usize) -> LowRank<T> {
        let r = r.min(self.s.len());
        let mut left = self.u.columns(0, r).into_owned();
        for (j, mut col) in left.column_iter_mut().enumerate() {
            col *= self.s[j];
        }
        LowRank {
            left,
            right: self.v.columns(0, r).into_owned(),
        }
    }
}

impl<T: Real> LowRank<T> {
    pub fn new(left: DMatrix<T>, right: DMatrix<T>) -> Result<Self> {
        if left.ncols() != right.ncols() {
            return Err(HmError::DimensionMismatch {
                context: "low-rank factors",
                expected: left.ncols(),
                actual: right.ncols(),
            });
        }
        Ok(LowRank { left, right })
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        LowRank {
            left: DMatrix::zeros(m, 0),
            right: DMatrix::zeros(n, 0),
        }
    }

    pub fn nrows(&self) -> usize {
        self.left.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.right.nrows()
    }

    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        &self.left * self.right.transpose()
    }

    /// `||L R^T||_F` via `trace((L^T L)(R^T R))`.
    pub fn frobenius_norm(&self) -> T {
        if self.rank() == 0 {
            return T::zero();
        }
        let gl = self.left.tr_mul(&self.left);
        let gr = self.right.tr_mul(&self.right);
        gl.component_mul(&gr).sum().max(T::zero()).sqrt()
    }

    pub fn apply(&self, x: DVectorView<'_, T>) -> DVector<T> {
        &self.left * (self.right.tr_mul(&x))
    }

    pub fn apply_transpose(&self, x: DVectorView<'_, T>) -> DVector<T> {
        &self.right * (self.left.tr_mul(&x))
    }

    pub fn transpose(&self) -> LowRank<T> {
        LowRank {
            left: self.right.clone(),
            right: self.left.clone(),
        }
    }

    /// Sum `self + other` by concatenating factors; the rank adds up.
    pub fn concat(&self, other: &LowRank<T>) -> Result<LowRank<T>> {
        if self.nrows() != other.nrows() || self.ncols() != other.ncols() {
            return Err(HmError::DimensionMismatch {
                context: "low-rank sum",
                expected: self.nrows() * self.ncols(),
                actual: other.nrows() * other.ncols(),
            });
        }
        let (m, n, k1, k2) = (self.nrows(), self.ncols(), self.rank(), other.rank());
        let mut left = DMatrix::zeros(m, k1 + k2);
        let mut right = DMatrix::zeros(n, k1 + k2);
        left.columns_mut(0, k1).copy_from(&self.left);
        left.columns_mut(k1, k2).copy_from(&other.left);
        right.columns_mut(0, k1).copy_from(&self.right);
        right.columns_mut(k1, k2).copy_from(&other.right);
        Ok(LowRank { left, right })
    }

    /// Embeds the matrix into an `m x n` zero matrix at offset `(row, col)`.
    pub fn pad(&self, m: usize, n: usize, row: usize, col: usize) -> LowRank<T> {
        let k = self.rank();
        let mut left = DMatrix::zeros(m, k);
        let mut right = DMatrix::zeros(n, k);
        left.view_mut((row, 0), (self.nrows(), k)).copy_from(&self.left);
        right.view_mut((col, 0), (self.ncols(), k)).copy_from(&self.right);
        LowRank { left, right }
    }
}

/// Thin SVD of a dense matrix, sorted descending.
pub fn dense_svd<T: Real>(a: &DMatrix<T>) -> SvdFactors<T> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return SvdFactors {
            u: DMatrix::zeros(m, 0),
            s: Vec::new(),
            v: DMatrix::zeros(n, 0),
        };
    }
    let (u, s, vt) = scaled_svd(a);
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].partial_cmp(&s[i]).unwrap_or(std::cmp::Ordering::Equal));
    let r = order.len();
    let mut uu = DMatrix::zeros(m, r);
    let mut vv = DMatrix::zeros(n, r);
    let mut ss = Vec::with_capacity(r);
    for (dst, &src) in order.iter().enumerate() {
        uu.set_column(dst, &u.column(src));
        vv.set_column(dst, &vt.row(src).transpose());
        ss.push(s[src]);
    }
    SvdFactors { u: uu, s: ss, v: vv }
}

/// nalgebra's SVD compares against absolute thresholds and can return
/// factors that miss small-magnitude inputs by many digits. Scaling by a
/// power of two is exact, so run it on a unit-scale copy; if the
/// recomposition still misses, retry with a tighter convergence threshold
/// and then on the transposed problem.
fn scaled_svd<T: Real>(a: &DMatrix<T>) -> (DMatrix<T>, DVector<T>, DMatrix<T>) {
    let amax = a.amax();
    let (m, n) = a.shape();
    if amax == T::zero() {
        let k = m.min(n);
        return (DMatrix::identity(m, k), DVector::zeros(k), DMatrix::identity(k, n));
    }
    let exp = amax.as_f64().log2().round();
    let down = T::of((-exp).exp2());
    let up = T::of(exp.exp2());
    let b = a * down;
    let tol = T::of(64.0 * T::MACHINE_EPSILON * ((m * n) as f64).sqrt()) * b.norm();
    let residual = |u: &DMatrix<T>, s: &DVector<T>, vt: &DMatrix<T>| {
        let mut us = u.clone();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= s[j];
        }
        (&b - us * vt).norm()
    };
    let tight = T::of(0.01 * T::MACHINE_EPSILON);
    let max_iter = 200 * (m + n);
    let attempts: [&dyn Fn() -> Option<(DMatrix<T>, DVector<T>, DMatrix<T>)>; 3] = [
        &|| {
            let svd = b.clone().svd(true, true);
            Some((svd.u?, svd.singular_values, svd.v_t?))
        },
        &|| {
            let svd = b.clone().try_svd(true, true, tight, max_iter)?;
            Some((svd.u?, svd.singular_values, svd.v_t?))
        },
        &|| {
            let svd = b.transpose().try_svd(true, true, tight, max_iter)?;
            Some((svd.v_t?.transpose(), svd.singular_values, svd.u?.transpose()))
        },
    ];
    let mut best: Option<(T, (DMatrix<T>, DVector<T>, DMatrix<T>))> = None;
    for attempt in attempts {
        let Some(f) = attempt() else { continue };
        let r = residual(&f.0, &f.1, &f.2);
        if best.as_ref().is_none_or(|(br, _)| r < *br) {
            best = Some((r, f));
        }
        if r <= tol {
            break;
        }
    }
    let (r, (u, s, vt)) = best.expect("the default SVD always returns factors");
    if r > T::of(16.0) * tol {
        log::warn!("dense SVD of a {m}x{n} block is inaccurate: residual {:e}", (r / b.norm()).as_f64());
    } else if r > tol {
        log::debug!("dense SVD of a {m}x{n} block: residual {:e}", (r / b.norm()).as_f64());
    }
    (u, s * up, vt)
}

/// Truncated SVD of a dense matrix as a low-rank matrix.
pub fn truncate_dense<T: Real>(a: &DMatrix<T>, policy: TruncationPolicy) -> LowRank<T> {
    let svd = dense_svd(a);
    let r = policy.select_rank(&svd.s);
    svd.into_lowrank(r)
}

/// Thin QR, `Q` with `min(rows, cols)` orthonormal columns.
pub(crate) fn thin_qr<T: Real>(a: &DMatrix<T>) -> (DMatrix<T>, DMatrix<T>) {
    let qr = a.clone().qr();
    (qr.q(), qr.r())
}

/// SVD of `L R^T` from QR factorizations of both factors and an SVD of the
/// small core `R_L R_R^T`.
pub fn lowrank_svd<T: Real>(m: &LowRank<T>) -> SvdFactors<T> {
    if m.rank() == 0 || m.nrows() == 0 || m.ncols() == 0 {
        return SvdFactors {
            u: DMatrix::zeros(m.nrows(), 0),
            s: Vec::new(),
            v: DMatrix::zeros(m.ncols(), 0),
        };
    }
    let (ql, rl) = thin_qr(&m.left);
    let (qr, rr) = thin_qr(&m.right);
    let core = &rl * rr.transpose();
    let inner = dense_svd(&core);
    SvdFactors {
        u: &ql * inner.u,
        s: inner.s,
        v: &qr * inner.v,
    }
}

/// Best approximation of `m` under `policy` (Eckart-Young).
pub fn truncate<T: Real>(m: &LowRank<T>, policy: TruncationPolicy) -> LowRank<T> {
    let svd = lowrank_svd(m);
    let r = policy.select_rank(&svd.s);
    svd.into_lowrank(r)
}

/// Pairwise truncate-as-you-add: `M_2 = T(t_1 + t_2)`, `M_i = T(M_{i-1} + t_i)`.
pub fn fast_truncate_sum<T: Real>(terms: &[LowRank<T>], policy: TruncationPolicy) -> Result<LowRank<T>> {
    let (first, rest) = terms
        .split_first()
        .ok_or(HmError::Empty("low-rank sum"))?;
    if rest.is_empty() {
        return Ok(truncate(first, policy));
    }
    let mut acc = first.clone();
    for t in rest {
        acc = truncate(&acc.concat(t)?, policy);
    }
    Ok(acc)
}
