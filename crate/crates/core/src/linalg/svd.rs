//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! The input is first brought to a wide orientation (`n ≤ m`) and reduced by
//! a Householder LQ factorization `A = L·Qᵀ`, so the rotations run on the
//! small `n×n` factor `L` instead of the full rows of `A`. Rotations
//! orthogonalize the rows of `L`; the accumulated rotation is `U` and the
//! normalized rows, mapped back through `Qᵀ`, are `Vᵀ`.

use super::matrix::{axpy, dot, Matrix};
use crate::error::{Error, Result};

/// Off-diagonal Gram entries must fall below this, relative to the row norms.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `n × p`, orthonormal columns.
    pub u: Matrix,
    /// Descending, nonnegative, length `p = min(n, m)`.
    pub sigma: Vec<f64>,
    /// `p × m`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    /// `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (v, s) in us.row_mut(i).iter_mut().zip(&self.sigma) {
                *v *= s;
            }
        }
        us.matmul(&self.vt).expect("svd factor shapes agree")
    }
}

pub fn svd_thin(a: &Matrix) -> Result<SvdResult> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::contract(format!(
            "svd of empty {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::contract("svd input has non-finite entries"));
    }
    let tall = a.rows() > a.cols();
    let wide = if tall { a.transpose() } else { a.clone() };
    let (u_w, sigma, vt_w) = svd_wide(wide)?;

    // For a tall input we decomposed Aᵀ = U_w Σ V_wᵀ, hence A = V_w Σ U_wᵀ.
    let (mut u, mut vt) = if tall {
        (vt_w.transpose(), u_w.transpose())
    } else {
        (u_w, vt_w)
    };
    apply_sign_convention(&mut u, &mut vt);
    Ok(SvdResult { u, sigma, vt })
}

/// Flips each singular pair so the largest-magnitude entry of `u_i` is
/// nonnegative (first index wins ties).
fn apply_sign_convention(u: &mut Matrix, vt: &mut Matrix) {
    for i in 0..vt.rows() {
        let mut best = 0.0f64;
        let mut best_val = 0.0;
        for r in 0..u.rows() {
            let v = u[(r, i)];
            if v.abs() > best {
                best = v.abs();
                best_val = v;
            }
        }
        if best_val < 0.0 {
            for r in 0..u.rows() {
                u[(r, i)] = -u[(r, i)];
            }
            vt.row_mut(i).iter_mut().for_each(|v| *v = -*v);
        }
    }
}

struct Reflector {
    start: usize,
    tau: f64,
    v: Vec<f64>,
}

/// Singular vectors whose σ is at least this fraction of σ₁ get their right
/// vector from `Σ⁻¹·Uᵀ·A` (one matmul); smaller ones are mapped back through
/// the Householder reflectors, which stays orthonormal at any conditioning.
const FAST_RIGHT_VECTOR_RATIO: f64 = 1e-3;

/// SVD of an `n × m` matrix with `n ≤ m`. Returns `(U n×n, σ, Vᵀ n×m)`.
///
/// Rows are sorted by norm before the LQ step, and the rotations act on the
/// rows of `Lᵀ` (the columns of `L`); with that pivoting the Jacobi sweeps
/// converge noticeably faster.
fn svd_wide(a: Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let n = a.rows();
    let m = a.cols();
    debug_assert!(n <= m);

    let mut perm: Vec<(usize, f64)> = (0..n).map(|i| (i, dot(a.row(i), a.row(i)))).collect();
    perm.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut work = Matrix::zeros(n, m);
    for (dst, &(src, _)) in perm.iter().enumerate() {
        work.row_mut(dst).copy_from_slice(a.row(src));
    }

    let reflectors = lq_in_place(&mut work);
    // Lᵀ = Jᵀ·W after the sweeps, so A_p = L·Qᵀ = Wᵀ·(Jᵀ·Qᵀ).
    let mut b = work.top_left(n, n)?.transpose();
    let mut jt = Matrix::identity(n);
    jacobi_rows(&mut b, &mut jt)?;

    let mut order: Vec<(usize, f64)> = (0..n).map(|i| (i, dot(b.row(i), b.row(i)).sqrt())).collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let sigma: Vec<f64> = order.iter().map(|&(_, s)| s).collect();
    let sigma_max = sigma[0];

    // Columns of the (row-permuted) U are the normalized rows of W.
    let mut ut_p = Matrix::zeros(n, n);
    let mut null_rows = Vec::new();
    for (k, &(i, s)) in order.iter().enumerate() {
        if s > f64::MIN_POSITIVE * 1e6 {
            let inv = 1.0 / s;
            for (dst, src) in ut_p.row_mut(k).iter_mut().zip(b.row(i)) {
                *dst = src * inv;
            }
        } else {
            null_rows.push(k);
        }
    }
    complete_orthonormal_rows(&mut ut_p, &null_rows);
    let mut u = Matrix::zeros(n, n);
    for (r, &(orig, _)) in perm.iter().enumerate() {
        for k in 0..n {
            u[(orig, k)] = ut_p[(k, r)];
        }
    }

    let mut vt = u.transpose().matmul(&a)?;
    for (k, &(i, s)) in order.iter().enumerate() {
        if s >= FAST_RIGHT_VECTOR_RATIO * sigma_max && s > 0.0 {
            let inv = 1.0 / s;
            vt.row_mut(k).iter_mut().for_each(|v| *v *= inv);
            continue;
        }
        // Vᵀ_k = [Jᵀ_i 0] · H_n ⋯ H_1
        let row = vt.row_mut(k);
        row.iter_mut().for_each(|v| *v = 0.0);
        row[..n].copy_from_slice(jt.row(i));
        for h in reflectors.iter().rev() {
            let seg = &mut row[h.start..];
            let d = dot(seg, &h.v);
            if d != 0.0 {
                axpy(-h.tau * d, &h.v, seg);
            }
        }
    }
    Ok((u, sigma, vt))
}

/// Householder LQ: on return the leading `n×n` block of `a` holds `L` and the
/// rest of each row is zero; `A_original = L · Qᵀ` with `Qᵀ = [I 0]·H_n⋯H_1`.
fn lq_in_place(a: &mut Matrix) -> Vec<Reflector> {
    let n = a.rows();
    let m = a.cols();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let x = &a.row(k)[k..];
        let norm = dot(x, x).sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if x[0] > 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vv = dot(&v, &v);
        if vv == 0.0 {
            continue;
        }
        let tau = 2.0 / vv;
        {
            let row = &mut a.row_mut(k)[k..];
            row[0] = alpha;
            row[1..].iter_mut().for_each(|x| *x = 0.0);
        }
        for i in k + 1..n {
            let row = &mut a.row_mut(i)[k..];
            let d = dot(row, &v);
            if d != 0.0 {
                axpy(-tau * d, &v, row);
            }
        }
        out.push(Reflector { start: k, tau, v });
    }
    debug_assert!(out.iter().all(|h| h.start + h.v.len() == m));
    out
}

/// Cyclic one-sided Jacobi on the rows of `b`; the same rotations are applied
/// to the rows of `jt` (the transposed accumulated rotation).
fn jacobi_rows(b: &mut Matrix, jt: &mut Matrix) -> Result<()> {
    let n = b.rows();
    if n < 2 {
        return Ok(());
    }
    let mut norms: Vec<f64> = (0..n).map(|i| dot(b.row(i), b.row(i))).collect();
    let mut worst = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        worst = 0.0f64;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let alpha = norms[i];
                let beta = norms[j];
                if alpha <= f64::MIN_POSITIVE || beta <= f64::MIN_POSITIVE {
                    continue;
                }
                let gamma = dot(b.row(i), b.row(j));
                let rel = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                if rel <= JACOBI_TOLERANCE {
                    continue;
                }
                worst = worst.max(rel);
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(b, i, j, c, s);
                rotate_rows(jt, i, j, c, s);
                norms[i] = alpha - t * gamma;
                norms[j] = beta + t * gamma;
            }
        }
        if !rotated {
            return Ok(());
        }
        // Refresh the cached norms to stop drift from the incremental updates.
        for (i, nrm) in norms.iter_mut().enumerate() {
            *nrm = dot(b.row(i), b.row(i));
        }
    }
    Err(Error::Numerical {
        message: format!("jacobi svd did not converge in {MAX_SWEEPS} sweeps"),
        residual: worst,
    })
}

/// `row_i ← c·row_i − s·row_j`, `row_j ← s·row_i + c·row_j`.
#[inline]
fn rotate_rows(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    debug_assert!(i < j);
    let cols = m.cols();
    let (head, tail) = m.data_mut().split_at_mut(j * cols);
    let ri = &mut head[i * cols..(i + 1) * cols];
    let rj = &mut tail[..cols];
    for (x, y) in ri.iter_mut().zip(rj.iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills `rows` of the square matrix `q` with unit vectors orthogonal to every
/// other row, choosing from the standard basis by largest residual.
fn complete_orthonormal_rows(q: &mut Matrix, rows: &[usize]) {
    if rows.is_empty() {
        return;
    }
    let n = q.cols();
    let mut filled: Vec<usize> = (0..q.rows()).filter(|r| !rows.contains(r)).collect();
    for &target in rows {
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = -1.0;
        for e in 0..n {
            let mut cand = vec![0.0; n];
            cand[e] = 1.0;
            // two passes of Gram-Schmidt for numerical orthogonality
            for _ in 0..2 {
                for &f in &filled {
                    let d = dot(&cand, q.row(f));
                    axpy(-d, q.row(f), &mut cand);
                }
            }
            let nrm = dot(&cand, &cand).sqrt();
            if nrm > best_norm {
                best_norm = nrm;
                best = Some(cand);
            }
            if nrm > 0.7 {
                break;
            }
        }
        let mut cand = best.expect("basis completion has a candidate");
        let inv = 1.0 / best_norm;
        cand.iter_mut().for_each(|v| *v *= inv);
        q.row_mut(target).copy_from_slice(&cand);
        filled.push(target);
    }
}
