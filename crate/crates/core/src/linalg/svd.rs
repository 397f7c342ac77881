use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};
use crate::scalar::Scalar;

/// Sweep budget for the cyclic Jacobi iteration.
pub const MAX_SWEEPS: usize = 60;

/// Minimum residual norm for a canonical vector to be accepted while
/// completing an orthonormal basis.
const COMPLETION_ACCEPT: f64 = 1e-3;

/// Full SVD `W = U · diag(sigma) · Vᵀ`.
///
/// `u` is `d1×d1`, `vt` is `d2×d2`, `sigma` has `min(d1, d2)` entries in
/// descending order. Each column of `u` has its largest-magnitude entry
/// (first one on ties) non-negative; the paired row of `vt` carries the
/// compensating sign.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors<T> {
    pub u: DenseMatrix<T>,
    pub sigma: Vec<T>,
    pub vt: DenseMatrix<T>,
}

impl<T: Scalar> SvdFactors<T> {
    /// `(d1, d2)` of the factored matrix.
    pub fn dims(&self) -> (usize, usize) {
        (self.u.rows(), self.vt.cols())
    }

    /// Right singular vectors as columns.
    pub fn v(&self) -> DenseMatrix<T> {
        self.vt.transpose()
    }

    /// `U · diag(sigma) · Vᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix<T> {
        let d = self.sigma.len();
        self.u
            .columns(0..d)
            .scale_columns(&self.sigma)
            .matmul(&self.vt_rows(0..d))
            .expect("factor shapes are consistent")
    }

    /// Sum of the singular triples with indices in `range`.
    pub fn partial_sum(&self, range: std::ops::Range<usize>) -> DenseMatrix<T> {
        let sig = &self.sigma[range.clone()];
        self.u
            .columns(range.clone())
            .scale_columns(sig)
            .matmul(&self.vt_rows(range))
            .expect("factor shapes are consistent")
    }

    fn vt_rows(&self, range: std::ops::Range<usize>) -> DenseMatrix<T> {
        let cols = self.vt.cols();
        DenseMatrix::from_fn(range.len(), cols, |i, j| self.vt[(range.start + i, j)])
    }
}

/// Singular value decomposition by cyclic one-sided Jacobi rotations.
///
/// Runs on the taller orientation of `w`. A column pair is rotated while
/// `|aᵢ·aⱼ| > JACOBI_TOL · ‖aᵢ‖‖aⱼ‖`; the iteration stops after a sweep with
/// no rotation, or fails with [`Error::ConvergenceFailure`] after
/// [`MAX_SWEEPS`]. Singular vectors belonging to numerically zero singular
/// values, and the columns beyond `min(d1, d2)`, are completed by modified
/// Gram–Schmidt over the canonical basis in index order.
///
/// The result depends only on the input bytes.
pub fn svd<T: Scalar>(w: &DenseMatrix<T>) -> Result<SvdFactors<T>> {
    let (d1, d2) = w.shape();
    if d1 == 0 || d2 == 0 {
        return Err(Error::InvalidInput(format!("svd of empty {d1}x{d2} matrix")));
    }
    if !w.is_finite() {
        return Err(Error::InvalidInput("svd input has non-finite entries".into()));
    }

    let tall = d1 >= d2;
    let work = if tall { w.clone() } else { w.transpose() };
    let thin = jacobi_tall(&work)?;
    let (m, n) = work.shape();

    let left = complete_basis(thin.left, m)?;
    let right = thin.right;
    let (u_cols, mut v_cols) = if tall { (left, right) } else { (right, left) };
    let mut u_cols = u_cols;

    let d = n;
    for (k, col) in u_cols.iter_mut().enumerate() {
        if needs_flip(col) {
            negate(col);
            if k < d {
                negate(&mut v_cols[k]);
            }
        }
    }
    for col in v_cols.iter_mut().skip(d) {
        if needs_flip(col) {
            negate(col);
        }
    }

    let u = DenseMatrix::from_fn(d1, d1, |i, j| u_cols[j][i]);
    let vt = DenseMatrix::from_fn(d2, d2, |i, j| v_cols[i][j]);
    Ok(SvdFactors { u, sigma: thin.sigma, vt })
}

struct ThinJacobi<T> {
    /// Normalized left vectors, `None` where the singular value is negligible.
    left: Vec<Option<Vec<T>>>,
    /// Right vectors, a full orthonormal set of `n` columns.
    right: Vec<Vec<T>>,
    sigma: Vec<T>,
}

/// One-sided Jacobi on an `m×n` matrix with `m ≥ n`.
fn jacobi_tall<T: Scalar>(w: &DenseMatrix<T>) -> Result<ThinJacobi<T>> {
    let (m, n) = w.shape();
    debug_assert!(m >= n);
    let mut a: Vec<Vec<T>> = (0..n).map(|j| w.column(j)).collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();

    // Columns shorter than this are numerically zero and are left alone;
    // rotating them against large columns only churns rounding noise.
    let negligible = T::epsilon() * T::from_count(m) * w.frobenius_norm();
    let negligible_sq = negligible * negligible;
    let two = T::lit(2.0);

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let (alpha, beta, gamma) = {
                    let (ai, aj) = (&a[i], &a[j]);
                    (dot(ai, ai), dot(aj, aj), dot(ai, aj))
                };
                if alpha <= negligible_sq || beta <= negligible_sq {
                    continue;
                }
                if gamma.abs() <= T::JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (two * gamma);
                let t = zeta.signum() / (zeta.abs() + T::one().hypot(zeta));
                let c = T::one() / T::one().hypot(t);
                let s = c * t;
                rotate_pair(&mut a, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::ConvergenceFailure { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<T> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal singular values keep their pre-sort column order.
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap_or(Ordering::Equal));

    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for &k in &order {
        let s = norms[k];
        sigma.push(s);
        right.push(v[k].clone());
        if s > negligible && s > T::zero() {
            left.push(Some(a[k].iter().map(|&x| x / s).collect()));
        } else {
            left.push(None);
        }
    }
    Ok(ThinJacobi { left, right, sigma })
}

#[inline]
fn rotate_pair<T: Scalar>(cols: &mut [Vec<T>], i: usize, j: usize, c: T, s: T) {
    let (head, tail) = cols.split_at_mut(j);
    let (ci, cj) = (&mut head[i], &mut tail[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills the `None` slots and extends to `dim` columns with an orthonormal
/// completion built from canonical basis vectors in index order.
fn complete_basis<T: Scalar>(slots: Vec<Option<Vec<T>>>, dim: usize) -> Result<Vec<Vec<T>>> {
    let mut slots = slots;
    slots.resize(dim, None);
    let mut basis: Vec<Vec<T>> = slots.iter().flatten().cloned().collect();
    let accept = T::lit(COMPLETION_ACCEPT);
    let mut candidate = 0usize;
    for slot in slots.iter_mut().filter(|s| s.is_none()) {
        loop {
            if candidate >= dim {
                return Err(Error::InvalidInput(
                    "orthonormal completion ran out of candidates".into(),
                ));
            }
            let mut e = vec![T::zero(); dim];
            e[candidate] = T::one();
            candidate += 1;
            // Two Gram–Schmidt passes keep the completion orthogonal to
            // working precision.
            for _ in 0..2 {
                for q in &basis {
                    let p = dot(q, &e);
                    for (x, &qv) in e.iter_mut().zip(q) {
                        *x -= p * qv;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > accept {
                e.iter_mut().for_each(|x| *x /= norm);
                basis.push(e.clone());
                *slot = Some(e);
                break;
            }
        }
    }
    Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
}

fn needs_flip<T: Scalar>(col: &[T]) -> bool {
    let mut best = T::zero();
    let mut sign_negative = false;
    for &x in col {
        if x.abs() > best {
            best = x.abs();
            sign_negative = x < T::zero();
        }
    }
    sign_negative
}

fn negate<T: Scalar>(col: &mut [T]) {
    col.iter_mut().for_each(|x| *x = -*x);
}
