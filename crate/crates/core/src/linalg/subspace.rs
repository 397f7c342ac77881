use crate::error::Result;
use crate::linalg::{check_rank, svd, SvdFactors};
use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

/// Column partition of an SVD at cut rank `r`.
///
/// `u_r`/`v_r` span the ranges of `W`/`Wᵀ` carried by the top `r` singular
/// values; `u_e`/`v_e` hold the remaining columns of `U`/`V`. When `W` has
/// exact rank `r`, `v_e` spans the null space of `W` and `u_e` that of `Wᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct FundamentalSubspaces<T> {
    pub cut_rank: usize,
    pub u_r: DenseMatrix<T>,
    pub sigma_r: Vec<T>,
    pub v_r: DenseMatrix<T>,
    pub u_e: DenseMatrix<T>,
    pub sigma_e: Vec<T>,
    pub v_e: DenseMatrix<T>,
}

impl<T: Scalar> FundamentalSubspaces<T> {
    /// `U_r · diag(Σ_r) · V_rᵀ`.
    pub fn principal(&self) -> DenseMatrix<T> {
        self.u_r
            .scale_columns(&self.sigma_r)
            .matmul_tr(&self.v_r)
            .expect("partition shapes are consistent")
    }

    /// `U_e · diag(Σ_e) · V_eᵀ` over the trailing singular triples.
    pub fn residual(&self) -> DenseMatrix<T> {
        let k = self.sigma_e.len();
        self.u_e
            .columns(0..k)
            .scale_columns(&self.sigma_e)
            .matmul_tr(&self.v_e.columns(0..k))
            .expect("partition shapes are consistent")
    }
}

/// Splits `U`, `Σ` and `V` after the first `r` singular triples.
pub fn split_subspaces<T: Scalar>(f: &SvdFactors<T>, r: usize) -> Result<FundamentalSubspaces<T>> {
    let d = f.sigma.len();
    check_rank(r, d)?;
    let (d1, d2) = f.dims();
    let v = f.v();
    Ok(FundamentalSubspaces {
        cut_rank: r,
        u_r: f.u.columns(0..r),
        sigma_r: f.sigma[..r].to_vec(),
        v_r: v.columns(0..r),
        u_e: f.u.columns(r..d1),
        sigma_e: f.sigma[r..].to_vec(),
        v_e: v.columns(r..d2),
    })
}

/// Best rank-`r` approximation `U_r · diag(Σ_r) · V_rᵀ` in the Frobenius and
/// spectral norms.
pub fn rank_r_approx<T: Scalar>(w: &DenseMatrix<T>, r: usize) -> Result<DenseMatrix<T>> {
    check_rank(r, w.rows().min(w.cols()))?;
    let f = svd(w)?;
    Ok(f.partial_sum(0..r))
}
