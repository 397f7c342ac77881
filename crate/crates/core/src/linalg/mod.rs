//! Deterministic dense linear algebra: Jacobi SVD, the fundamental-subspace
//! split at a cut rank, best rank-r approximation, and spectral energy.

mod energy;
mod subspace;
mod svd;

pub use energy::{energy_curve, energy_ratio, rank_at, spectrum_report, EnergyPoint, EnergyRatio, SpectrumReport, REPORT_FRACTIONS};
pub use subspace::{rank_r_approx, split_subspaces, FundamentalSubspaces};
pub use svd::{svd, SvdFactors, MAX_SWEEPS};

use crate::error::{Error, Result};

pub(crate) fn check_rank(rank: usize, max: usize) -> Result<()> {
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    Ok(())
}
