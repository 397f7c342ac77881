use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::check_rank;
use crate::scalar::Scalar;

/// Fraction of spectral mass captured by the leading singular values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRatio {
    /// `Σ_{i≤r} σᵢ / Σ σᵢ`
    pub nuclear: f64,
    /// `Σ_{i≤r} σᵢ² / Σ σᵢ²`
    pub frobenius: f64,
}

/// Nuclear and Frobenius energy captured by the top `r` entries of a
/// descending, non-negative spectrum. An all-zero spectrum yields `(1, 1)`.
pub fn energy_ratio<T: Scalar>(sigma: &[T], r: usize) -> Result<EnergyRatio> {
    check_rank(r, sigma.len())?;
    validate(sigma)?;
    Ok(energy_curve(sigma)[r - 1])
}

/// Energy ratios for every `r` in `1..=len(sigma)`; element `k` is `r = k+1`.
///
/// Prefix sums are shared with the totals so the last entry is exactly 1.
pub fn energy_curve<T: Scalar>(sigma: &[T]) -> Vec<EnergyRatio> {
    let mut nuclear = Vec::with_capacity(sigma.len());
    let mut frob = Vec::with_capacity(sigma.len());
    let (mut acc1, mut acc2) = (0.0f64, 0.0f64);
    for s in sigma {
        let s = s.to_f64_lossy();
        acc1 += s;
        acc2 += s * s;
        nuclear.push(acc1);
        frob.push(acc2);
    }
    nuclear
        .iter()
        .zip(&frob)
        .map(|(&n, &f)| EnergyRatio {
            nuclear: if acc1 > 0.0 { n / acc1 } else { 1.0 },
            frobenius: if acc2 > 0.0 { f / acc2 } else { 1.0 },
        })
        .collect()
}

/// Fractions of the spectrum length at which [`spectrum_report`] samples
/// the energy curves.
pub const REPORT_FRACTIONS: [f64; 4] = [0.01, 0.10, 0.50, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyPoint {
    pub fraction: f64,
    /// `max(1, ceil(fraction·n))`
    pub r: usize,
    pub nuclear: f64,
    pub frobenius: f64,
}

/// Summary printed by `svd-analyze`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub rows: usize,
    pub cols: usize,
    /// Leading singular values, at most `top` of them.
    pub top: Vec<f64>,
    pub energy: Vec<EnergyPoint>,
}

/// Top singular values of a `rows×cols` matrix and its energy ratios at
/// [`REPORT_FRACTIONS`] of the spectrum length.
pub fn spectrum_report<T: Scalar>(rows: usize, cols: usize, sigma: &[T], top: usize) -> Result<SpectrumReport> {
    validate(sigma)?;
    if sigma.is_empty() {
        return Err(Error::InvalidInput("empty spectrum".into()));
    }
    let n = sigma.len();
    let curve = energy_curve(sigma);
    let energy = REPORT_FRACTIONS
        .iter()
        .map(|&fraction| {
            let r = rank_at(fraction, n);
            EnergyPoint { fraction, r, nuclear: curve[r - 1].nuclear, frobenius: curve[r - 1].frobenius }
        })
        .collect();
    Ok(SpectrumReport {
        rows,
        cols,
        top: sigma.iter().take(top).map(|s| s.to_f64_lossy()).collect(),
        energy,
    })
}

/// `ceil(fraction·n)` clamped to `1..=n`, snapping products within 1e-9 of
/// an integer so that e.g. 10% of 30 is 3 and not 4.
pub fn rank_at(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let snapped = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (snapped as usize).clamp(1, n)
}

fn validate<T: Scalar>(sigma: &[T]) -> Result<()> {
    if sigma.iter().any(|s| !s.is_finite() || *s < T::zero()) {
        return Err(Error::InvalidInput("spectrum must be finite and non-negative".into()));
    }
    if sigma.windows(2).any(|p| p[0] < p[1]) {
        return Err(Error::InvalidInput("spectrum must be descending".into()));
    }
    Ok(())
}
