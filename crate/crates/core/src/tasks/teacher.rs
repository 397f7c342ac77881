//! Teacher–student regression with a controlled perturbation of the
//! pre-trained matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::matrix::DenseMatrix;
use crate::rng;

type Matrix = DenseMatrix<f64>;

const W0_STREAM: u64 = 10;
const PERTURB_STREAM: u64 = 11;
const DATA_STREAM: u64 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// Rescale the top singular values only; singular vectors are shared.
    SigmaOnly,
    /// Singular-value rescaling plus a dense Gaussian term.
    General,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherStudent {
    /// Pre-trained matrix the student starts from.
    pub w0: Matrix,
    /// Target the data is generated with.
    pub w_star: Matrix,
    /// Perturbed top singular values (before re-sorting).
    pub perturbed_sigma: Vec<f64>,
    /// `d2×n`, one sample per column.
    pub inputs: Matrix,
    /// `d1×n`, `w_star · inputs`.
    pub targets: Matrix,
}

/// Draws `w0 ~ N(0, 1/d2)`, multiplies its top `r` singular values by
/// `1 + scale·ξ` with `ξ ~ U(-1, 1)`, and for [`Perturbation::General`] adds
/// `scale · N(0, 1/d2)` entrywise. Inputs are standard normal.
pub fn gen_teacher_student(
    seed: u64,
    d1: usize,
    d2: usize,
    r: usize,
    perturb: Perturbation,
    scale: f64,
    n_samples: usize,
) -> Result<TeacherStudent> {
    crate::linalg::check_rank(r, d1.min(d2))?;
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput(format!("perturbation scale {scale}")));
    }
    let std = 1.0 / (d2 as f64).sqrt();
    let w0 = Matrix::random_normal(d1, d2, std, &mut rng::derived(seed, W0_STREAM));
    let f = svd(&w0)?;

    let mut prng = rng::derived(seed, PERTURB_STREAM);
    let mut sigma = f.sigma.clone();
    for s in sigma.iter_mut().take(r) {
        *s *= 1.0 + scale * prng.random_range(-1.0..=1.0);
    }
    let d = sigma.len();
    let mut w_star = f.u.columns(0..d).scale_columns(&sigma).matmul(&f.vt.transpose().columns(0..d).transpose())?;
    if perturb == Perturbation::General {
        let dense = Matrix::random_normal(d1, d2, std * scale, &mut prng);
        w_star.add_assign(&dense)?;
    }

    let inputs = Matrix::random_normal(d2, n_samples, 1.0, &mut rng::derived(seed, DATA_STREAM));
    let targets = w_star.matmul(&inputs)?;
    Ok(TeacherStudent { w0, w_star, perturbed_sigma: sigma[..r].to_vec(), inputs, targets })
}
