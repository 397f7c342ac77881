//! Truncated-SVD image reconstruction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_rank, energy_curve, svd, EnergyRatio};
use crate::matrix::DenseMatrix;
use crate::rng;

type Matrix = DenseMatrix<f64>;

/// Reported MSE values are floored here before converting to PSNR, so an
/// exact reconstruction reads 300 dB instead of infinity.
pub const MSE_FLOOR: f64 = 1e-30;

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    /// Pixels outside `[0, 1]` are clamped; non-finite pixels are rejected.
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite pixel".into()));
        }
        let pixels = pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        Ok(Self { width, height, pixels })
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::new(m.cols(), m.rows(), m.as_slice().to_vec())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// `height×width` pixel matrix.
    pub fn to_matrix(&self) -> Matrix {
        DenseMatrix::from_vec(self.height, self.width, self.pixels.clone()).expect("length checked")
    }
}

/// Deterministic 256×256 structured test image: smooth gradients and two
/// Gaussian blobs, a five-armed star, a fine separable texture, and a little
/// seeded noise so that every singular value is non-zero.
pub fn test_image() -> GrayImage {
    const N: usize = 256;
    use rand::Rng;
    let mut noise = rng::seeded(0x5eed_1a6e);
    let tau = std::f64::consts::TAU;
    let mut pixels = Vec::with_capacity(N * N);
    for y in 0..N {
        for x in 0..N {
            let u = x as f64 / (N - 1) as f64;
            let v = y as f64 / (N - 1) as f64;
            let mut p = 0.45 + 0.2 * u - 0.1 * v;
            p += 0.15 * (tau * (1.5 * u + 0.5 * v)).sin();
            p += 0.12 * (-((u - 0.3).powi(2) + (v - 0.6).powi(2)) / 0.02).exp();
            p += 0.08 * (-((u - 0.7).powi(2) + (v - 0.3).powi(2)) / 0.01).exp();
            let (dx, dy) = (u - 0.55, v - 0.55);
            let radius = 0.15 + 0.05 * (5.0 * dy.atan2(dx)).cos();
            if dx.hypot(dy) < radius {
                p += 0.1;
            }
            p += 0.02 * (40.0 * u).sin() * (37.0 * v).sin();
            p += noise.random_range(-0.01..0.01);
            pixels.push(p);
        }
    }
    GrayImage::new(N, N, pixels).expect("generated pixels are finite")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    /// Largest `r` singular triples.
    Top,
    /// Smallest `r` singular triples.
    Bottom,
}

impl Order {
    pub fn name(self) -> &'static str {
        match self {
            Order::Top => "top",
            Order::Bottom => "bottom",
        }
    }
}

impl std::str::FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Order::Top),
            "bottom" => Ok(Order::Bottom),
            _ => Err(Error::InvalidInput(format!("unknown order `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    /// Clamped reconstruction.
    pub image: GrayImage,
    /// Mean squared error of the unclamped rank-`r` sum against the original.
    pub mse: f64,
    /// `10·log10(1 / max(mse, MSE_FLOOR))`, peak 1.0.
    pub psnr: f64,
    /// Spectral energy carried by the selected triples.
    pub energy: EnergyRatio,
}

/// Peak signal-to-noise ratio for peak 1.0.
pub fn psnr_from_mse(mse: f64) -> f64 {
    -10.0 * mse.max(MSE_FLOOR).log10()
}

/// SVD of the pixel matrix, for reuse across ranks.
pub fn image_svd(img: &GrayImage) -> Result<crate::linalg::SvdFactors<f64>> {
    svd(&img.to_matrix())
}

/// Reconstruction from `r` singular triples chosen by `order`.
pub fn reconstruct_image(img: &GrayImage, r: usize, order: Order) -> Result<Reconstruction> {
    check_rank(r, img.width.min(img.height))?;
    reconstruct_with(img, &image_svd(img)?, r, order)
}

/// [`reconstruct_image`] with precomputed factors of `img`.
pub fn reconstruct_with(
    img: &GrayImage,
    factors: &crate::linalg::SvdFactors<f64>,
    r: usize,
    order: Order,
) -> Result<Reconstruction> {
    let d = factors.sigma.len();
    check_rank(r, d)?;
    let range = match order {
        Order::Top => 0..r,
        Order::Bottom => d - r..d,
    };
    let approx = factors.partial_sum(range);
    let original = img.to_matrix();
    let mse = original
        .as_slice()
        .iter()
        .zip(approx.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / (img.width * img.height) as f64;

    let curve = energy_curve(&factors.sigma);
    let energy = match order {
        Order::Top => curve[r - 1],
        Order::Bottom if r == d => curve[d - 1],
        Order::Bottom => {
            let kept = curve[d - r - 1];
            EnergyRatio { nuclear: 1.0 - kept.nuclear, frobenius: 1.0 - kept.frobenius }
        }
    };
    Ok(Reconstruction { image: GrayImage::from_matrix(&approx)?, mse, psnr: psnr_from_mse(mse), energy })
}

/// Reconstructions at several ranks from a single decomposition.
pub fn reconstruct_ranks(img: &GrayImage, ranks: &[usize], order: Order) -> Result<Vec<Reconstruction>> {
    let max = img.width.min(img.height);
    for &r in ranks {
        check_rank(r, max)?;
    }
    let factors = image_svd(img)?;
    ranks.iter().map(|&r| reconstruct_with(img, &factors, r, order)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_image() -> GrayImage {
        GrayImage::new(12, 10, (0..120).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn full_rank_is_exact() {
        let img = small_image();
        let rec = reconstruct_image(&img, 10, Order::Top).unwrap();
        assert!(rec.psnr >= 100.0);
        assert_eq!(rec.energy.frobenius, 1.0);
        let bottom = reconstruct_image(&img, 10, Order::Bottom).unwrap();
        assert!(bottom.psnr >= 100.0);
    }

    #[test]
    fn rank_one_image() {
        let u: Vec<f64> = (0..9).map(|i| 0.2 + 0.05 * i as f64).collect();
        let v: Vec<f64> = (0..11).map(|j| 0.5 + 0.04 * j as f64).collect();
        let m = DenseMatrix::from_fn(9, 11, |i, j| u[i] * v[j]);
        let img = GrayImage::from_matrix(&m).unwrap();
        assert!(reconstruct_image(&img, 1, Order::Top).unwrap().psnr >= 100.0);
    }

    #[test]
    fn mse_matches_spectral_tail() {
        let img = small_image();
        let f = image_svd(&img).unwrap();
        for r in 1..10 {
            let rec = reconstruct_with(&img, &f, r, Order::Top).unwrap();
            let tail: f64 = f.sigma[r..].iter().map(|s| s * s).sum::<f64>() / 120.0;
            assert!((rec.mse - tail).abs() <= 1e-9 * tail + 1e-14, "r={r}: {} vs {tail}", rec.mse);
        }
    }

    #[test]
    fn rank_bounds() {
        let img = small_image();
        assert!(matches!(reconstruct_image(&img, 0, Order::Top), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(reconstruct_image(&img, 11, Order::Bottom), Err(Error::RankOutOfRange { .. })));
    }

    #[test]
    fn pixels_are_clamped() {
        let img = GrayImage::new(2, 1, vec![-0.5, 1.5]).unwrap();
        assert_eq!(img.pixels(), &[0.0, 1.0]);
        assert!(GrayImage::new(2, 1, vec![0.0, f64::NAN]).is_err());
        assert!(GrayImage::new(2, 2, vec![0.0]).is_err());
    }

    #[test]
    fn test_image_is_deterministic() {
        let a = test_image();
        assert_eq!((a.width(), a.height()), (256, 256));
        assert_eq!(a, test_image());
    }
}
