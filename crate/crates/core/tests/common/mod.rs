//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls the SVD under test.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use svfit::model::PretrainedWeights;
use svfit::rng::{self, SeededRng};
use svfit::tasks::blobs::cross_entropy;
use svfit::{AdapterLayer, Matrix, ToyBlockStack};

/// Central-difference step.
pub const H: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero gradients
/// from dominating.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn gaussian(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Textbook triple loop.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
}

pub fn frob(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn frob_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sum of `k` Gaussian outer products: rank exactly `k` with probability 1.
pub fn exact_rank(rng: &mut SeededRng, d1: usize, d2: usize, k: usize) -> Matrix {
    let a = gaussian(rng, d1, k);
    let b = gaussian(rng, k, d2);
    naive_matmul(&a, &b)
}

/// Largest singular value by power iteration on `WᵀW`.
pub fn power_top_sigma(w: &Matrix) -> f64 {
    let n = w.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut sigma = 0.0;
    for _ in 0..10_000 {
        let wv: Vec<f64> = (0..w.rows()).map(|i| (0..n).map(|j| w[(i, j)] * v[j]).sum()).collect();
        let mut next: Vec<f64> = (0..n).map(|j| (0..w.rows()).map(|i| w[(i, j)] * wv[i]).sum()).collect();
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        next.iter_mut().for_each(|x| *x /= norm);
        let prev = sigma;
        sigma = norm.sqrt();
        v = next;
        if (sigma - prev).abs() <= 1e-15 * sigma {
            break;
        }
    }
    sigma
}

/// Gram matrix `MᵀM` by the naive loop.
pub fn gram(m: &Matrix) -> Matrix {
    naive_matmul(&m.transpose(), m)
}

pub fn identity_deviation(g: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Rank-`r` competitor: half the time a product of Gaussian factors scaled
/// to `W`'s size, otherwise a perturbation of the factors of `best`.
pub fn rank_r_competitor(rng: &mut SeededRng, w: &Matrix, best_left: &Matrix, best_right: &Matrix, i: usize) -> Matrix {
    let (d1, d2, r) = (w.rows(), w.cols(), best_left.cols());
    if i.is_multiple_of(2) {
        let a = gaussian(rng, d1, r);
        let b = gaussian(rng, r, d2);
        let c = naive_matmul(&a, &b);
        let scale: f64 = rng.random_range(0.0..2.0) * frob(w) / frob(&c).max(1e-300);
        c.scale(scale)
    } else {
        let eps: f64 = rng.random_range(1e-4..1e-1);
        let a = best_left.add(&gaussian(rng, d1, r).scale(eps)).unwrap();
        let b = best_right.add(&gaussian(rng, r, d2).scale(eps)).unwrap();
        naive_matmul(&a, &b)
    }
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel = self.max_rel.max(rel_err(analytic, numeric));
        self.checked += 1;
    }
}

fn half_sq_err(y: &Matrix, t: &Matrix) -> f64 {
    0.5 * y.as_slice().iter().zip(t.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Analytic gradients of `½‖layer(x) − t‖²` against central differences,
/// over every trainable scalar and every input entry.
pub fn layer_grad_check(layer: &mut AdapterLayer, x: &Matrix, t: &Matrix) -> GradReport {
    let loss = |l: &AdapterLayer, x: &Matrix| half_sq_err(&l.forward(x).unwrap(), t);
    let y = layer.forward(x).unwrap();
    let grads = layer.backward(x, &y.sub(t).unwrap()).unwrap();
    let analytic: Vec<Vec<f64>> = grads.buffers().iter().map(|b| b.to_vec()).collect();
    let mut rep = GradReport::default();
    for (bi, a) in analytic.iter().enumerate() {
        for (k, &ak) in a.iter().enumerate() {
            let orig = layer.trainable_buffers_mut()[bi][k];
            layer.trainable_buffers_mut()[bi][k] = orig + H;
            let lp = loss(layer, x);
            layer.trainable_buffers_mut()[bi][k] = orig - H;
            let lm = loss(layer, x);
            layer.trainable_buffers_mut()[bi][k] = orig;
            rep.record(ak, (lp - lm) / (2.0 * H));
        }
    }
    let mut xp = x.clone();
    for k in 0..x.as_slice().len() {
        let orig = xp.as_slice()[k];
        xp.as_mut_slice()[k] = orig + H;
        let lp = loss(layer, &xp);
        xp.as_mut_slice()[k] = orig - H;
        let lm = loss(layer, &xp);
        xp.as_mut_slice()[k] = orig;
        rep.record(grads.d_input.as_slice()[k], (lp - lm) / (2.0 * H));
    }
    rep
}

/// Mean cross-entropy of the stack against `labels`, checked over every
/// trainable buffer (head included) and every input token entry.
pub fn stack_grad_check(stack: &mut ToyBlockStack, xs: &[Matrix], labels: &[usize]) -> GradReport {
    let loss = |s: &ToyBlockStack, xs: &[Matrix]| cross_entropy(&s.predict(xs).unwrap(), labels).0;
    let (logits, trace) = stack.forward(xs).unwrap();
    let (_, g_out) = cross_entropy(&logits, labels);
    let grads = stack.backward(trace, &g_out).unwrap();
    let analytic: Vec<Vec<f64>> = grads.buffers(true).iter().map(|b| b.to_vec()).collect();
    let mut rep = GradReport::default();
    for (bi, a) in analytic.iter().enumerate() {
        for (k, &ak) in a.iter().enumerate() {
            let orig = stack.trainable_buffers_mut(true)[bi].0[k];
            stack.trainable_buffers_mut(true)[bi].0[k] = orig + H;
            let lp = loss(stack, xs);
            stack.trainable_buffers_mut(true)[bi].0[k] = orig - H;
            let lm = loss(stack, xs);
            stack.trainable_buffers_mut(true)[bi].0[k] = orig;
            rep.record(ak, (lp - lm) / (2.0 * H));
        }
    }
    let mut xp = xs.to_vec();
    for (s, d_in) in grads.d_inputs.iter().enumerate() {
        for k in 0..d_in.as_slice().len() {
            let orig = xp[s].as_slice()[k];
            xp[s].as_mut_slice()[k] = orig + H;
            let lp = loss(stack, &xp);
            xp[s].as_mut_slice()[k] = orig - H;
            let lm = loss(stack, &xp);
            xp[s].as_mut_slice()[k] = orig;
            rep.record(d_in.as_slice()[k], (lp - lm) / (2.0 * H));
        }
    }
    rep
}

/// Gaussian "pre-trained" weights with entries `N(0, 1/d)`.
pub fn random_pretrained(seed: u64, n_blocks: usize, d: usize) -> PretrainedWeights<f64> {
    let mut rng = rng::seeded(seed);
    let std = 1.0 / (d as f64).sqrt();
    PretrainedWeights {
        blocks: (0..n_blocks).map(|_| std::array::from_fn(|_| gaussian(&mut rng, d, d).scale(std))).collect(),
    }
}

/// Batch of `n` Gaussian `d×len` sequences with cycling labels.
pub fn token_batch(seed: u64, n: usize, d: usize, len: usize, classes: usize) -> (Vec<Matrix>, Vec<usize>) {
    let mut rng = rng::seeded(seed);
    ((0..n).map(|_| gaussian(&mut rng, d, len)).collect(), (0..n).map(|i| i % classes).collect())
}
