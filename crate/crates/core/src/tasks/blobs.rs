//! Synthetic sequence classification: tokens scattered around per-class
//! means.

use crate::matrix::DenseMatrix;
use crate::rng;

type Matrix = DenseMatrix<f64>;

const MEANS_STREAM: u64 = 20;
const SAMPLES_STREAM: u64 = 21;

#[derive(Clone, Debug, PartialEq)]
pub struct BlobsDataset {
    /// `d×seq_len` token matrices.
    pub inputs: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl BlobsDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Class means `~ N(0, I)`; each token is its class mean plus `N(0, noise²·I)`.
/// Labels cycle through the classes. `stream` separates train and eval draws
/// that share the same means.
pub fn gen_blobs(seed: u64, d: usize, classes: usize, seq_len: usize, n: usize, noise: f64, stream: u64) -> BlobsDataset {
    let means = Matrix::random_normal(classes, d, 1.0, &mut rng::derived(seed, MEANS_STREAM));
    let mut rng = rng::derived(seed, SAMPLES_STREAM + stream);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let label = k % classes;
        let mut x = Matrix::random_normal(d, seq_len, noise, &mut rng);
        for i in 0..d {
            x.row_mut(i).iter_mut().for_each(|v| *v += means[(label, i)]);
        }
        inputs.push(x);
        labels.push(label);
    }
    BlobsDataset { inputs, labels }
}

/// Mean softmax cross-entropy over the rows of `logits`, and its gradient.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        loss += sum.ln() + max - row[label];
        for (c, g) in grad.row_mut(b).iter_mut().enumerate() {
            let p = (row[c] - max).exp() / sum;
            *g = (p - if c == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Fraction of rows whose arg-max (first on ties) equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(b, &label)| {
            let row = logits.row(b);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (c, &z)| if z > row[best] { c } else { best });
            best == label
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}
