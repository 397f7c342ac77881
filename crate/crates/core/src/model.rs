//! Toy transformer-style host network with adapters on the query and value
//! projections.
//!
//! Each block applies single-head attention with a residual connection:
//!
//! ```text
//! Q = W_q X,  K = W_k X,  V = W_v X          (d×T per sequence)
//! A = softmax_rows(QᵀK / √d)                  (T×T)
//! X ← X + W_o · V Aᵀ
//! ```
//!
//! The readout mean-pools the tokens of each sequence and applies the `d×c`
//! head: `out = pooled · head`. There are no biases and no normalization
//! layers. `W_k`, `W_o` are always frozen; `W_q`, `W_v` are [`AdapterLayer`]s.

use crate::adapt::{AdapterLayer, Method, ParamGrads};
use crate::error::{Error, Result};
use crate::io::TensorSet;
use crate::matrix::{dot, DenseMatrix};
use crate::rng;
use crate::scalar::Scalar;

const LORA_STREAM: u64 = 1;
const HEAD_STREAM: u64 = 2;

/// Dense weights of a pre-trained stack: `[w_q, w_k, w_v, w_o]` per block.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedWeights<T> {
    pub blocks: Vec<[DenseMatrix<T>; 4]>,
}

const PROJECTIONS: [&str; 4] = ["w_q", "w_k", "w_v", "w_o"];

impl<T: Scalar> PretrainedWeights<T> {
    pub fn d_model(&self) -> usize {
        self.blocks.first().map_or(0, |b| b[0].rows())
    }

    fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::MissingTensor("block0.w_q".into()));
        }
        let d = self.d_model();
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, w) in PROJECTIONS.iter().zip(block) {
                if w.shape() != (d, d) {
                    return Err(Error::DimensionMismatch(format!(
                        "block{i}.{name} is {:?}, expected {d}x{d}",
                        w.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

impl PretrainedWeights<f64> {
    /// Reads `block{i}.w_q|w_k|w_v|w_o` for `i = 0, 1, …` until `block{i}.w_q`
    /// is absent.
    pub fn from_tensors(set: &TensorSet) -> Result<Self> {
        let mut blocks = Vec::new();
        while set.get(&format!("block{}.w_q", blocks.len())).is_some() {
            let i = blocks.len();
            let get = |name: &str| set.require(&format!("block{i}.{name}")).cloned();
            blocks.push([get("w_q")?, get("w_k")?, get("w_v")?, get("w_o")?]);
        }
        let weights = Self { blocks };
        weights.validate()?;
        Ok(weights)
    }

    pub fn to_tensors(&self) -> TensorSet {
        let mut set = TensorSet::new();
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, w) in PROJECTIONS.iter().zip(block) {
                set.insert(format!("block{i}.{name}"), w.clone()).expect("names are unique");
            }
        }
        set
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub q: AdapterLayer<T>,
    pub w_k: DenseMatrix<T>,
    pub v: AdapterLayer<T>,
    pub w_o: DenseMatrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBlockStack<T> {
    blocks: Vec<Block<T>>,
    head: DenseMatrix<T>,
    /// Bumped on every mutable access to parameters; traces record it.
    version: u64,
}

/// Activations retained by [`ToyBlockStack::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    version: u64,
    seq_lens: Vec<usize>,
    blocks: Vec<BlockTrace<T>>,
    pooled: DenseMatrix<T>,
}

#[derive(Clone, Debug)]
struct BlockTrace<T> {
    x: DenseMatrix<T>,
    q: DenseMatrix<T>,
    k: DenseMatrix<T>,
    v: DenseMatrix<T>,
    attn: Vec<DenseMatrix<T>>,
}

/// Gradients for every trainable buffer of a stack plus the input.
#[derive(Clone, Debug, PartialEq)]
pub struct StackGradients<T> {
    /// `[block0.q, block0.v, block1.q, …]`.
    pub adapters: Vec<ParamGrads<T>>,
    pub head: DenseMatrix<T>,
    /// One `d×T` gradient per input sequence.
    pub d_inputs: Vec<DenseMatrix<T>>,
}

impl<T: Scalar> StackGradients<T> {
    /// Gradient buffers in the order of [`ToyBlockStack::trainable_buffers_mut`].
    pub fn buffers(&self, include_head: bool) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for g in &self.adapters {
            match g {
                ParamGrads::Sigma(s) => out.push(s),
                ParamGrads::LowRank { d_a, d_b } => {
                    out.push(d_a.as_slice());
                    out.push(d_b.as_slice());
                }
                ParamGrads::Dense(d) => out.push(d.as_slice()),
                ParamGrads::None => {}
            }
        }
        if include_head {
            out.push(self.head.as_slice());
        }
        out
    }
}

/// Trainable adapter scalars of a stack with adapters on Q and V, computed
/// from shapes alone. The head is excluded.
pub fn adapter_param_count(method: Method, n_blocks: usize, d_model: usize, r: usize) -> usize {
    2 * n_blocks * method.trainable_params(d_model, d_model, r)
}

impl<T: Scalar> ToyBlockStack<T> {
    /// Wraps `W_q`/`W_v` of every pre-trained block in adapters of `method`
    /// and draws a fresh `d×classes` head. LoRA factors and the head come
    /// from separate streams of `seed`.
    pub fn build(pretrained: &PretrainedWeights<T>, method: Method, r: usize, classes: usize, seed: u64) -> Result<Self> {
        pretrained.validate()?;
        if classes == 0 {
            return Err(Error::InvalidInput("stack needs at least one output".into()));
        }
        let d = pretrained.d_model();
        let mut lora_rng = rng::derived(seed, LORA_STREAM);
        let blocks = pretrained
            .blocks
            .iter()
            .map(|[w_q, w_k, w_v, w_o]| {
                Ok(Block {
                    q: AdapterLayer::new(method, w_q, r, &mut lora_rng)?,
                    w_k: w_k.clone(),
                    v: AdapterLayer::new(method, w_v, r, &mut lora_rng)?,
                    w_o: w_o.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = DenseMatrix::random_normal(d, classes, 1.0 / (d as f64).sqrt(), &mut rng::derived(seed, HEAD_STREAM));
        Ok(Self { blocks, head, version: 0 })
    }

    pub fn from_parts(blocks: Vec<Block<T>>, head: DenseMatrix<T>) -> Result<Self> {
        let d = head.rows();
        if blocks.is_empty() {
            return Err(Error::InvalidInput("stack needs at least one block".into()));
        }
        for (i, b) in blocks.iter().enumerate() {
            let ok = b.q.dims() == (d, d) && b.v.dims() == (d, d) && b.w_k.shape() == (d, d) && b.w_o.shape() == (d, d);
            if !ok {
                return Err(Error::DimensionMismatch(format!("block {i} does not match d_model {d}")));
            }
        }
        Ok(Self { blocks, head, version: 0 })
    }

    pub fn d_model(&self) -> usize {
        self.head.rows()
    }

    pub fn classes(&self) -> usize {
        self.head.cols()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block<T>] {
        &self.blocks
    }

    pub fn head(&self) -> &DenseMatrix<T> {
        &self.head
    }

    /// Adapters in `[block0.q, block0.v, block1.q, …]` order.
    pub fn adapters(&self) -> impl Iterator<Item = &AdapterLayer<T>> {
        self.blocks.iter().flat_map(|b| [&b.q, &b.v])
    }

    /// Trainable adapter scalars (head excluded).
    pub fn param_count(&self) -> usize {
        self.adapters().map(AdapterLayer::param_count).sum()
    }

    /// Mutable trainable buffers, each tagged with whether it is an SVFit
    /// singular-value vector. Invalidates outstanding traces.
    pub fn trainable_buffers_mut(&mut self, include_head: bool) -> Vec<(&mut [T], bool)> {
        self.version += 1;
        let mut out = Vec::new();
        for block in &mut self.blocks {
            for layer in [&mut block.q, &mut block.v] {
                let is_sigma = layer.method() == Method::Svfit;
                out.extend(layer.trainable_buffers_mut().into_iter().map(|b| (b, is_sigma)));
            }
        }
        if include_head {
            out.push((self.head.as_mut_slice(), false));
        }
        out
    }

    /// Every frozen buffer: `W_k`, `W_o` and the frozen parts of the adapters.
    pub fn frozen_buffers(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.w_k.as_slice());
            out.push(b.w_o.as_slice());
            out.extend(b.q.frozen_buffers());
            out.extend(b.v.frozen_buffers());
        }
        out
    }

    fn concat_inputs(&self, xs: &[DenseMatrix<T>]) -> Result<(DenseMatrix<T>, Vec<usize>)> {
        let d = self.d_model();
        if xs.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let mut lens = Vec::with_capacity(xs.len());
        for (b, x) in xs.iter().enumerate() {
            if x.rows() != d || x.cols() == 0 {
                return Err(Error::DimensionMismatch(format!(
                    "sequence {b} is {:?}, expected {d}×T with T ≥ 1",
                    x.shape()
                )));
            }
            lens.push(x.cols());
        }
        let total: usize = lens.iter().sum();
        let mut out = DenseMatrix::zeros(d, total);
        let mut offset = 0;
        for x in xs {
            for i in 0..d {
                out.row_mut(i)[offset..offset + x.cols()].copy_from_slice(x.row(i));
            }
            offset += x.cols();
        }
        Ok((out, lens))
    }

    /// Forward pass over a batch of `d×T` token matrices; returns the
    /// `batch×classes` outputs and the trace needed by [`Self::backward`].
    pub fn forward(&self, xs: &[DenseMatrix<T>]) -> Result<(DenseMatrix<T>, ForwardTrace<T>)> {
        let (mut x, seq_lens) = self.concat_inputs(xs)?;
        let d = self.d_model();
        let inv_sqrt_d = T::one() / T::from_count(d).sqrt();
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (bi, block) in self.blocks.iter().enumerate() {
            let q = block.q.forward(&x)?;
            let k = block.w_k.matmul(&x)?;
            let v = block.v.forward(&x)?;
            let mut z = DenseMatrix::zeros(d, x.cols());
            let mut attn = Vec::with_capacity(seq_lens.len());
            let mut offset = 0;
            for &len in &seq_lens {
                let qs = q.columns(offset..offset + len).transpose();
                let ks = k.columns(offset..offset + len).transpose();
                let vs = v.columns(offset..offset + len).transpose();
                let mut a = qs.matmul_tr(&ks)?.scale(inv_sqrt_d);
                softmax_rows(&mut a);
                // Z_t = Σ_s A[t,s] v_s, token-major.
                let zs = a.matmul(&vs)?;
                for t in 0..len {
                    for i in 0..d {
                        z[(i, offset + t)] = zs[(t, i)];
                    }
                }
                attn.push(a);
                offset += len;
            }
            let mut next = x.clone();
            next.add_assign(&block.w_o.matmul(&z)?)?;
            if !next.is_finite() {
                return Err(Error::NonFiniteActivation(format!("block {bi} output")));
            }
            traces.push(BlockTrace { x, q, k, v, attn });
            x = next;
        }

        let mut pooled = DenseMatrix::zeros(seq_lens.len(), d);
        let mut offset = 0;
        for (b, &len) in seq_lens.iter().enumerate() {
            let inv_len = T::one() / T::from_count(len);
            for i in 0..d {
                let s: T = x.row(i)[offset..offset + len].iter().copied().sum();
                pooled[(b, i)] = s * inv_len;
            }
            offset += len;
        }
        let out = pooled.matmul(&self.head)?;
        if !out.is_finite() {
            return Err(Error::NonFiniteActivation("readout".into()));
        }
        Ok((out, ForwardTrace { version: self.version, seq_lens, blocks: traces, pooled }))
    }

    /// Outputs only.
    pub fn predict(&self, xs: &[DenseMatrix<T>]) -> Result<DenseMatrix<T>> {
        self.forward(xs).map(|(out, _)| out)
    }

    /// Back-propagates `grad_out = ∂L/∂out` through the trace of the matching
    /// forward call. The trace is consumed.
    pub fn backward(&self, trace: ForwardTrace<T>, grad_out: &DenseMatrix<T>) -> Result<StackGradients<T>> {
        if trace.version != self.version || trace.blocks.len() != self.blocks.len() {
            return Err(Error::StaleTrace { trace: trace.version, stack: self.version });
        }
        let batch = trace.seq_lens.len();
        if grad_out.shape() != (batch, self.classes()) {
            return Err(Error::DimensionMismatch(format!(
                "grad_out {:?}, expected {:?}",
                grad_out.shape(),
                (batch, self.classes())
            )));
        }
        let d = self.d_model();
        let inv_sqrt_d = T::one() / T::from_count(d).sqrt();
        let total: usize = trace.seq_lens.iter().sum();

        let d_head = trace.pooled.tr_matmul(grad_out)?;
        let d_pooled = grad_out.matmul_tr(&self.head)?;
        let mut dx = DenseMatrix::zeros(d, total);
        let mut offset = 0;
        for (b, &len) in trace.seq_lens.iter().enumerate() {
            let inv_len = T::one() / T::from_count(len);
            for i in 0..d {
                let g = d_pooled[(b, i)] * inv_len;
                dx.row_mut(i)[offset..offset + len].iter_mut().for_each(|v| *v = g);
            }
            offset += len;
        }

        let mut adapter_grads = vec![ParamGrads::None; 2 * self.blocks.len()];
        for (bi, (block, bt)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            // x_out = x + W_o Z
            let dz = block.w_o.tr_matmul(&dx)?;
            let mut dq = DenseMatrix::zeros(d, total);
            let mut dk = DenseMatrix::zeros(d, total);
            let mut dv = DenseMatrix::zeros(d, total);
            let mut offset = 0;
            for (a, &len) in bt.attn.iter().zip(&trace.seq_lens) {
                let cols = offset..offset + len;
                let dzs = dz.columns(cols.clone()).transpose(); // T×d
                let vs = bt.v.columns(cols.clone()).transpose();
                let qs = bt.q.columns(cols.clone()).transpose();
                let ks = bt.k.columns(cols.clone()).transpose();
                // Z_t = Σ_s A[t,s] v_s
                let da = dzs.matmul_tr(&vs)?;
                let dvs = a.tr_matmul(&dzs)?;
                let ds = softmax_rows_backward(a, &da).scale(inv_sqrt_d);
                let dqs = ds.matmul(&ks)?;
                let dks = ds.tr_matmul(&qs)?;
                for t in 0..len {
                    for i in 0..d {
                        dq[(i, offset + t)] = dqs[(t, i)];
                        dk[(i, offset + t)] = dks[(t, i)];
                        dv[(i, offset + t)] = dvs[(t, i)];
                    }
                }
                offset += len;
            }
            let gq = block.q.backward(&bt.x, &dq)?;
            let gv = block.v.backward(&bt.x, &dv)?;
            dx.add_assign(&gq.d_input)?;
            dx.add_assign(&block.w_k.tr_matmul(&dk)?)?;
            dx.add_assign(&gv.d_input)?;
            adapter_grads[2 * bi] = gq.params;
            adapter_grads[2 * bi + 1] = gv.params;
        }

        let mut d_inputs = Vec::with_capacity(batch);
        let mut offset = 0;
        for &len in &trace.seq_lens {
            d_inputs.push(dx.columns(offset..offset + len));
            offset += len;
        }
        Ok(StackGradients { adapters: adapter_grads, head: d_head, d_inputs })
    }
}

impl ToyBlockStack<f64> {
    /// Adapters under `block{i}.w_q` / `block{i}.w_v`, frozen matrices as
    /// `block{i}.w_k` / `block{i}.w_o`, and the readout as `head`.
    pub fn to_tensors(&self) -> Result<TensorSet> {
        let mut set = TensorSet::new();
        for (i, b) in self.blocks.iter().enumerate() {
            b.q.write_tensors(&format!("block{i}.w_q"), &mut set)?;
            set.insert(format!("block{i}.w_k"), b.w_k.clone())?;
            b.v.write_tensors(&format!("block{i}.w_v"), &mut set)?;
            set.insert(format!("block{i}.w_o"), b.w_o.clone())?;
        }
        set.insert("head", self.head.clone())?;
        Ok(set)
    }

    pub fn from_tensors(set: &TensorSet) -> Result<Self> {
        let mut blocks = Vec::new();
        while set.get(&format!("block{}.w_k", blocks.len())).is_some() {
            let i = blocks.len();
            blocks.push(Block {
                q: AdapterLayer::read_tensors(set, &format!("block{i}.w_q"))?,
                w_k: set.require(&format!("block{i}.w_k"))?.clone(),
                v: AdapterLayer::read_tensors(set, &format!("block{i}.w_v"))?,
                w_o: set.require(&format!("block{i}.w_o"))?.clone(),
            });
        }
        Self::from_parts(blocks, set.require("head")?.clone())
    }
}

fn softmax_rows<T: Scalar>(a: &mut DenseMatrix<T>) {
    for i in 0..a.rows() {
        let row = a.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }
}

/// `dS[t,:] = A[t,:] ⊙ (dA[t,:] − ⟨A[t,:], dA[t,:]⟩)`.
fn softmax_rows_backward<T: Scalar>(a: &DenseMatrix<T>, da: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut ds = DenseMatrix::zeros(a.rows(), a.cols());
    for t in 0..a.rows() {
        let (ar, dar) = (a.row(t), da.row(t));
        let inner = dot(ar, dar);
        for (s, out) in ds.row_mut(t).iter_mut().enumerate() {
            *out = ar[s] * (dar[s] - inner);
        }
    }
    ds
}
