//! Adapter layers over a frozen pre-trained matrix.
//!
//! Every layer maps a batch `x` of shape `d2×n` (one sample per column) to
//! `d1×n`. The five methods differ only in which parts are trainable:
//!
//! | method   | frozen                 | trainable          | count         |
//! |----------|------------------------|--------------------|---------------|
//! | `svfit`  | `U_r`, `V_r`, `W_e`    | `Σ_r`              | `r`           |
//! | `lora`   | `W`                    | `A` (d1×r), `B`    | `r·(d1+d2)`   |
//! | `pissa`  | `W_res`                | `A`, `B`           | `r·(d1+d2)`   |
//! | `full`   | –                      | `W`                | `d1·d2`       |
//! | `frozen` | `W`                    | –                  | 0             |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::TensorSet;
use crate::linalg::{check_rank, split_subspaces, svd};
use crate::matrix::DenseMatrix;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Svfit,
    Lora,
    Pissa,
    Full,
    Frozen,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Svfit, Method::Lora, Method::Pissa, Method::Full, Method::Frozen];

    pub fn name(self) -> &'static str {
        match self {
            Method::Svfit => "svfit",
            Method::Lora => "lora",
            Method::Pissa => "pissa",
            Method::Full => "full",
            Method::Frozen => "frozen",
        }
    }

    /// Whether the method takes a cut rank.
    pub fn uses_rank(self) -> bool {
        matches!(self, Method::Svfit | Method::Lora | Method::Pissa)
    }

    /// Trainable scalars of one `d1×d2` layer at rank `r`, without building it.
    pub fn trainable_params(self, d1: usize, d2: usize, r: usize) -> usize {
        match self {
            Method::Svfit => r,
            Method::Lora | Method::Pissa => r * (d1 + d2),
            Method::Full => d1 * d2,
            Method::Frozen => 0,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// One linear layer in one of the five adaptation modes.
#[derive(Clone, Debug, PartialEq)]
pub enum AdapterLayer<T> {
    Svfit {
        u_r: DenseMatrix<T>,
        v_r: DenseMatrix<T>,
        sigma_r: Vec<T>,
        w_e: DenseMatrix<T>,
    },
    Lora {
        w: DenseMatrix<T>,
        a: DenseMatrix<T>,
        b: DenseMatrix<T>,
    },
    Pissa {
        w_res: DenseMatrix<T>,
        a: DenseMatrix<T>,
        b: DenseMatrix<T>,
    },
    Full {
        w: DenseMatrix<T>,
    },
    Frozen {
        w: DenseMatrix<T>,
    },
}

/// Gradients of the trainable buffers of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrads<T> {
    Sigma(Vec<T>),
    LowRank { d_a: DenseMatrix<T>, d_b: DenseMatrix<T> },
    Dense(DenseMatrix<T>),
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients<T> {
    pub params: ParamGrads<T>,
    pub d_input: DenseMatrix<T>,
}

impl<T: Scalar> LayerGradients<T> {
    /// Parameter gradients in the order of [`AdapterLayer::trainable_buffers`].
    pub fn buffers(&self) -> Vec<&[T]> {
        match &self.params {
            ParamGrads::Sigma(s) => vec![s.as_slice()],
            ParamGrads::LowRank { d_a, d_b } => vec![d_a.as_slice(), d_b.as_slice()],
            ParamGrads::Dense(d) => vec![d.as_slice()],
            ParamGrads::None => Vec::new(),
        }
    }
}

impl<T: Scalar> AdapterLayer<T> {
    /// SVFit: `W = U_r diag(Σ_r) V_rᵀ + W_e` with only `Σ_r` trainable.
    ///
    /// `W_e` is formed by subtraction so that the additive identity holds to
    /// rounding.
    pub fn init_svfit(w: &DenseMatrix<T>, r: usize) -> Result<Self> {
        check_rank(r, w.rows().min(w.cols()))?;
        let parts = split_subspaces(&svd(w)?, r)?;
        let w_e = w.sub(&parts.principal())?;
        Ok(AdapterLayer::Svfit { u_r: parts.u_r, v_r: parts.v_r, sigma_r: parts.sigma_r, w_e })
    }

    /// LoRA with `A ~ N(0, 1/r)` drawn row-major from `rng` and `B = 0`.
    pub fn init_lora<R: Rng + ?Sized>(w: &DenseMatrix<T>, r: usize, rng: &mut R) -> Result<Self> {
        check_rank(r, w.rows().min(w.cols()))?;
        let std = 1.0 / (r as f64).sqrt();
        let a = DenseMatrix::random_normal(w.rows(), r, std, rng);
        let b = DenseMatrix::zeros(r, w.cols());
        Ok(AdapterLayer::Lora { w: w.clone(), a, b })
    }

    /// [`Self::init_lora`] with a fresh generator seeded from `seed`.
    pub fn init_lora_seeded(w: &DenseMatrix<T>, r: usize, seed: u64) -> Result<Self> {
        Self::init_lora(w, r, &mut rng::seeded(seed))
    }

    /// PiSSA: `A = U_r diag(√Σ_r)`, `B = diag(√Σ_r) V_rᵀ`, residual frozen.
    pub fn init_pissa(w: &DenseMatrix<T>, r: usize) -> Result<Self> {
        check_rank(r, w.rows().min(w.cols()))?;
        let parts = split_subspaces(&svd(w)?, r)?;
        let root: Vec<T> = parts.sigma_r.iter().map(|s| s.sqrt()).collect();
        let a = parts.u_r.scale_columns(&root);
        let b = parts.v_r.transpose().scale_rows(&root);
        let w_res = w.sub(&a.matmul(&b)?)?;
        Ok(AdapterLayer::Pissa { w_res, a, b })
    }

    pub fn full(w: &DenseMatrix<T>) -> Self {
        AdapterLayer::Full { w: w.clone() }
    }

    pub fn frozen(w: &DenseMatrix<T>) -> Self {
        AdapterLayer::Frozen { w: w.clone() }
    }

    /// Builds a layer of any method. `r` is ignored for `full` and `frozen`;
    /// `rng` is only drawn from for `lora`.
    pub fn new<R: Rng + ?Sized>(method: Method, w: &DenseMatrix<T>, r: usize, rng: &mut R) -> Result<Self> {
        match method {
            Method::Svfit => Self::init_svfit(w, r),
            Method::Lora => Self::init_lora(w, r, rng),
            Method::Pissa => Self::init_pissa(w, r),
            Method::Full => Ok(Self::full(w)),
            Method::Frozen => Ok(Self::frozen(w)),
        }
    }

    pub fn method(&self) -> Method {
        match self {
            AdapterLayer::Svfit { .. } => Method::Svfit,
            AdapterLayer::Lora { .. } => Method::Lora,
            AdapterLayer::Pissa { .. } => Method::Pissa,
            AdapterLayer::Full { .. } => Method::Full,
            AdapterLayer::Frozen { .. } => Method::Frozen,
        }
    }

    /// `(d1, d2)`: output and input dimension.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            AdapterLayer::Svfit { w_e, .. } => w_e.shape(),
            AdapterLayer::Lora { w, .. } | AdapterLayer::Full { w } | AdapterLayer::Frozen { w } => w.shape(),
            AdapterLayer::Pissa { w_res, .. } => w_res.shape(),
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            AdapterLayer::Svfit { sigma_r, .. } => Some(sigma_r.len()),
            AdapterLayer::Lora { a, .. } | AdapterLayer::Pissa { a, .. } => Some(a.cols()),
            _ => None,
        }
    }

    /// Trained singular values, for `svfit` layers.
    pub fn sigma_r(&self) -> Option<&[T]> {
        match self {
            AdapterLayer::Svfit { sigma_r, .. } => Some(sigma_r),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.trainable_buffers().iter().map(|b| b.len()).sum()
    }

    /// Names of the trainable buffers, in optimizer order.
    pub fn buffer_names(&self) -> &'static [&'static str] {
        match self {
            AdapterLayer::Svfit { .. } => &["sigma_r"],
            AdapterLayer::Lora { .. } | AdapterLayer::Pissa { .. } => &["a", "b"],
            AdapterLayer::Full { .. } => &["w"],
            AdapterLayer::Frozen { .. } => &[],
        }
    }

    pub fn trainable_buffers(&self) -> Vec<&[T]> {
        match self {
            AdapterLayer::Svfit { sigma_r, .. } => vec![sigma_r.as_slice()],
            AdapterLayer::Lora { a, b, .. } | AdapterLayer::Pissa { a, b, .. } => {
                vec![a.as_slice(), b.as_slice()]
            }
            AdapterLayer::Full { w } => vec![w.as_slice()],
            AdapterLayer::Frozen { .. } => Vec::new(),
        }
    }

    pub fn trainable_buffers_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            AdapterLayer::Svfit { sigma_r, .. } => vec![sigma_r.as_mut_slice()],
            AdapterLayer::Lora { a, b, .. } | AdapterLayer::Pissa { a, b, .. } => {
                vec![a.as_mut_slice(), b.as_mut_slice()]
            }
            AdapterLayer::Full { w } => vec![w.as_mut_slice()],
            AdapterLayer::Frozen { .. } => Vec::new(),
        }
    }

    /// Frozen buffers, for immutability checks.
    pub fn frozen_buffers(&self) -> Vec<&[T]> {
        match self {
            AdapterLayer::Svfit { u_r, v_r, w_e, .. } => vec![u_r.as_slice(), v_r.as_slice(), w_e.as_slice()],
            AdapterLayer::Lora { w, .. } | AdapterLayer::Frozen { w } => vec![w.as_slice()],
            AdapterLayer::Pissa { w_res, .. } => vec![w_res.as_slice()],
            AdapterLayer::Full { .. } => Vec::new(),
        }
    }

    fn check_input(&self, x: &DenseMatrix<T>) -> Result<()> {
        let (_, d2) = self.dims();
        if x.rows() != d2 {
            return Err(Error::DimensionMismatch(format!(
                "{} layer expects {d2} input rows, got {}",
                self.method(),
                x.rows()
            )));
        }
        Ok(())
    }

    /// Applies the layer to the columns of `x`.
    ///
    /// The low-rank paths are evaluated factor by factor and never form the
    /// merged matrix.
    pub fn forward(&self, x: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
        self.check_input(x)?;
        match self {
            AdapterLayer::Svfit { u_r, v_r, sigma_r, w_e } => {
                let p = v_r.tr_matmul(x)?.scale_rows(sigma_r);
                let mut y = u_r.matmul(&p)?;
                y.add_assign(&w_e.matmul(x)?)?;
                Ok(y)
            }
            AdapterLayer::Lora { w: base, a, b } | AdapterLayer::Pissa { w_res: base, a, b } => {
                let mut y = base.matmul(x)?;
                y.add_assign(&a.matmul(&b.matmul(x)?)?)?;
                Ok(y)
            }
            AdapterLayer::Full { w } | AdapterLayer::Frozen { w } => w.matmul(x),
        }
    }

    /// Gradients of a scalar loss given `grad_out = ∂L/∂forward(x)`.
    pub fn backward(&self, x: &DenseMatrix<T>, grad_out: &DenseMatrix<T>) -> Result<LayerGradients<T>> {
        self.check_input(x)?;
        let (d1, _) = self.dims();
        if grad_out.shape() != (d1, x.cols()) {
            return Err(Error::DimensionMismatch(format!(
                "grad_out {:?}, expected {:?}",
                grad_out.shape(),
                (d1, x.cols())
            )));
        }
        let g = grad_out;
        match self {
            AdapterLayer::Svfit { u_r, v_r, sigma_r, w_e } => {
                let proj = v_r.tr_matmul(x)?;
                let d_q = u_r.tr_matmul(g)?;
                let d_sigma = (0..sigma_r.len())
                    .map(|i| crate::matrix::dot(d_q.row(i), proj.row(i)))
                    .collect();
                let mut d_input = v_r.matmul(&d_q.scale_rows(sigma_r))?;
                d_input.add_assign(&w_e.tr_matmul(g)?)?;
                Ok(LayerGradients { params: ParamGrads::Sigma(d_sigma), d_input })
            }
            AdapterLayer::Lora { w: base, a, b } | AdapterLayer::Pissa { w_res: base, a, b } => {
                let h = b.matmul(x)?;
                let d_a = g.matmul_tr(&h)?;
                let d_h = a.tr_matmul(g)?;
                let d_b = d_h.matmul_tr(x)?;
                let mut d_input = base.tr_matmul(g)?;
                d_input.add_assign(&b.tr_matmul(&d_h)?)?;
                Ok(LayerGradients { params: ParamGrads::LowRank { d_a, d_b }, d_input })
            }
            AdapterLayer::Full { w } => Ok(LayerGradients {
                params: ParamGrads::Dense(g.matmul_tr(x)?),
                d_input: w.tr_matmul(g)?,
            }),
            AdapterLayer::Frozen { w } => Ok(LayerGradients { params: ParamGrads::None, d_input: w.tr_matmul(g)? }),
        }
    }

    /// Folds the adapter into one dense `d1×d2` matrix.
    pub fn merge(&self) -> DenseMatrix<T> {
        let merged = match self {
            AdapterLayer::Svfit { u_r, v_r, sigma_r, w_e } => {
                u_r.scale_columns(sigma_r).matmul_tr(v_r).and_then(|m| m.add(w_e))
            }
            AdapterLayer::Lora { w: base, a, b } | AdapterLayer::Pissa { w_res: base, a, b } => {
                a.matmul(b).and_then(|m| base.add(&m))
            }
            AdapterLayer::Full { w } | AdapterLayer::Frozen { w } => Ok(w.clone()),
        };
        merged.expect("layer parts have consistent shapes")
    }
}

impl AdapterLayer<f64> {
    /// Stores the layer as `<prefix>.<method>.<part>` tensors. `sigma_r` is
    /// written as a `1×r` matrix.
    pub fn write_tensors(&self, prefix: &str, set: &mut TensorSet) -> Result<()> {
        let m = self.method().name();
        let mut put = |part: &str, t: DenseMatrix<f64>| set.insert(format!("{prefix}.{m}.{part}"), t);
        match self {
            AdapterLayer::Svfit { u_r, v_r, sigma_r, w_e } => {
                put("u_r", u_r.clone())?;
                put("v_r", v_r.clone())?;
                put("sigma_r", DenseMatrix::from_vec(1, sigma_r.len(), sigma_r.clone())?)?;
                put("w_e", w_e.clone())
            }
            AdapterLayer::Lora { w, a, b } => {
                put("w", w.clone())?;
                put("a", a.clone())?;
                put("b", b.clone())
            }
            AdapterLayer::Pissa { w_res, a, b } => {
                put("w_res", w_res.clone())?;
                put("a", a.clone())?;
                put("b", b.clone())
            }
            AdapterLayer::Full { w } | AdapterLayer::Frozen { w } => put("w", w.clone()),
        }
    }

    /// Inverse of [`Self::write_tensors`]: finds whichever method is stored
    /// under `prefix`.
    pub fn read_tensors(set: &TensorSet, prefix: &str) -> Result<Self> {
        let method = Method::ALL
            .into_iter()
            .find(|m| set.names().any(|n| n.starts_with(&format!("{prefix}.{}.", m.name()))))
            .ok_or_else(|| Error::MissingTensor(format!("{prefix}.<method>.*")))?;
        let get = |part: &str| set.require(&format!("{prefix}.{}.{part}", method.name())).cloned();
        let layer = match method {
            Method::Svfit => AdapterLayer::Svfit {
                u_r: get("u_r")?,
                v_r: get("v_r")?,
                sigma_r: get("sigma_r")?.into_vec(),
                w_e: get("w_e")?,
            },
            Method::Lora => AdapterLayer::Lora { w: get("w")?, a: get("a")?, b: get("b")? },
            Method::Pissa => AdapterLayer::Pissa { w_res: get("w_res")?, a: get("a")?, b: get("b")? },
            Method::Full => AdapterLayer::Full { w: get("w")? },
            Method::Frozen => AdapterLayer::Frozen { w: get("w")? },
        };
        layer.validate_shapes()?;
        Ok(layer)
    }

    fn validate_shapes(&self) -> Result<()> {
        let (d1, d2) = self.dims();
        let ok = match self {
            AdapterLayer::Svfit { u_r, v_r, sigma_r, .. } => {
                let r = sigma_r.len();
                u_r.shape() == (d1, r) && v_r.shape() == (d2, r)
            }
            AdapterLayer::Lora { a, b, .. } | AdapterLayer::Pissa { a, b, .. } => {
                a.rows() == d1 && b.cols() == d2 && a.cols() == b.rows()
            }
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!("inconsistent {} layer tensors", self.method())))
        }
    }
}

/// Largest tolerated `|adapter(x) − merged·x|` on the merge probes.
pub const MERGE_TOLERANCE: f64 = 1e-9;

/// One adapter folded by [`merge_checkpoint`].
#[derive(Clone, Debug, PartialEq)]
pub struct MergedLayer {
    pub name: String,
    pub method: Method,
    /// Max absolute difference between adapter and merged forward on the probes.
    pub discrepancy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeReport {
    /// Input tensors with every adapter replaced by a dense `<prefix>` tensor.
    pub merged: TensorSet,
    pub layers: Vec<MergedLayer>,
    pub max_discrepancy: f64,
}

/// Splits `<prefix>.<method>.<part>` into prefix and method.
fn adapter_prefix(name: &str) -> Option<(&str, Method)> {
    let (rest, part) = name.rsplit_once('.')?;
    let (prefix, method) = rest.rsplit_once('.')?;
    let method: Method = method.parse().ok()?;
    let known: &[&str] = match method {
        Method::Svfit => &["u_r", "v_r", "sigma_r", "w_e"],
        Method::Lora => &["w", "a", "b"],
        Method::Pissa => &["w_res", "a", "b"],
        Method::Full | Method::Frozen => &["w"],
    };
    known.contains(&part).then_some((prefix, method))
}

/// Folds every adapter stored in `set` into a dense matrix named by its
/// prefix, passing other tensors through in order. Each merged layer is
/// checked against its adapter on `probes` seeded Gaussian inputs; a
/// discrepancy above [`MERGE_TOLERANCE`] is an error.
pub fn merge_checkpoint(set: &TensorSet, probes: usize, seed: u64) -> Result<MergeReport> {
    let mut merged = TensorSet::new();
    let mut layers = Vec::new();
    let mut probe_rng = rng::seeded(seed);
    for (name, tensor) in set.iter() {
        match adapter_prefix(name) {
            Some((prefix, _)) => {
                if merged.get(prefix).is_some() {
                    continue;
                }
                let layer = AdapterLayer::read_tensors(set, prefix)?;
                let dense = layer.merge();
                let x = DenseMatrix::random_normal(layer.dims().1, probes.max(1), 1.0, &mut probe_rng);
                let discrepancy = layer.forward(&x)?.max_abs_diff(&dense.matmul(&x)?);
                layers.push(MergedLayer { name: prefix.to_string(), method: layer.method(), discrepancy });
                merged.insert(prefix, dense)?;
            }
            None => merged.insert(name, tensor.clone())?,
        }
    }
    if layers.is_empty() {
        return Err(Error::MissingTensor("no adapter tensors in checkpoint".into()));
    }
    let max_discrepancy = layers.iter().map(|l| l.discrepancy).fold(0.0, f64::max);
    if max_discrepancy.is_nan() || max_discrepancy > MERGE_TOLERANCE {
        return Err(Error::MergeDiscrepancy { discrepancy: max_discrepancy, threshold: MERGE_TOLERANCE });
    }
    Ok(MergeReport { merged, layers, max_discrepancy })
}
