//! JSON run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adapt::Method;
use crate::error::{Error, Result};
use crate::optim::{Hyperparams, OptimizerKind};
use crate::tasks::teacher::Perturbation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TeacherStudent,
    Blobs,
    Reconstruct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub n_blocks: usize,
    pub d_model: usize,
    pub classes: usize,
    pub seq_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { n_blocks: 2, d_model: 64, classes: 4, seq_len: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub d_out: usize,
    pub d_in: usize,
    pub perturb: Perturbation,
    pub scale: f64,
    /// Number of leading singular values perturbed; all of them when absent.
    pub perturb_rank: Option<usize>,
    pub n_samples: usize,
    pub n_eval: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            d_out: 16,
            d_in: 16,
            perturb: Perturbation::SigmaOnly,
            scale: 0.5,
            perturb_rank: None,
            n_samples: 256,
            n_eval: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobsConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub noise: f64,
    /// Optimizer steps of the source-task pre-training used when no
    /// `pretrained` checkpoint is given.
    pub pretrain_steps: usize,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self { n_train: 256, n_eval: 128, noise: 2.0, pretrain_steps: 300 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub method: Method,
    /// Cut rank; the full rank of the adapted matrices when absent.
    #[serde(default)]
    pub rank: Option<usize>,
    pub seed: u64,
    #[serde(default = "defaults::lr_base")]
    pub lr_base: f64,
    #[serde(default = "defaults::one")]
    pub lr_multiplier: f64,
    /// Default values for an `lr_multiplier` sweep.
    #[serde(default)]
    pub lr_multiplier_sweep: Vec<f64>,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::warmup_ratio")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Apply weight decay to SVFit singular values as well.
    #[serde(default = "defaults::yes")]
    pub decay_sigma: bool,
    #[serde(default = "defaults::optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Train the classification head (blobs task).
    #[serde(default = "defaults::yes")]
    pub train_head: bool,
    #[serde(default = "defaults::log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub blobs: BlobsConfig,
    /// Pre-trained stack checkpoint for the blobs task.
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
    /// PGM for the reconstruct task; the built-in test image when absent.
    #[serde(default)]
    pub image: Option<PathBuf>,
    #[serde(default)]
    pub output: OutputPaths,
    /// Adds wall-clock milliseconds to metrics records, which makes the
    /// metrics file non-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

mod defaults {
    use crate::optim::OptimizerKind;

    pub fn lr_base() -> f64 {
        1e-2
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn epochs() -> usize {
        250
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn warmup_ratio() -> f64 {
        0.06
    }
    pub fn yes() -> bool {
        true
    }
    pub fn optimizer() -> OptimizerKind {
        OptimizerKind::Adamw
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn log_every() -> usize {
        50
    }
}

impl RunConfig {
    /// Minimal config for `task` with every other field at its default.
    pub fn new(task: TaskKind, method: Method, seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "task": task, "method": method, "seed": seed }))
            .expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `(d1, d2)` of each adapted matrix.
    pub fn adapted_dims(&self) -> (usize, usize) {
        match self.task {
            TaskKind::TeacherStudent => (self.teacher.d_out, self.teacher.d_in),
            TaskKind::Blobs | TaskKind::Reconstruct => (self.model.d_model, self.model.d_model),
        }
    }

    /// Rank actually used: the configured one or the full rank.
    pub fn effective_rank(&self) -> usize {
        let (d1, d2) = self.adapted_dims();
        self.rank.unwrap_or(d1.min(d2))
    }

    pub fn optimizer_hyperparams(&self) -> Hyperparams {
        Hyperparams {
            kind: self.optimizer,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            ..Hyperparams::default()
        }
    }

    /// Base learning rate times the multiplier.
    pub fn peak_lr(&self) -> f64 {
        self.lr_base * self.lr_multiplier
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.task != TaskKind::Reconstruct {
            if self.epochs == 0 || self.batch_size == 0 || self.log_every == 0 {
                return bad("epochs, batch_size and log_every must be positive".into());
            }
            if !(self.peak_lr() > 0.0 && self.peak_lr().is_finite()) {
                return bad(format!("learning rate {} must be positive", self.peak_lr()));
            }
            if !(0.0..1.0).contains(&self.warmup_ratio) {
                return bad(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio));
            }
            if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
                return bad("weight_decay must be non-negative".into());
            }
        }
        let (d1, d2) = self.adapted_dims();
        if d1 == 0 || d2 == 0 {
            return bad("matrix dimensions must be positive".into());
        }
        if let Some(r) = self.rank {
            if r == 0 || r > d1.min(d2) {
                return bad(format!("rank {r} outside 1..={}", d1.min(d2)));
            }
        }
        match self.task {
            TaskKind::TeacherStudent => {
                let t = &self.teacher;
                if t.n_samples == 0 || t.n_eval == 0 {
                    return bad("teacher sample counts must be positive".into());
                }
                if let Some(k) = t.perturb_rank {
                    if k == 0 || k > d1.min(d2) {
                        return bad(format!("perturb_rank {k} outside 1..={}", d1.min(d2)));
                    }
                }
            }
            TaskKind::Blobs => {
                let m = &self.model;
                if m.n_blocks == 0 || m.classes < 2 || m.seq_len == 0 {
                    return bad("model needs n_blocks ≥ 1, classes ≥ 2, seq_len ≥ 1".into());
                }
                if self.blobs.n_train == 0 || self.blobs.n_eval == 0 {
                    return bad("blobs sample counts must be positive".into());
                }
            }
            TaskKind::Reconstruct => {}
        }
        Ok(())
    }
}

/// Trainable scalars of one adapted matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub name: String,
    pub d1: usize,
    pub d2: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub method: Method,
    pub rank: usize,
    pub layers: Vec<LayerParams>,
    pub total: usize,
}

impl RunConfig {
    /// Trainable adapter parameters from dimensions alone; nothing is built.
    /// The classification head is not counted.
    pub fn param_report(&self) -> Result<ParamReport> {
        self.validate()?;
        let (d1, d2) = self.adapted_dims();
        let r = self.effective_rank();
        let names: Vec<String> = match self.task {
            TaskKind::TeacherStudent => vec!["w".into()],
            TaskKind::Blobs => (0..self.model.n_blocks)
                .flat_map(|i| [format!("block{i}.w_q"), format!("block{i}.w_v")])
                .collect(),
            TaskKind::Reconstruct => {
                return Err(Error::InvalidConfig("the reconstruct task has no adapters".into()));
            }
        };
        let per_layer = self.method.trainable_params(d1, d2, r);
        let layers: Vec<LayerParams> =
            names.into_iter().map(|name| LayerParams { name, d1, d2, params: per_layer }).collect();
        let total = layers.iter().map(|l| l.params).sum();
        Ok(ParamReport { method: self.method, rank: r, layers, total })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let err = RunConfig::from_json(r#"{"task":"blobs","method":"svfit"}"#).unwrap_err();
        assert!(err.to_string().contains("seed"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{"task":"blobs","method":"svfit","seed":1,"colour":3}"#).is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_json(r#"{"task":"teacher_student","method":"svfit","seed":1}"#).unwrap();
        assert_eq!(cfg, RunConfig::new(TaskKind::TeacherStudent, Method::Svfit, 1));
        assert_eq!(cfg.effective_rank(), 16);
        assert_eq!(cfg.warmup_ratio, 0.06);
        assert_eq!(cfg.model.d_model, 64);
    }

    #[test]
    fn param_report_counts_query_and_value() {
        let text = r#"{"task":"blobs","method":"lora","seed":1,"rank":8,"model":{"n_blocks":12,"d_model":768}}"#;
        let rep = RunConfig::from_json(text).unwrap().param_report().unwrap();
        assert_eq!(rep.layers.len(), 24);
        assert_eq!(rep.layers[1].name, "block0.w_v");
        assert_eq!(rep.total, 294_912);
    }

    #[test]
    fn rank_must_fit_the_model() {
        let text = r#"{"task":"blobs","method":"svfit","seed":1,"rank":65}"#;
        assert!(matches!(RunConfig::from_json(text), Err(Error::InvalidConfig(_))));
    }
}
