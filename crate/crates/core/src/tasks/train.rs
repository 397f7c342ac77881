//! Training driver shared by the teacher–student and blobs tasks.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapt::{AdapterLayer, Method};
use crate::error::{Error, Result};
use crate::io::{self, TensorSet};
use crate::matrix::DenseMatrix;
use crate::model::{PretrainedWeights, ToyBlockStack};
use crate::optim::{schedule_lr, Hyperparams, OptimState, ParamUpdate};
use crate::rng;
use crate::tasks::blobs::{accuracy, cross_entropy, gen_blobs, BlobsDataset};
use crate::tasks::config::{RunConfig, TaskKind};
use crate::tasks::image::{reconstruct_image, test_image, Order};
use crate::tasks::teacher::gen_teacher_student;

type Matrix = DenseMatrix<f64>;

const SHUFFLE_STREAM: u64 = 30;
const PRETRAIN_INIT_STREAM: u64 = 31;
const LAYER_INIT_STREAM: u64 = 32;
/// Offsets the seed of the pre-training source task so its class means
/// differ from the fine-tuning task's.
const SOURCE_TASK_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const SIGMA_SNAPSHOT_LEN: usize = 8;

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Optimizer updates applied so far.
    pub step: u64,
    /// Learning rate of the most recent update (of the first one at step 0).
    pub lr: f64,
    /// Loss over the whole training set.
    pub train_loss: f64,
    /// Held-out MSE (teacher–student), accuracy (blobs) or PSNR (reconstruct).
    pub eval_metric: f64,
    /// Leading singular values of the first SVFit adapter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_snapshot: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub final_record: MetricsRecord,
    pub records: Vec<MetricsRecord>,
    /// Trainable adapter scalars (the classification head is not counted).
    pub trainable_params: usize,
    pub checkpoint: TensorSet,
}

/// Something the shared loop can train.
trait Learner {
    fn n_train(&self) -> usize;
    fn step(&mut self, batch: &[usize], opt: &mut OptimState<f64>, lr: f64) -> Result<()>;
    fn train_loss(&self) -> Result<f64>;
    fn eval_metric(&self) -> Result<f64>;
    fn sigma_snapshot(&self) -> Option<Vec<f64>>;
}

struct Schedule {
    epochs: usize,
    batch_size: usize,
    lr: f64,
    warmup_ratio: f64,
    log_every: usize,
    hp: Hyperparams,
    seed: u64,
    record_wall_time: bool,
}

impl Schedule {
    fn from_config(cfg: &RunConfig) -> Self {
        Self {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.peak_lr(),
            warmup_ratio: cfg.warmup_ratio,
            log_every: cfg.log_every,
            hp: cfg.optimizer_hyperparams(),
            seed: cfg.seed,
            record_wall_time: cfg.record_wall_time,
        }
    }
}

fn fit<L: Learner>(learner: &mut L, s: &Schedule, records: &mut Vec<MetricsRecord>) -> Result<()> {
    let started = Instant::now();
    let n = learner.n_train();
    let steps_per_epoch = n.div_ceil(s.batch_size);
    let total = s.epochs * steps_per_epoch;
    let mut opt = OptimState::new(s.hp.clone());
    let mut shuffle = rng::derived(s.seed, SHUFFLE_STREAM);

    let mut log = |learner: &L, step: usize, lr: f64| -> Result<()> {
        let train_loss = learner.train_loss()?;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteActivation(format!("training loss at step {step}")));
        }
        records.push(MetricsRecord {
            step: step as u64,
            lr,
            train_loss,
            eval_metric: learner.eval_metric()?,
            sigma_snapshot: learner.sigma_snapshot(),
            wall_ms: s.record_wall_time.then(|| started.elapsed().as_millis() as u64),
        });
        Ok(())
    };

    log(learner, 0, schedule_lr(0, total, s.warmup_ratio, s.lr)?)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..s.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(s.batch_size) {
            let lr = schedule_lr(step, total, s.warmup_ratio, s.lr)?;
            learner.step(batch, &mut opt, lr)?;
            step += 1;
            if step % s.log_every == 0 || step == total {
                log(learner, step, lr)?;
            }
        }
    }
    Ok(())
}

fn select_columns(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(m.rows(), idx.len(), |i, j| m[(i, idx[j])])
}

fn mse(pred: &Matrix, target: &Matrix) -> f64 {
    let n = pred.as_slice().len().max(1) as f64;
    pred.as_slice().iter().zip(target.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

fn updates<'a>(
    values: Vec<&'a mut [f64]>,
    grads: Vec<&'a [f64]>,
    exempt: impl Fn(usize) -> bool,
) -> Vec<ParamUpdate<'a, f64>> {
    values
        .into_iter()
        .zip(grads)
        .enumerate()
        .map(|(i, (value, grad))| ParamUpdate { value, grad, decay: !exempt(i) })
        .collect()
}

struct TeacherLearner {
    layer: AdapterLayer<f64>,
    inputs: Matrix,
    targets: Matrix,
    eval_inputs: Matrix,
    eval_targets: Matrix,
    decay_sigma: bool,
}

impl Learner for TeacherLearner {
    fn n_train(&self) -> usize {
        self.inputs.cols()
    }

    fn step(&mut self, batch: &[usize], opt: &mut OptimState<f64>, lr: f64) -> Result<()> {
        let x = select_columns(&self.inputs, batch);
        let y = select_columns(&self.targets, batch);
        let pred = self.layer.forward(&x)?;
        let scale = 2.0 / pred.as_slice().len() as f64;
        let grad_out = pred.sub(&y)?.scale(scale);
        let grads = self.layer.backward(&x, &grad_out)?;
        let exempt_sigma = self.layer.method() == Method::Svfit && !self.decay_sigma;
        let mut params = updates(self.layer.trainable_buffers_mut(), grads.buffers(), |_| exempt_sigma);
        opt.apply_step(&mut params, lr)
    }

    fn train_loss(&self) -> Result<f64> {
        Ok(mse(&self.layer.forward(&self.inputs)?, &self.targets))
    }

    fn eval_metric(&self) -> Result<f64> {
        Ok(mse(&self.layer.forward(&self.eval_inputs)?, &self.eval_targets))
    }

    fn sigma_snapshot(&self) -> Option<Vec<f64>> {
        self.layer.sigma_r().map(|s| s.iter().take(SIGMA_SNAPSHOT_LEN).copied().collect())
    }
}

struct BlobsLearner {
    stack: ToyBlockStack<f64>,
    train: BlobsDataset,
    eval: BlobsDataset,
    train_head: bool,
    decay_sigma: bool,
}

impl Learner for BlobsLearner {
    fn n_train(&self) -> usize {
        self.train.len()
    }

    fn step(&mut self, batch: &[usize], opt: &mut OptimState<f64>, lr: f64) -> Result<()> {
        let xs: Vec<Matrix> = batch.iter().map(|&i| self.train.inputs[i].clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| self.train.labels[i]).collect();
        let (logits, trace) = self.stack.forward(&xs)?;
        let (loss, grad_out) = cross_entropy(&logits, &labels);
        if !loss.is_finite() {
            return Err(Error::NonFiniteActivation("cross-entropy".into()));
        }
        let grads = self.stack.backward(trace, &grad_out)?;
        let decay_sigma = self.decay_sigma;
        let (values, sigma_flags): (Vec<_>, Vec<_>) = self.stack.trainable_buffers_mut(self.train_head).into_iter().unzip();
        let mut params = updates(values, grads.buffers(self.train_head), |i| sigma_flags[i] && !decay_sigma);
        opt.apply_step(&mut params, lr)
    }

    fn train_loss(&self) -> Result<f64> {
        let logits = self.stack.predict(&self.train.inputs)?;
        Ok(cross_entropy(&logits, &self.train.labels).0)
    }

    fn eval_metric(&self) -> Result<f64> {
        let logits = self.stack.predict(&self.eval.inputs)?;
        Ok(accuracy(&logits, &self.eval.labels))
    }

    fn sigma_snapshot(&self) -> Option<Vec<f64>> {
        self.stack
            .adapters()
            .find_map(|a| a.sigma_r())
            .map(|s| s.iter().take(SIGMA_SNAPSHOT_LEN).copied().collect())
    }
}

/// Pre-trains a stack on a seeded source classification task, updating
/// `W_q`, `W_v` and a throwaway head from a Gaussian start, and returns the
/// dense weights. Fine-tuning then starts from matrices with learned
/// structure rather than pure noise.
pub fn pretrain_stack(n_blocks: usize, d_model: usize, classes: usize, seq_len: usize, steps: usize, seed: u64) -> Result<PretrainedWeights<f64>> {
    if n_blocks == 0 || d_model == 0 || classes < 2 || seq_len == 0 {
        return Err(Error::InvalidConfig("pre-training needs n_blocks, d_model, seq_len ≥ 1 and classes ≥ 2".into()));
    }
    let mut init = rng::derived(seed, PRETRAIN_INIT_STREAM);
    let std = 1.0 / (d_model as f64).sqrt();
    let start = PretrainedWeights {
        blocks: (0..n_blocks)
            .map(|_| std::array::from_fn(|_| Matrix::random_normal(d_model, d_model, std, &mut init)))
            .collect(),
    };
    let stack = ToyBlockStack::build(&start, Method::Full, 1, classes, seed)?;
    let source_seed = seed.wrapping_add(SOURCE_TASK_SALT);
    let n_train = 256;
    let mut learner = BlobsLearner {
        stack,
        train: gen_blobs(source_seed, d_model, classes, seq_len, n_train, 1.0, 0),
        eval: gen_blobs(source_seed, d_model, classes, seq_len, 32, 1.0, 1),
        train_head: true,
        decay_sigma: true,
    };
    let batch_size = 32;
    let schedule = Schedule {
        epochs: steps.div_ceil(n_train / batch_size).max(1),
        batch_size,
        lr: 3e-3,
        warmup_ratio: 0.06,
        log_every: usize::MAX,
        hp: Hyperparams::default(),
        seed: source_seed,
        record_wall_time: false,
    };
    fit(&mut learner, &schedule, &mut Vec::new())?;
    let blocks = learner
        .stack
        .blocks()
        .iter()
        .map(|b| [b.q.merge(), b.w_k.clone(), b.v.merge(), b.w_o.clone()])
        .collect();
    Ok(PretrainedWeights { blocks })
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

fn run_teacher(cfg: &RunConfig, records: &mut Vec<MetricsRecord>) -> Result<(usize, TensorSet)> {
    let t = &cfg.teacher;
    let perturb_rank = t.perturb_rank.unwrap_or(t.d_out.min(t.d_in));
    let data = gen_teacher_student(cfg.seed, t.d_out, t.d_in, perturb_rank, t.perturb, t.scale, t.n_samples + t.n_eval)?;
    let train_idx: Vec<usize> = (0..t.n_samples).collect();
    let eval_idx: Vec<usize> = (t.n_samples..t.n_samples + t.n_eval).collect();
    let layer = AdapterLayer::new(cfg.method, &data.w0, cfg.effective_rank(), &mut rng::derived(cfg.seed, LAYER_INIT_STREAM))?;
    let mut learner = TeacherLearner {
        layer,
        inputs: select_columns(&data.inputs, &train_idx),
        targets: select_columns(&data.targets, &train_idx),
        eval_inputs: select_columns(&data.inputs, &eval_idx),
        eval_targets: select_columns(&data.targets, &eval_idx),
        decay_sigma: cfg.decay_sigma,
    };
    fit(&mut learner, &Schedule::from_config(cfg), records)?;
    let mut set = TensorSet::new();
    learner.layer.write_tensors("w", &mut set)?;
    Ok((learner.layer.param_count(), set))
}

fn load_pretrained(cfg: &RunConfig) -> Result<PretrainedWeights<f64>> {
    let m = &cfg.model;
    match &cfg.pretrained {
        Some(path) => {
            let weights = PretrainedWeights::from_tensors(&io::read_checkpoint(path)?)?;
            if weights.blocks.len() != m.n_blocks || weights.d_model() != m.d_model {
                return Err(Error::InvalidConfig(format!(
                    "pretrained checkpoint has {} blocks of width {}, config asks for {} of width {}",
                    weights.blocks.len(),
                    weights.d_model(),
                    m.n_blocks,
                    m.d_model
                )));
            }
            Ok(weights)
        }
        None => pretrain_stack(m.n_blocks, m.d_model, m.classes, m.seq_len, cfg.blobs.pretrain_steps, cfg.seed),
    }
}

fn run_blobs(cfg: &RunConfig, records: &mut Vec<MetricsRecord>) -> Result<(usize, TensorSet)> {
    let m = &cfg.model;
    let pretrained = load_pretrained(cfg)?;
    let stack = ToyBlockStack::build(&pretrained, cfg.method, cfg.effective_rank(), m.classes, cfg.seed)?;
    let b = &cfg.blobs;
    let mut learner = BlobsLearner {
        stack,
        train: gen_blobs(cfg.seed, m.d_model, m.classes, m.seq_len, b.n_train, b.noise, 0),
        eval: gen_blobs(cfg.seed, m.d_model, m.classes, m.seq_len, b.n_eval, b.noise, 1),
        train_head: cfg.train_head,
        decay_sigma: cfg.decay_sigma,
    };
    fit(&mut learner, &Schedule::from_config(cfg), records)?;
    Ok((learner.stack.param_count(), learner.stack.to_tensors()?))
}

fn run_reconstruct(cfg: &RunConfig, records: &mut Vec<MetricsRecord>) -> Result<(usize, TensorSet)> {
    let img = match &cfg.image {
        Some(path) => io::read_pgm(path)?,
        None => test_image(),
    };
    let r = cfg.rank.unwrap_or(img.width().min(img.height()));
    let rec = reconstruct_image(&img, r, Order::Top)?;
    records.push(MetricsRecord {
        step: 0,
        lr: 0.0,
        train_loss: rec.mse,
        eval_metric: rec.psnr,
        sigma_snapshot: None,
        wall_ms: None,
    });
    let mut set = TensorSet::new();
    set.insert("reconstruction", rec.image.to_matrix())?;
    Ok((r, set))
}

/// Runs one configuration end to end. The metrics file is written even when
/// the run diverges, holding the records up to the failure.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut records = Vec::new();
    let result = match cfg.task {
        TaskKind::TeacherStudent => run_teacher(cfg, &mut records),
        TaskKind::Blobs => run_blobs(cfg, &mut records),
        TaskKind::Reconstruct => run_reconstruct(cfg, &mut records),
    };
    if let Some(path) = &cfg.output.metrics {
        write_metrics(path, &records)?;
    }
    let (trainable_params, checkpoint) = result?;
    if let Some(path) = &cfg.output.checkpoint {
        io::write_checkpoint(path, &checkpoint)?;
    }
    let final_record = records.last().cloned().expect("at least the initial record is logged");
    Ok(RunOutcome { final_record, records, trainable_params, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn teacher_cfg(method: Method) -> RunConfig {
        let mut cfg = RunConfig::new(TaskKind::TeacherStudent, method, 5);
        cfg.teacher.d_out = 6;
        cfg.teacher.d_in = 5;
        cfg.teacher.n_samples = 64;
        cfg.teacher.n_eval = 16;
        cfg.epochs = 5;
        cfg.batch_size = 16;
        cfg.log_every = 4;
        cfg
    }

    #[test]
    fn logs_initial_periodic_and_final_records() {
        let out = run_training(&teacher_cfg(Method::Lora)).unwrap();
        let steps: Vec<u64> = out.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 4, 8, 12, 16, 20]);
        assert_eq!(out.trainable_params, 5 * 11);
        assert!(out.records.iter().all(|r| r.sigma_snapshot.is_none() && r.wall_ms.is_none()));
    }

    #[test]
    fn frozen_loss_is_constant() {
        let out = run_training(&teacher_cfg(Method::Frozen)).unwrap();
        assert!(out.records.iter().all(|r| r.train_loss == out.records[0].train_loss));
        assert_eq!(out.trainable_params, 0);
    }

    #[test]
    fn svfit_records_sigma() {
        let mut cfg = teacher_cfg(Method::Svfit);
        cfg.rank = Some(3);
        let out = run_training(&cfg).unwrap();
        assert_eq!(out.final_record.sigma_snapshot.as_ref().unwrap().len(), 3);
        assert!(out.final_record.train_loss < out.records[0].train_loss);
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = teacher_cfg(Method::Full);
        cfg.optimizer = crate::optim::OptimizerKind::SgdMomentum;
        cfg.lr_base = 1e12;
        cfg.warmup_ratio = 0.0;
        let err = run_training(&cfg).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    #[test]
    fn reconstruct_task_reports_psnr() {
        let mut cfg = RunConfig::new(TaskKind::Reconstruct, Method::Svfit, 0);
        cfg.rank = Some(16);
        let out = run_training(&cfg).unwrap();
        assert_eq!(out.records.len(), 1);
        assert!(out.final_record.eval_metric > 20.0);
        assert_eq!(out.trainable_params, 16);
    }
}
