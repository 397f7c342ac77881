//! Optimizers and the linear warmup/decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    /// Decoupled weight decay, applied as `p -= lr · wd · p`.
    pub weight_decay: f64,
    /// Rescale all gradients together when their global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

/// One trainable buffer with its gradient for a single update.
pub struct ParamUpdate<'a, T> {
    pub value: &'a mut [T],
    pub grad: &'a [T],
    /// Whether weight decay applies to this buffer.
    pub decay: bool,
}

/// Moment accumulators for a fixed list of buffers.
///
/// The buffer layout is fixed by the first [`OptimState::apply_step`] call;
/// later calls must present the same number of buffers with the same lengths.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    hp: Hyperparams,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(hp: Hyperparams) -> Self {
        Self { hp, first: Vec::new(), second: Vec::new(), step: 0 }
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply_step(&mut self, params: &mut [ParamUpdate<'_, T>], lr: T) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.value.len() != p.grad.len() {
                return Err(Error::DimensionMismatch(format!(
                    "buffer {i}: {} values, {} gradients",
                    p.value.len(),
                    p.grad.len()
                )));
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { buffer: i });
            }
        }
        if self.step == 0 && self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            if self.hp.kind == OptimizerKind::Adamw {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.value.len())
        {
            return Err(Error::DimensionMismatch("buffer layout changed between steps".into()));
        }

        let clip_scale = match self.hp.clip_norm {
            Some(max) => {
                let norm = params
                    .iter()
                    .flat_map(|p| p.grad.iter())
                    .map(|&g| g * g)
                    .sum::<T>()
                    .sqrt();
                let max = T::lit(max);
                if norm > max { max / norm } else { T::one() }
            }
            None => T::one(),
        };

        self.step += 1;
        let wd = T::lit(self.hp.weight_decay);
        match self.hp.kind {
            OptimizerKind::Adamw => {
                let (b1, b2, eps) = (T::lit(self.hp.beta1), T::lit(self.hp.beta2), T::lit(self.hp.eps));
                let t = i32::try_from(self.step).unwrap_or(i32::MAX);
                let bc1 = T::one() - b1.powi(t);
                let bc2 = T::one() - b2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    for (k, x) in p.value.iter_mut().enumerate() {
                        if p.decay {
                            *x -= lr * wd * *x;
                        }
                        let g = p.grad[k] * clip_scale;
                        m[k] = b1 * m[k] + (T::one() - b1) * g;
                        v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum => {
                let mu = T::lit(self.hp.momentum);
                for (p, buf) in params.iter_mut().zip(&mut self.first) {
                    for (k, x) in p.value.iter_mut().enumerate() {
                        if p.decay {
                            *x -= lr * wd * *x;
                        }
                        buf[k] = mu * buf[k] + p.grad[k] * clip_scale;
                        *x -= lr * buf[k];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Number of warmup steps, `ceil(warmup_ratio · total_steps)`.
///
/// Products within 1e-9 of an integer are snapped first so that e.g.
/// `0.06 · 100` gives 6 rather than 7.
pub fn warmup_steps(total_steps: usize, warmup_ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&warmup_ratio) {
        return Err(Error::InvalidRatio(warmup_ratio));
    }
    let raw = warmup_ratio * total_steps as f64;
    let nearest = raw.round();
    let steps = if (raw - nearest).abs() < 1e-9 { nearest } else { raw.ceil() };
    Ok(steps as usize)
}

/// Linear ramp from 0 to `lr_base` over the warmup steps, then linear decay
/// to 0 at `total_steps`.
pub fn schedule_lr<T: Scalar>(step: usize, total_steps: usize, warmup_ratio: f64, lr_base: T) -> Result<T> {
    let warmup = warmup_steps(total_steps, warmup_ratio)?;
    if step > total_steps {
        return Err(Error::InvalidInput(format!("step {step} beyond total {total_steps}")));
    }
    if step < warmup {
        return Ok(lr_base * T::from_count(step) / T::from_count(warmup));
    }
    if total_steps == warmup {
        return Ok(T::zero());
    }
    Ok(lr_base * T::from_count(total_steps - step) / T::from_count(total_steps - warmup))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        assert_eq!(warmup_steps(100, 0.06).unwrap(), 6);
        assert_eq!(schedule_lr(6, 100, 0.06, 2.0).unwrap(), 2.0);
        assert_eq!(schedule_lr(100, 100, 0.06, 2.0).unwrap(), 0.0);
        assert_eq!(schedule_lr(3, 100, 0.06, 2.0).unwrap(), 1.0);
        assert_eq!(schedule_lr(0, 100, 0.06, 2.0).unwrap(), 0.0);
        assert_eq!(schedule_lr(53, 100, 0.06, 2.0).unwrap(), 2.0 * 47.0 / 94.0);
        assert_eq!(schedule_lr(0, 10, 0.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn schedule_rejects_bad_ratio() {
        assert!(matches!(schedule_lr(0, 10, 1.0, 1.0), Err(Error::InvalidRatio(_))));
        assert!(matches!(schedule_lr(0, 10, -0.1, 1.0), Err(Error::InvalidRatio(_))));
        assert!(schedule_lr(11, 10, 0.1, 1.0).is_err());
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        for kind in [OptimizerKind::Adamw, OptimizerKind::SgdMomentum] {
            let mut state = OptimState::new(Hyperparams { kind, ..Default::default() });
            let mut x = vec![1.5, -2.0];
            let g = vec![0.0, 0.0];
            state.apply_step(&mut [ParamUpdate { value: &mut x, grad: &g, decay: true }], 0.1).unwrap();
            assert_eq!(x, vec![1.5, -2.0]);
            assert_eq!(state.step_count(), 1);
        }
    }

    #[test]
    fn adamw_first_step_is_a_sign_step() {
        let mut state = OptimState::new(Hyperparams::default());
        let mut x = vec![0.0f64];
        state.apply_step(&mut [ParamUpdate { value: &mut x, grad: &[1.0], decay: true }], 0.1).unwrap();
        assert!((x[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_matches_unrolled_recurrence() {
        let hp = Hyperparams { kind: OptimizerKind::SgdMomentum, momentum: 0.9, weight_decay: 0.1, ..Default::default() };
        let mut state = OptimState::new(hp);
        let (lr1, lr2) = (0.5f64, 0.25f64);
        let (g1, g2) = ([1.0, -2.0], [0.5, 4.0]);
        let mut x = vec![1.0f64, 3.0];
        state.apply_step(&mut [ParamUpdate { value: &mut x, grad: &g1, decay: true }], lr1).unwrap();
        state.apply_step(&mut [ParamUpdate { value: &mut x, grad: &g2, decay: true }], lr2).unwrap();

        let mut expected = [1.0f64, 3.0];
        for k in 0..2 {
            let mut p = expected[k];
            p -= lr1 * 0.1 * p;
            let b1 = g1[k];
            p -= lr1 * b1;
            p -= lr2 * 0.1 * p;
            let b2 = 0.9 * b1 + g2[k];
            p -= lr2 * b2;
            expected[k] = p;
        }
        assert_eq!(x, expected);
    }

    #[test]
    fn rejects_non_finite_and_layout_changes() {
        let mut state = OptimState::new(Hyperparams::default());
        let mut x = vec![0.0f64; 2];
        let err = state.apply_step(&mut [ParamUpdate { value: &mut x, grad: &[1.0, f64::NAN], decay: false }], 0.1);
        assert!(matches!(err, Err(Error::NonFiniteGradient { buffer: 0 })));
        assert_eq!(x, vec![0.0, 0.0]);
        state.apply_step(&mut [ParamUpdate { value: &mut x, grad: &[1.0, 1.0], decay: false }], 0.1).unwrap();
        let mut y = vec![0.0f64; 3];
        let err = state.apply_step(&mut [ParamUpdate { value: &mut y, grad: &[1.0; 3], decay: false }], 0.1);
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
        let err = state.apply_step(&mut [ParamUpdate { value: &mut x, grad: &[1.0], decay: false }], 0.1);
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn clipping_bounds_the_update() {
        let hp = Hyperparams { kind: OptimizerKind::SgdMomentum, clip_norm: Some(1.0), ..Default::default() };
        let mut state = OptimState::new(hp);
        let mut x = vec![0.0f64, 0.0];
        state.apply_step(&mut [ParamUpdate { value: &mut x, grad: &[3.0, 4.0], decay: false }], 1.0).unwrap();
        assert!((x[0] + 0.6).abs() < 1e-15 && (x[1] + 0.8).abs() < 1e-15);
    }
}
