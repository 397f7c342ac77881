//! One-axis sweeps over rank or learning-rate multiplier.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::config::RunConfig;
use crate::tasks::train::run_training;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Rank,
    LrMultiplier,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Rank => "rank",
            SweepAxis::LrMultiplier => "lr_multiplier",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(SweepAxis::Rank),
            "lr-multiplier" | "lr_multiplier" => Ok(SweepAxis::LrMultiplier),
            _ => Err(Error::InvalidInput(format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub trainable_params: usize,
    pub final_loss: f64,
    pub final_metric: f64,
}

pub const CSV_HEADER: &str = "value,trainable_params,final_loss,final_metric";

/// Config for one sweep point, with outputs redirected into `out_dir`.
pub fn sweep_point(base: &RunConfig, axis: SweepAxis, value: f64, out_dir: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = base.clone();
    let tag = match axis {
        SweepAxis::Rank => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(Error::InvalidInput(format!("rank {value} is not a positive integer")));
            }
            cfg.rank = Some(value as usize);
            format!("rank_{}", value as usize)
        }
        SweepAxis::LrMultiplier => {
            cfg.lr_multiplier = value;
            format!("lr_multiplier_{value}")
        }
    };
    cfg.output.metrics = out_dir.map(|d| d.join(format!("{tag}.metrics.jsonl")));
    cfg.output.checkpoint = out_dir.map(|d| d.join(format!("{tag}.svfc")));
    cfg.validate()?;
    Ok(cfg)
}

/// Runs every point in parallel; rows come back in `values` order. Every
/// point is validated before any run starts.
pub fn run_sweep(base: &RunConfig, axis: SweepAxis, values: &[f64], out_dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| sweep_point(base, axis, v, out_dir))
        .collect::<Result<Vec<_>>>()?;
    configs
        .par_iter()
        .zip(values)
        .map(|(cfg, &value)| {
            let out = run_training(cfg)?;
            Ok(SweepRow {
                value,
                trainable_params: out.trainable_params,
                final_loss: out.final_record.train_loss,
                final_metric: out.final_record.eval_metric,
            })
        })
        .collect()
}

pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.value, r.trainable_params, r.final_loss, r.final_metric);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::Method;
    use crate::tasks::config::TaskKind;

    fn base() -> RunConfig {
        let mut cfg = RunConfig::new(TaskKind::TeacherStudent, Method::Svfit, 2);
        cfg.teacher.d_out = 6;
        cfg.teacher.d_in = 6;
        cfg.teacher.n_samples = 32;
        cfg.teacher.n_eval = 8;
        cfg.epochs = 3;
        cfg
    }

    #[test]
    fn rows_follow_value_order() {
        let rows = run_sweep(&base(), SweepAxis::Rank, &[4.0, 1.0, 2.0], None).unwrap();
        let params: Vec<usize> = rows.iter().map(|r| r.trainable_params).collect();
        assert_eq!(params, vec![4, 1, 2]);
        let csv = rows_to_csv(&rows);
        assert!(csv.starts_with("value,trainable_params,final_loss,final_metric\n4,4,"));
    }

    #[test]
    fn bad_points_fail_before_running() {
        assert!(run_sweep(&base(), SweepAxis::Rank, &[2.0, 7.0], None).is_err());
        assert!(run_sweep(&base(), SweepAxis::Rank, &[1.5], None).is_err());
        assert!(run_sweep(&base(), SweepAxis::LrMultiplier, &[-1.0], None).is_err());
    }
}
