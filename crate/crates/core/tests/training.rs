mod common;

use std::fs;

use common::*;
use svfit::adapt::merge_checkpoint;
use svfit::io;
use svfit::linalg::svd;
use svfit::tasks::sweep::{rows_to_csv, run_sweep, SweepAxis};
use svfit::tasks::teacher::{gen_teacher_student, Perturbation};
use svfit::tasks::train::MetricsRecord;
use svfit::tasks::{run_training, RunConfig, TaskKind};
use svfit::{AdapterLayer, Method};

fn teacher(method: Method) -> RunConfig {
    let mut cfg = RunConfig::new(TaskKind::TeacherStudent, method, 3);
    cfg.epochs = 250;
    cfg
}

fn small_blobs(method: Method) -> RunConfig {
    let mut cfg = RunConfig::new(TaskKind::Blobs, method, 1);
    cfg.model.d_model = 16;
    cfg.rank = Some(8);
    cfg.epochs = 40;
    cfg.train_head = false;
    cfg.blobs.pretrain_steps = 200;
    cfg
}

#[test]
fn teacher_student_realizable_by_svfit() {
    let cfg = teacher(Method::Svfit);
    let out = run_training(&cfg).unwrap();
    assert_eq!(out.final_record.step, 2000);
    let ratio = out.final_record.train_loss / out.records[0].train_loss;
    assert!(ratio <= 1e-4, "final/initial = {ratio:e}");
}

#[test]
fn perturbed_sigma_is_the_optimum() {
    // direct substitution: the perturbed singular values on w0's bases reproduce w_star
    let data = gen_teacher_student(3, 16, 16, 16, Perturbation::SigmaOnly, 0.5, 8).unwrap();
    let mut layer = AdapterLayer::init_svfit(&data.w0, 16).unwrap();
    layer.trainable_buffers_mut()[0].copy_from_slice(&data.perturbed_sigma);
    assert!(frob_diff(&layer.merge(), &data.w_star) <= 1e-10 * frob(&data.w_star));
    let mut sorted = data.perturbed_sigma.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let recomputed = svd(&data.w_star).unwrap().sigma;
    assert!(sorted.iter().zip(&recomputed).all(|(a, b)| (a - b).abs() <= 1e-8));
}

#[test]
fn frozen_run_is_exactly_flat() {
    let mut cfg = teacher(Method::Frozen);
    cfg.epochs = 3;
    let out = run_training(&cfg).unwrap();
    assert!(out.records.iter().all(|r| r.train_loss == out.records[0].train_loss));

    let mut cfg = small_blobs(Method::Frozen);
    cfg.epochs = 3;
    let out = run_training(&cfg).unwrap();
    assert!(out.records.iter().all(|r| r.train_loss == out.records[0].train_loss));
}

#[test]
fn adapted_stacks_beat_frozen_everything() {
    let frozen = run_training(&small_blobs(Method::Frozen)).unwrap().final_record.eval_metric;
    for method in [Method::Svfit, Method::Lora, Method::Full] {
        let acc = run_training(&small_blobs(method)).unwrap().final_record.eval_metric;
        assert!(acc > frozen, "{method}: {acc} vs frozen {frozen}");
    }
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for i in 0..2 {
        let mut cfg = small_blobs(Method::Svfit);
        cfg.epochs = 4;
        cfg.log_every = 3;
        cfg.output.metrics = Some(dir.path().join(format!("m{i}.jsonl")));
        cfg.output.checkpoint = Some(dir.path().join(format!("c{i}.svfc")));
        run_training(&cfg).unwrap();
        bytes.push((
            fs::read(cfg.output.metrics.unwrap()).unwrap(),
            fs::read(cfg.output.checkpoint.unwrap()).unwrap(),
        ));
    }
    assert_eq!(bytes[0], bytes[1]);
    let text = String::from_utf8(bytes[0].0.clone()).unwrap();
    let recs: Vec<MetricsRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), [0, 3, 6, 9, 12, 15, 18, 21, 24, 27, 30, 32]);
    assert!(recs.iter().all(|r| r.sigma_snapshot.as_ref().is_some_and(|s| s.len() == 8)));
}

#[test]
fn trained_checkpoint_merges() {
    let dir = tempfile::tempdir().unwrap();
    for method in [Method::Svfit, Method::Lora] {
        let mut cfg = teacher(method);
        cfg.rank = Some(4);
        cfg.epochs = 2;
        let path = dir.path().join(format!("{method}.svfc"));
        cfg.output.checkpoint = Some(path.clone());
        run_training(&cfg).unwrap();
        let rep = merge_checkpoint(&io::read_checkpoint(&path).unwrap(), 16, 0).unwrap();
        assert_eq!(rep.layers.len(), 1);
        assert!(rep.max_discrepancy <= 1e-9);
    }
}

#[test]
fn rank_sweep_accounting() {
    let mut cfg = teacher(Method::Svfit);
    cfg.epochs = 2;
    let rows = run_sweep(&cfg, SweepAxis::Rank, &[8.0, 16.0], None).unwrap();
    assert_eq!(rows.iter().map(|r| r.trainable_params).collect::<Vec<_>>(), [8, 16]);

    let mut blobs = small_blobs(Method::Svfit);
    blobs.epochs = 1;
    let rows = run_sweep(&blobs, SweepAxis::Rank, &[2.0, 4.0], None).unwrap();
    // two blocks, Q and V each
    assert_eq!(rows.iter().map(|r| r.trainable_params).collect::<Vec<_>>(), [8, 16]);
}

#[test]
fn lr_sweep_records_distinct_losses() {
    let mut cfg = teacher(Method::Lora);
    cfg.rank = Some(4);
    cfg.epochs = 3;
    let rows = run_sweep(&cfg, SweepAxis::LrMultiplier, &[1.0, 10.0], None).unwrap();
    assert_eq!(rows.len(), 2);
    assert_ne!(rows[0].final_loss, rows[1].final_loss);
    assert!(rows_to_csv(&rows).starts_with("value,trainable_params,final_loss,final_metric\n1,"));
}

#[test]
fn rank_grid_on_one_768_matrix() {
    // single 768×768 matrix: the rank grid maps one-to-one onto trainable counts
    for r in [8, 16, 32, 64, 128, 256, 512, 768] {
        let cfg = RunConfig::from_json(&format!(
            r#"{{"task":"teacher_student","method":"svfit","seed":0,"rank":{r},"teacher":{{"d_out":768,"d_in":768}}}}"#
        ))
        .unwrap();
        assert_eq!(cfg.param_report().unwrap().total, r);
    }
}

#[test]
fn divergence_keeps_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = teacher(Method::Full);
    cfg.optimizer = svfit::optim::OptimizerKind::SgdMomentum;
    cfg.lr_base = 1e12;
    cfg.warmup_ratio = 0.0;
    cfg.log_every = 1;
    cfg.output.metrics = Some(dir.path().join("m.jsonl"));
    cfg.output.checkpoint = Some(dir.path().join("c.svfc"));
    let err = run_training(&cfg).unwrap_err();
    assert!(err.is_numerical());
    let lines = fs::read_to_string(cfg.output.metrics.unwrap()).unwrap().lines().count();
    assert!(lines >= 1);
    assert!(!cfg.output.checkpoint.unwrap().exists());
}
