//! Experiment drivers: synthetic tasks, image reconstruction, training runs
//! and sweeps.

pub mod blobs;
pub mod config;
pub mod image;
pub mod sweep;
pub mod teacher;
pub mod train;

pub use blobs::{gen_blobs, BlobsDataset};
pub use config::{LayerParams, ParamReport, RunConfig, TaskKind};
pub use image::{reconstruct_image, reconstruct_ranks, test_image, GrayImage, Order, Reconstruction};
pub use sweep::{run_sweep, SweepAxis, SweepRow};
pub use teacher::{gen_teacher_student, Perturbation, TeacherStudent};
pub use train::{pretrain_stack, run_training, MetricsRecord, RunOutcome};
