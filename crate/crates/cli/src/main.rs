//! `svfit` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid data or config,
//! 3 numerical failure (non-convergence, divergence, merge discrepancy).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use svfit::io::{self, TensorSet};
use svfit::linalg::{spectrum_report, svd};
use svfit::tasks::sweep::{rows_to_csv, run_sweep, sweep_point, SweepAxis};
use svfit::tasks::{pretrain_stack, reconstruct_ranks, run_training, test_image, Order, RunConfig};
use svfit::{adapt, Error, Method, Result};

#[derive(Parser)]
#[command(name = "svfit", version, about = "Singular-value fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Singular values and energy ratios of a matrix file.
    SvdAnalyze {
        file: PathBuf,
        /// Number of leading singular values to print.
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        json: bool,
    },
    /// Truncated-SVD reconstructions of a PGM image.
    Reconstruct {
        #[arg(required_unless_present = "builtin", conflicts_with = "builtin")]
        image: Option<PathBuf>,
        /// Use the bundled 256×256 test image.
        #[arg(long)]
        builtin: bool,
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        #[arg(long, default_value = "top")]
        order: Order,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// One training run.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        rank: Option<usize>,
        /// Overrides `lr_base`.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Runs over several ranks or learning-rate multipliers.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        /// Defaults to `lr_multiplier_sweep` from the config on that axis.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Folds every adapter of a checkpoint into dense matrices.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the probe inputs used to check the merge.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Trainable parameter counts implied by a config.
    ParamCount {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Pre-trains the toy attention stack on a seeded source task.
    GenPretrained {
        /// `n_blocks,d_model`
        #[arg(long, value_delimiter = ',', num_args = 1, required = true)]
        dims: Vec<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 4)]
        seq_len: usize,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long)]
        force: bool,
    },
}

const MERGE_PROBES: usize = 16;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SvdAnalyze { file, top, json } => svd_analyze(&file, top, json),
        Command::Reconstruct { image, builtin: _, ranks, order, out_dir, force } => {
            reconstruct(image.as_deref(), &ranks, order, &out_dir, force)
        }
        Command::Train { config, method, rank, lr, seed, force } => {
            let mut cfg = load_config(&config)?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if rank.is_some() {
                cfg.rank = rank;
            }
            if let Some(lr) = lr {
                cfg.lr_base = lr;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            train(&cfg, force)
        }
        Command::Sweep { config, axis, values, out_dir, force } => sweep(&config, axis, values, &out_dir, force),
        Command::Merge { checkpoint, out, seed, force } => merge(&checkpoint, &out, seed, force),
        Command::ParamCount { config, json } => param_count(&config, json),
        Command::GenPretrained { dims, seed, out, classes, seq_len, steps, force } => {
            let [n_blocks, d_model] = dims[..] else {
                return Err(Error::InvalidInput(format!("--dims wants n_blocks,d_model, got {} values", dims.len())));
            };
            check_fresh(&out, force)?;
            let weights = pretrain_stack(n_blocks, d_model, classes, seq_len, steps, seed)?;
            io::write_checkpoint(&out, &weights.to_tensors())?;
            println!("wrote {} blocks of width {d_model} to {}", n_blocks, out.display());
            Ok(())
        }
    }
}

/// Refuses to overwrite an existing path unless `force` is set.
fn check_fresh(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::InvalidInput(format!("{} already exists (pass --force to overwrite)", path.display())));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn svd_analyze(file: &Path, top: usize, json: bool) -> Result<()> {
    let w = io::read_matrix(file)?;
    let f = svd(&w)?;
    let report = spectrum_report(w.rows(), w.cols(), &f.sigma, top)?;
    if json {
        return print_json(&report);
    }
    println!("{}x{} matrix, {} singular values", report.rows, report.cols, f.sigma.len());
    let values: Vec<String> = report.top.iter().map(|s| format!("{s:.6}")).collect();
    println!("top {}: {}", report.top.len(), values.join(" "));
    println!("{:>6} {:>6} {:>10} {:>10}", "frac", "r", "nuclear", "frobenius");
    for p in &report.energy {
        println!("{:>5.0}% {:>6} {:>10.6} {:>10.6}", p.fraction * 100.0, p.r, p.nuclear, p.frobenius);
    }
    Ok(())
}

#[derive(Serialize)]
struct RankReport {
    r: usize,
    file: String,
    mse: f64,
    psnr: f64,
    nuclear: f64,
    frobenius: f64,
}

#[derive(Serialize)]
struct ReconstructReport {
    image: String,
    width: usize,
    height: usize,
    order: Order,
    ranks: Vec<RankReport>,
}

fn reconstruct(image: Option<&Path>, ranks: &[usize], order: Order, out_dir: &Path, force: bool) -> Result<()> {
    let (img, stem, source) = match image {
        Some(path) => {
            let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            (io::read_pgm(path)?, stem, path.display().to_string())
        }
        None => (test_image(), "builtin".to_string(), "builtin".to_string()),
    };
    let names: Vec<String> = ranks.iter().map(|r| format!("{stem}_{}_{r}.pgm", order.name())).collect();
    let report_path = out_dir.join("report.json");
    for name in &names {
        check_fresh(&out_dir.join(name), force)?;
    }
    check_fresh(&report_path, force)?;
    let recs = reconstruct_ranks(&img, ranks, order)?;

    create_dir(out_dir)?;
    let mut rows = Vec::new();
    for ((&r, name), rec) in ranks.iter().zip(names).zip(recs) {
        io::write_pgm(out_dir.join(&name), &rec.image)?;
        println!("r={r:<4} psnr={:.3} dB  frobenius={:.6}  {name}", rec.psnr, rec.energy.frobenius);
        rows.push(RankReport {
            r,
            file: name,
            mse: rec.mse,
            psnr: rec.psnr,
            nuclear: rec.energy.nuclear,
            frobenius: rec.energy.frobenius,
        });
    }
    let report = ReconstructReport { image: source, width: img.width(), height: img.height(), order, ranks: rows };
    io::write_json(&report_path, &report)
}

fn train(cfg: &RunConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    for path in [&cfg.output.metrics, &cfg.output.checkpoint].into_iter().flatten() {
        check_fresh(path, force)?;
    }
    let out = run_training(cfg)?;
    let r = &out.final_record;
    println!(
        "step={} train_loss={:.6e} eval_metric={:.6e} trainable_params={}",
        r.step, r.train_loss, r.eval_metric, out.trainable_params
    );
    Ok(())
}

fn sweep(config: &Path, axis: SweepAxis, values: Vec<f64>, out_dir: &Path, force: bool) -> Result<()> {
    let base = load_config(config)?;
    let values = if values.is_empty() && axis == SweepAxis::LrMultiplier {
        base.lr_multiplier_sweep.clone()
    } else {
        values
    };
    if values.is_empty() {
        return Err(Error::InvalidInput("no sweep values given".into()));
    }
    let csv_path = out_dir.join("sweep.csv");
    let json_path = out_dir.join("sweep.json");
    for &v in &values {
        let point = sweep_point(&base, axis, v, Some(out_dir))?;
        for path in [&point.output.metrics, &point.output.checkpoint].into_iter().flatten() {
            check_fresh(path, force)?;
        }
    }
    check_fresh(&csv_path, force)?;
    check_fresh(&json_path, force)?;

    create_dir(out_dir)?;
    let rows = run_sweep(&base, axis, &values, Some(out_dir))?;
    let csv = rows_to_csv(&rows);
    fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    io::write_json(&json_path, &rows)?;
    print!("{csv}");
    Ok(())
}

fn merge(checkpoint: &Path, out: &Path, seed: u64, force: bool) -> Result<()> {
    check_fresh(out, force)?;
    let set: TensorSet = io::read_checkpoint(checkpoint)?;
    let report = adapt::merge_checkpoint(&set, MERGE_PROBES, seed)?;
    for layer in &report.layers {
        println!("{} ({}): discrepancy {:.3e}", layer.name, layer.method, layer.discrepancy);
    }
    println!("max discrepancy {:.3e} over {} layers", report.max_discrepancy, report.layers.len());
    io::write_checkpoint(out, &report.merged)
}

fn param_count(config: &Path, json: bool) -> Result<()> {
    let report = load_config(config)?.param_report()?;
    if json {
        return print_json(&report);
    }
    for l in &report.layers {
        println!("{:<16} {}x{} {}", l.name, l.d1, l.d2, l.params);
    }
    println!("total {} ({} r={})", report.total, report.method, report.rank);
    Ok(())
}
