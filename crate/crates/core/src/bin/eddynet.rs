use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eddynet::dataset::{build_dataset, build_dataset_with_workers, load_dataset, save_dataset};
use eddynet::harness::{
    ablation_table, benchmark_reconstruction, binarize_values, evaluate, pgm_bytes, predict, prepare_splits,
    run_ablations, train, write_error_montage, write_montage, GrayImage, TrainConfig, BINARIZE_THRESHOLD,
    DEFAULT_BENCH_BATCHES, MONTAGE_TILES,
};
use eddynet::neural::gradcheck::{ensure_passed, run_suite};
use eddynet::neural::{load_checkpoint, load_checkpoint_for, Variant};
use eddynet::simulate::{CrackProfile, SimConfig, PROFILE_H, PROFILE_W};
use eddynet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "eddynet",
    version,
    about = "Crack profile reconstruction from eddy-current response maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it as .ecd
    Gen {
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.15)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to all cores
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train one variant on the first 80% of a dataset
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eddynet")]
        variant: Variant,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Feed raw channels instead of standardized ones
        #[arg(long)]
        no_standardize: bool,
    },
    /// Evaluate a checkpoint on the last 20% of a dataset
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        montage_dir: PathBuf,
        /// Refuse checkpoints of any other variant
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Train and evaluate all four variants on one split
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 2e-4)]
        lr: f64,
    },
    /// Median forward time at batch sizes 64 and 1
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
    },
    /// Finite-difference check of every backward pass
    Gradcheck {
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
    /// Write one reconstructed profile as a grayscale PGM
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn profiles_from(values: &[Vec<f32>]) -> Result<Vec<CrackProfile>> {
    values
        .iter()
        .map(|v| {
            let cells: Vec<u8> = binarize_values(v, BINARIZE_THRESHOLD)
                .iter()
                .map(|&x| x as u8)
                .collect();
            CrackProfile::from_grid(PROFILE_H, PROFILE_W, &cells)
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            n,
            seed,
            gamma,
            out,
            workers,
        } => {
            let cfg = SimConfig::default().with_gamma(gamma)?;
            let d = match workers {
                Some(w) => build_dataset_with_workers(n, seed, &cfg, w)?,
                None => build_dataset(n, seed, &cfg)?,
            };
            save_dataset(&d, &out)?;
            println!("wrote {n} samples (seed {seed}, gamma {gamma}) to {}", out.display());
        }
        Command::Train {
            data,
            variant,
            channels,
            k,
            epochs,
            batch,
            lr,
            seed,
            out,
            no_standardize,
        } => {
            let cfg = TrainConfig {
                variant,
                channels,
                k,
                epochs,
                batch_size: batch,
                lr,
                seed,
                standardize: !no_standardize,
                data: Some(data.clone()),
                out: Some(out.clone()),
            };
            cfg.validate()?;
            let (train_set, test_set) = prepare_splits(&load_dataset(&data)?)?;
            let outcome = train(&cfg, &train_set, &test_set)?;
            println!("epoch  train_loss  val_raw_mae  steps");
            for h in &outcome.history {
                println!(
                    "{:>5}  {:>10.4}  {:>11.4}  {:>5}",
                    h.epoch,
                    h.train_loss,
                    h.val_raw_mae.unwrap_or(f64::NAN),
                    h.steps
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            data,
            model,
            report,
            montage_dir,
            variant,
        } => {
            let params = match variant {
                Some(v) => load_checkpoint_for(&model, v)?,
                None => load_checkpoint(&model)?,
            };
            let (_, test_set) = prepare_splits(&load_dataset(&data)?)?;
            let r = evaluate(&params, &test_set)?;
            fs::write(&report, r.to_text())?;
            fs::create_dir_all(&montage_dir)?;
            let shown = &test_set.samples[..test_set.len().min(MONTAGE_TILES)];
            let truth: Vec<CrackProfile> = shown.iter().map(|s| s.profile.clone()).collect();
            let pred = profiles_from(&predict(&params, shown)?)?;
            write_montage(&truth, montage_dir.join("truth.pgm"))?;
            write_montage(&pred, montage_dir.join("pred.pgm"))?;
            write_error_montage(&pred, &truth, montage_dir.join("error.pgm"))?;
            print!("{}", r.to_text());
        }
        Command::Ablate {
            data,
            seed,
            out_dir,
            channels,
            k,
            epochs,
            batch,
            lr,
        } => {
            let base = TrainConfig {
                channels,
                k,
                epochs,
                batch_size: batch,
                lr,
                seed,
                ..TrainConfig::default()
            };
            base.validate()?;
            let (train_set, test_set) = prepare_splits(&load_dataset(&data)?)?;
            fs::create_dir_all(&out_dir)?;
            let rows = run_ablations(&train_set, &test_set, &base, Some(&out_dir))?;
            let table = ablation_table(&rows);
            fs::write(out_dir.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::Bench { model, repeats } => {
            let params = load_checkpoint(&model)?;
            print!(
                "{}",
                benchmark_reconstruction(&params, &DEFAULT_BENCH_BATCHES, repeats)?.to_text()
            );
        }
        Command::Gradcheck { seed } => {
            let reports = run_suite(seed)?;
            for r in &reports {
                println!(
                    "{:<4} {:<32} {:>5} entries  max rel {:.3e}",
                    if r.passed() { "ok" } else { "FAIL" },
                    r.name,
                    r.entries,
                    r.max_rel_error
                );
            }
            ensure_passed(&reports)?;
        }
        Command::Reconstruct {
            model,
            data,
            index,
            out,
        } => {
            let params = load_checkpoint(&model)?;
            let d = load_dataset(&data)?;
            let sample = d
                .samples
                .get(index)
                .ok_or_else(|| Error::InvalidArgument(format!("index {index} out of range for {} samples", d.len())))?;
            let pred = predict(&params, std::slice::from_ref(sample))?.remove(0);
            let img = GrayImage {
                height: PROFILE_H,
                width: PROFILE_W,
                pixels: pred
                    .iter()
                    .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                    .collect(),
            };
            fs::write(&out, pgm_bytes(&img))?;
            let wrong = profiles_from(&[pred])?[0]
                .cells()
                .iter()
                .zip(sample.profile.cells())
                .filter(|(a, b)| a != b)
                .count();
            println!(
                "sample {index}: {wrong} of {} cells wrong after binarizing; wrote {}",
                PROFILE_H * PROFILE_W,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
