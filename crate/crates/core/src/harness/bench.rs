use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::neural::{model_forward, Mode, ModelParams, Tensor};
use crate::rng::RngState;
use crate::simulate::{N_CHANNELS, SCAN_H, SCAN_W};

pub const DEFAULT_BENCH_BATCHES: [usize; 2] = [64, 1];
pub const WARMUP_RUNS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub batch: usize,
    /// Median seconds per forward pass of the whole batch.
    pub median_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub repeats: usize,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<28}{:>10}\n", "Reconstruction time (sec)", "CPU");
        for r in &self.rows {
            let _ = writeln!(s, "{:<28}{:>10.4}", format!("batch size {}", r.batch), r.median_seconds);
        }
        s
    }
}

pub(crate) fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall-clock time of an eval-mode forward pass at each batch size.
/// Inputs are already-standardized Gaussian maps, so only the network is
/// timed.
pub fn benchmark_reconstruction(
    params: &ModelParams<f32>,
    batch_sizes: &[usize],
    repeats: usize,
) -> Result<BenchReport> {
    if repeats == 0 || batch_sizes.contains(&0) {
        return Err(Error::InvalidArgument(
            "repeats and batch sizes must be at least 1".into(),
        ));
    }
    let mut rng = RngState::new(0);
    let mut rows = Vec::new();
    for &batch in batch_sizes {
        let len = batch * N_CHANNELS * SCAN_H * SCAN_W;
        let x = Tensor::new(
            vec![batch, N_CHANNELS, SCAN_H, SCAN_W],
            (0..len).map(|_| rng.next_gaussian() as f32).collect(),
        )?;
        for _ in 0..WARMUP_RUNS {
            model_forward(params, &x, Mode::Eval)?;
        }
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            model_forward(params, &x, Mode::Eval)?;
            times.push(start.elapsed().as_secs_f64());
        }
        rows.push(BenchRow {
            batch,
            median_seconds: median(times),
        });
    }
    Ok(BenchReport { rows, repeats })
}
