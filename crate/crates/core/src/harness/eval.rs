use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::dataset::{Dataset, Sample};
use crate::error::{shape_err, Error, Result};
use crate::neural::{model_forward, Mode, ModelParams, Real, Tensor, Variant};
use crate::simulate::PROFILE_LEN;

use super::train::{train, EpochRecord, TrainConfig};

/// Outputs at or above this value count as crack.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

const EVAL_BATCH: usize = 64;

pub fn binarize_values<T: Real>(values: &[T], threshold: f64) -> Vec<T> {
    let t = T::cast(threshold);
    values
        .iter()
        .map(|&v| if v >= t { T::one() } else { T::zero() })
        .collect()
}

pub fn binarize<T: Real>(profile: &Tensor<T>, threshold: f64) -> Tensor<T> {
    Tensor::new(profile.shape().to_vec(), binarize_values(profile.data(), threshold)).expect("same shape")
}

/// Eval-mode outputs, one 480-cell profile per sample, in sample order.
pub fn predict(params: &ModelParams<f32>, samples: &[Sample]) -> Result<Vec<Vec<f32>>> {
    let batches = samples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let refs: Vec<&Sample> = chunk.iter().collect();
            model_forward(params, &params.input_batch(&refs), Mode::Eval)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(batches
        .iter()
        .flat_map(|b| b.data().chunks_exact(PROFILE_LEN).map(<[f32]>::to_vec))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub variant: Variant,
    pub raw_mae: f64,
    pub binarized_mae: f64,
    pub per_sample_raw: Vec<f64>,
    pub per_sample_binarized: Vec<f64>,
    /// Wall-clock seconds spent in forward passes.
    pub forward_seconds: f64,
}

impl EvalReport {
    /// Same metrics, ignoring timing.
    pub fn same_metrics(&self, other: &Self) -> bool {
        self.variant == other.variant
            && self.raw_mae.to_bits() == other.raw_mae.to_bits()
            && self.binarized_mae.to_bits() == other.binarized_mae.to_bits()
            && self.per_sample_raw == other.per_sample_raw
            && self.per_sample_binarized == other.per_sample_binarized
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model            {}", self.variant.display_name());
        let _ = writeln!(s, "test samples     {}", self.per_sample_raw.len());
        let _ = writeln!(s, "MAE (raw)        {:.4}", self.raw_mae);
        let _ = writeln!(s, "MAE (binarized)  {:.4}", self.binarized_mae);
        let _ = writeln!(s, "forward seconds  {:.3}", self.forward_seconds);
        s
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_mae(pred: &[f32], truth: &[u8]) -> f64 {
    pred.iter()
        .zip(truth)
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum::<f64>()
        / PROFILE_LEN as f64
}

/// Raw and binarized MAE over every sample of `test`, with batch norm in
/// eval mode. Aggregates are the means of the per-sample values.
pub fn evaluate(params: &ModelParams<f32>, test: &Dataset) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let start = Instant::now();
    let preds = predict(params, &test.samples)?;
    let forward_seconds = start.elapsed().as_secs_f64();
    if preds.len() != test.len() {
        return Err(shape_err(format!(
            "{} predictions for {} samples",
            preds.len(),
            test.len()
        )));
    }
    let (mut per_sample_raw, mut per_sample_binarized) = (Vec::new(), Vec::new());
    for (p, s) in preds.iter().zip(&test.samples) {
        per_sample_raw.push(sample_mae(p, s.profile.cells()));
        per_sample_binarized.push(sample_mae(&binarize_values(p, BINARIZE_THRESHOLD), s.profile.cells()));
    }
    Ok(EvalReport {
        variant: params.variant,
        raw_mae: mean(&per_sample_raw),
        binarized_mae: mean(&per_sample_binarized),
        per_sample_raw,
        per_sample_binarized,
        forward_seconds,
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub report: EvalReport,
    pub history: Vec<EpochRecord>,
}

/// Trains every variant from `base` on the same split and evaluates each on
/// the same test set. Checkpoints land in `checkpoint_dir` as
/// `<variant>.eck` when a directory is given.
pub fn run_ablations(
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig {
                variant,
                out: checkpoint_dir.map(|d| d.join(format!("{variant}.eck"))),
                ..base.clone()
            };
            let outcome = train(&cfg, train_set, test_set)?;
            Ok(AblationRow {
                report: evaluate(&outcome.params, test_set)?,
                history: outcome.history,
            })
        })
        .collect()
}

/// Variants as columns, raw and binarized MAE as rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<17}", "");
    for r in rows {
        let _ = write!(s, "{:>13}", r.report.variant.display_name());
    }
    s.push('\n');
    for (label, pick) in [("MAE (raw)", 0), ("MAE (binarized)", 1)] {
        let _ = write!(s, "{label:<17}");
        for r in rows {
            let v = if pick == 0 {
                r.report.raw_mae
            } else {
                r.report.binarized_mae
            };
            let _ = write!(s, "{v:>13.4}");
        }
        s.push('\n');
    }
    s
}
