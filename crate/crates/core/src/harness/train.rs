use std::path::PathBuf;

use crate::dataset::{compute_channel_stats, split, ChannelStats, Dataset, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::neural::model::{DEFAULT_ATTENTION_CHANNELS, DEFAULT_WIDTH};
use crate::neural::{init_params, model_backward, save_checkpoint, target_batch, ModelParams, Variant};
use crate::optim::{ranger_step_model, OptState, RangerConfig};
use crate::rng::{derive_stream, RngState};

use super::eval::evaluate;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub channels: usize,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Standardize inputs with the training set's channel statistics; when
    /// off, identity statistics are stored instead.
    pub standardize: bool,
    pub data: Option<PathBuf>,
    /// Checkpoint written after the last epoch, when set.
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// The full-size recipe: width 320, 20 attention channels, 30 epochs of
    /// batch 64 at lr 2e-4.
    fn default() -> Self {
        Self {
            variant: Variant::EddyNet,
            channels: DEFAULT_WIDTH,
            k: DEFAULT_ATTENTION_CHANNELS,
            epochs: 30,
            batch_size: 64,
            lr: 2e-4,
            seed: 0,
            standardize: true,
            data: None,
            out: None,
        }
    }
}

impl TrainConfig {
    /// Width 64 for 15 epochs, sized for a single CPU.
    pub fn desk() -> Self {
        Self {
            channels: 64,
            epochs: 15,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad(format!(
                "batch size ({}) and epochs ({}) must be at least 1",
                self.batch_size, self.epochs
            ));
        }
        if self.channels == 0 || self.k == 0 {
            return bad(format!(
                "width ({}) and attention channels ({}) must be at least 1",
                self.channels, self.k
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses seen during the epoch.
    pub train_loss: f64,
    /// Raw MAE on the validation set after the epoch; `None` without one.
    pub val_raw_mae: Option<f64>,
    /// Optimizer steps taken so far.
    pub steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
}

/// Splits 80/20 by position and attaches statistics of the training part to
/// both halves.
pub fn prepare_splits(data: &Dataset) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = split(data, DEFAULT_TRAIN_FRACTION)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} samples are too few to split",
            data.len()
        )));
    }
    let stats = compute_channel_stats(&train)?;
    train.stats = Some(stats);
    test.stats = Some(stats);
    Ok((train, test))
}

fn shuffle(order: &mut [usize], rng: &mut RngState) {
    for i in (1..order.len()).rev() {
        let j = rng.next_below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
}

/// Trains a fresh model. Weights come from stream 0 of `cfg.seed` and the
/// shuffle of epoch `e` from stream `e + 1`, so a run is fully determined by
/// the config and the data.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let stats = match (cfg.standardize, train_set.stats) {
        (false, _) => ChannelStats::identity(),
        (true, Some(stats)) => stats,
        (true, None) => return Err(Error::InvalidArgument("training set has no channel statistics".into())),
    };
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut params: ModelParams<f32> = init_params(cfg.variant, cfg.channels, cfg.k, &mut derive_stream(cfg.seed, 0));
    params.stats = stats;
    let mut state = OptState::for_model(RangerConfig::with_lr(cfg.lr), &params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        shuffle(&mut order, &mut derive_stream(cfg.seed, 1 + epoch as u64));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<_> = chunk.iter().map(|&i| &train_set.samples[i]).collect();
            let out = model_backward(&params, &params.input_batch(&samples), &target_batch(&samples))?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {} at epoch {epoch}, batch {b}",
                    out.loss
                )));
            }
            loss_sum += out.loss * chunk.len() as f64;
            params.apply_running_updates(&out.running);
            ranger_step_model(&mut params, &out.grads, &mut state).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            })?;
        }
        let val_raw_mae = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&params, val_set)?.raw_mae)
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_raw_mae,
            steps: state.t,
        });
    }
    if let Some(path) = &cfg.out {
        save_checkpoint(&params, path)?;
    }
    Ok(TrainOutcome { params, history })
}
