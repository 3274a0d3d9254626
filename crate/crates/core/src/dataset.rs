//! Simulated (profile, response) pairs: assembly, split, normalization and
//! the `.ecd` file format.
//!
//! Layout of an `.ecd` file (little-endian):
//!
//! ```text
//! "ECD1" | u32 version=1 | u64 seed | u32 n_samples
//! u16 profile_h=40 | u16 profile_w=12 | u16 chans=6 | u16 resp_h=40 | u16 resp_w=40
//! 3 x f64 skin depths | f64 sigma_y | f64 sigma_x | u16 x0 | u16 x1 | f64 gamma
//! 3 x (f64 re, f64 im) calibration
//! u8 has_stats [6 x f64 mean, 6 x f64 std]
//! n_samples x (480 x f32 profile, 9600 x f32 channels)
//! ```

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::neural::Real;
use crate::rng::derive_stream;
use crate::simulate::{
    forward_operate, generate_raw_profile, median_filter_3x3, CrackProfile, SimConfig, CHANNELS_LEN, N_CHANNELS,
    N_FREQ, PROFILE_H, PROFILE_LEN, PROFILE_W, SCAN_H, SCAN_W,
};

const MAGIC: &[u8; 4] = b"ECD1";
const VERSION: u32 = 1;

/// Guard added to the standard deviation when standardizing.
pub const STD_EPS: f64 = 1e-8;

/// Fraction of samples routed to training by default.
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub profile: CrackProfile,
    /// `[Re f1, Im f1, Re f2, Im f2, Re f3, Im f3]`, each 40x40 row-major.
    pub channels: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; N_CHANNELS],
    pub std: [f64; N_CHANNELS],
}

impl ChannelStats {
    /// Stats that leave inputs unchanged up to the `STD_EPS` guard.
    pub fn identity() -> Self {
        Self {
            mean: [0.0; N_CHANNELS],
            std: [1.0; N_CHANNELS],
        }
    }

    /// Standardizes one sample's channels into `out`.
    pub fn standardize_into<T: Real>(&self, channels: &[f32], out: &mut [T]) {
        let plane = SCAN_H * SCAN_W;
        for c in 0..N_CHANNELS {
            let mean = self.mean[c];
            let scale = 1.0 / (self.std[c] + STD_EPS);
            for (o, &x) in out[c * plane..(c + 1) * plane]
                .iter_mut()
                .zip(&channels[c * plane..(c + 1) * plane])
            {
                *o = T::cast((x as f64 - mean) * scale);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub sim_config: SimConfig,
    pub seed: u64,
    pub stats: Option<ChannelStats>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Sample `index` of the stream `seed`; depends on nothing else.
pub fn build_sample(seed: u64, index: u64, cfg: &SimConfig) -> Sample {
    let mut rng = derive_stream(seed, index);
    let profile = median_filter_3x3(&generate_raw_profile(&mut rng));
    let channels = forward_operate(&profile, cfg).to_channels();
    Sample { profile, channels }
}

pub fn build_dataset(n: usize, seed: u64, cfg: &SimConfig) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    let samples = (0..n as u64)
        .into_par_iter()
        .map(|i| build_sample(seed, i, cfg))
        .collect();
    Ok(Dataset {
        samples,
        sim_config: cfg.clone(),
        seed,
        stats: None,
    })
}

/// Same as [`build_dataset`] on a dedicated pool of `workers` threads.
pub fn build_dataset_with_workers(n: usize, seed: u64, cfg: &SimConfig, workers: usize) -> Result<Dataset> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| build_dataset(n, seed, cfg))
}

/// Prefix split: the first `floor(n * train_fraction)` samples train.
pub fn split(d: &Dataset, train_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let cut = (d.len() as f64 * train_fraction).floor() as usize;
    let part = |samples: &[Sample]| Dataset {
        samples: samples.to_vec(),
        sim_config: d.sim_config.clone(),
        seed: d.seed,
        stats: d.stats,
    };
    Ok((part(&d.samples[..cut]), part(&d.samples[cut..])))
}

/// Per-channel mean and population standard deviation over every pixel.
pub fn compute_channel_stats(train: &Dataset) -> Result<ChannelStats> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("channel statistics need a nonempty set".into()));
    }
    let plane = SCAN_H * SCAN_W;
    let count = (train.len() * plane) as f64;
    let mut mean = [0.0; N_CHANNELS];
    let mut std = [0.0; N_CHANNELS];
    for c in 0..N_CHANNELS {
        let pixels = || {
            train
                .samples
                .iter()
                .flat_map(|s| &s.channels[c * plane..(c + 1) * plane])
        };
        let m = pixels().map(|&x| x as f64).sum::<f64>() / count;
        let var = pixels().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / count;
        mean[c] = m;
        std[c] = var.sqrt();
    }
    Ok(ChannelStats { mean, std })
}

fn encode(d: &Dataset) -> Result<Vec<u8>> {
    let n = u32::try_from(d.len()).map_err(|_| Error::InvalidArgument("too many samples".into()))?;
    let cfg = &d.sim_config;
    let mut w = ByteWriter::default();
    w.buf.reserve(128 + d.len() * (PROFILE_LEN + CHANNELS_LEN) * 4);
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(d.seed);
    w.u32(n);
    for dim in [PROFILE_H, PROFILE_W, N_CHANNELS, SCAN_H, SCAN_W] {
        w.u16(dim as u16);
    }
    for v in cfg.skin_depths {
        w.f64(v);
    }
    w.f64(cfg.sigma_y);
    w.f64(cfg.sigma_x);
    w.u16(cfg.crack_x.0);
    w.u16(cfg.crack_x.1);
    w.f64(cfg.gamma);
    for c in cfg.calibration {
        w.f64(c.re);
        w.f64(c.im);
    }
    match &d.stats {
        Some(s) => {
            w.u8(1);
            s.mean.iter().chain(&s.std).for_each(|&v| w.f64(v));
        }
        None => w.u8(0),
    }
    for s in &d.samples {
        if s.channels.len() != CHANNELS_LEN {
            return Err(Error::Shape(format!("sample has {} channel values", s.channels.len())));
        }
        w.f32s(s.profile.cells().iter().map(|&c| c as f32));
        w.f32s(s.channels.iter().copied());
    }
    Ok(w.buf)
}

fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let seed = r.u64("seed")?;
    let n = r.u32("sample count")? as usize;
    let dims = [PROFILE_H, PROFILE_W, N_CHANNELS, SCAN_H, SCAN_W];
    for (i, expected) in dims.into_iter().enumerate() {
        let found = r.u16("geometry")? as usize;
        if found != expected {
            return Err(Error::Shape(format!(
                "geometry field {i} is {found}, expected {expected}"
            )));
        }
    }
    let mut skin_depths = [0.0; N_FREQ];
    for d in &mut skin_depths {
        *d = r.f64("skin depth")?;
    }
    let sigma_y = r.f64("sigma_y")?;
    let sigma_x = r.f64("sigma_x")?;
    let crack_x = (r.u16("x0")?, r.u16("x1")?);
    let gamma = r.f64("gamma")?;
    let mut calibration = [Complex64::new(0.0, 0.0); N_FREQ];
    for c in &mut calibration {
        *c = Complex64::new(r.f64("calibration")?, r.f64("calibration")?);
    }
    let sim_config = SimConfig {
        skin_depths,
        sigma_y,
        sigma_x,
        crack_x,
        gamma,
        calibration,
    };
    sim_config
        .validate()
        .map_err(|e| Error::Malformed(format!("stored simulation config: {e}")))?;
    let stats = match r.u8("stats flag")? {
        0 => None,
        1 => {
            let mut s = ChannelStats {
                mean: [0.0; N_CHANNELS],
                std: [0.0; N_CHANNELS],
            };
            for v in s.mean.iter_mut().chain(s.std.iter_mut()) {
                *v = r.f64("channel stats")?;
            }
            Some(s)
        }
        other => return Err(Error::Malformed(format!("stats flag {other}"))),
    };
    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let what = format!("sample {i}");
        let cells: Vec<u8> = r
            .f32s(PROFILE_LEN, &what)?
            .into_iter()
            .map(|v| match v {
                v if v == 0.0 => Ok(0),
                v if v == 1.0 => Ok(1),
                _ => Err(Error::Malformed(format!("{what}: profile cell {v} is not binary"))),
            })
            .collect::<Result<_>>()?;
        let profile = CrackProfile::from_grid(PROFILE_H, PROFILE_W, &cells)?;
        let channels = r.f32s(CHANNELS_LEN, &what)?;
        samples.push(Sample { profile, channels });
    }
    r.finish()?;
    Ok(Dataset {
        samples,
        sim_config,
        seed,
        stats,
    })
}

/// Serialized byte image of a dataset.
pub fn to_bytes(d: &Dataset) -> Result<Vec<u8>> {
    encode(d)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    decode(bytes)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(d)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode(&fs::read(path)?)
}
