//! The EddyNet architecture, its ablations, and whole-network passes.
//!
//! Shape chain of the full model (any width `C`):
//!
//! ```text
//! 6x40x40 -E1-> Cx20x20 -E2-> Cx10x10 -E3-> Cx5x5 -E4-> Cx2x2 -E5-> 128x1x1
//!         -D1-> Cx5x3 -D2-> Cx10x6 -D3-> Cx20x12 -D4-> Cx40x12 -D5-> Kx40x12
//!         -attention-> 1x40x12 -sigmoid-> 1x40x12
//! ```
//!
//! | layer | op     | in -> out | kernel | stride | pad   |
//! |-------|--------|-----------|--------|--------|-------|
//! | E1    | conv   | 6 -> C    | 6x6    | 2      | 2     |
//! | E2    | conv   | C -> C    | 5x5    | 2      | 2     |
//! | E3    | conv   | C -> C    | 4x4    | 2      | 1     |
//! | E4    | conv   | C -> C    | 4x4    | 2      | 1     |
//! | E5    | conv   | C -> 128  | 4x4    | 1      | 1     |
//! | D1    | deconv | 128 -> C  | 5x3    | 1      | 0     |
//! | D2    | deconv | C -> C    | 4x4    | 2      | 1     |
//! | D3    | deconv | C -> C    | 4x4    | 2      | 1     |
//! | D4    | deconv | C -> C    | 4x3    | (2,1)  | (1,1) |
//! | D5    | deconv | C -> K    | 5x5    | 1      | 2     |
//!
//! E1-E4 and D1-D4 are followed by batch norm and an activation. The
//! `nodec` ablation keeps E1-E4, widens E5 to 480 channels and reshapes its
//! sigmoid output to 40x12; `noattn` has D5 emit one channel and skips the
//! attention; `relu` swaps Mish for ReLU (encoder) and LeakyReLU (decoder).
//!
//! Parameters are stored in table order. Per conv/deconv layer: `weight`
//! then `bias`; per batch norm: `gain`, `bias`, `running_mean`,
//! `running_var`.

use std::fmt;
use std::str::FromStr;

use crate::dataset::{ChannelStats, Sample};
use crate::error::{shape_err, Error, Result};
use crate::neural::ops::{self, Activation, BnCache, Mode, Pair, BN_MOMENTUM};
use crate::neural::tensor::{Real, Tensor};
use crate::rng::RngState;
use crate::simulate::{CHANNELS_LEN, N_CHANNELS, PROFILE_H, PROFILE_LEN, PROFILE_W, SCAN_H, SCAN_W};

pub const LATENT_DIM: usize = 128;
pub const DEFAULT_WIDTH: usize = 320;
pub const DEFAULT_ATTENTION_CHANNELS: usize = 20;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    EddyNet,
    NoDec,
    Relu,
    NoAttn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::EddyNet, Variant::NoDec, Variant::Relu, Variant::NoAttn];

    pub fn code(self) -> u8 {
        match self {
            Variant::EddyNet => 0,
            Variant::NoDec => 1,
            Variant::Relu => 2,
            Variant::NoAttn => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::EddyNet => "eddynet",
            Variant::NoDec => "nodec",
            Variant::Relu => "relu",
            Variant::NoAttn => "noattn",
        }
    }

    /// Column heading used in comparison tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::EddyNet => "EddyNet",
            Variant::NoDec => "Eddy-nodec",
            Variant::Relu => "Eddy-relu",
            Variant::NoAttn => "Eddy-noattn",
        }
    }

    fn encoder_activation(self) -> Activation {
        if self == Variant::Relu {
            Activation::Relu
        } else {
            Activation::Mish
        }
    }

    fn decoder_activation(self) -> Activation {
        if self == Variant::Relu {
            Activation::LeakyRelu
        } else {
            Activation::Mish
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
    BatchNorm,
    Activation(Activation),
    Attention,
    Sigmoid,
    /// Reshape to `[1, 40, 12]` per sample.
    Reshape,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: Pair,
    pub stride: Pair,
    pub pad: Pair,
}

impl LayerSpec {
    fn simple(name: &str, kind: LayerKind, ch: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            in_ch: ch,
            out_ch: ch,
            kernel: (0, 0),
            stride: (1, 1),
            pad: (0, 0),
        }
    }

    fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv | LayerKind::Deconv => 2,
            LayerKind::BatchNorm => 4,
            _ => 0,
        }
    }
}

/// Layer table of a variant at width `c` with `k` attention channels.
pub fn architecture(variant: Variant, c: usize, k: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut push = |name: &str, kind: LayerKind, in_ch, out_ch, kernel, stride, pad| {
        layers.push(LayerSpec {
            name: name.into(),
            kind,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        });
    };
    let enc_act = variant.encoder_activation();
    let dec_act = variant.decoder_activation();
    let encoder = [
        ("enc1", N_CHANNELS, c, (6, 6), (2, 2), (2, 2)),
        ("enc2", c, c, (5, 5), (2, 2), (2, 2)),
        ("enc3", c, c, (4, 4), (2, 2), (1, 1)),
        ("enc4", c, c, (4, 4), (2, 2), (1, 1)),
    ];
    for (name, i, o, kern, s, p) in encoder {
        push(name, LayerKind::Conv, i, o, kern, s, p);
        push(
            &format!("{name}_bn"),
            LayerKind::BatchNorm,
            o,
            o,
            (0, 0),
            (1, 1),
            (0, 0),
        );
        push(
            &format!("{name}_act"),
            LayerKind::Activation(enc_act),
            o,
            o,
            (0, 0),
            (1, 1),
            (0, 0),
        );
    }
    if variant == Variant::NoDec {
        push("enc5", LayerKind::Conv, c, PROFILE_LEN, (4, 4), (1, 1), (1, 1));
        drop(push);
        layers.push(LayerSpec::simple("sigmoid", LayerKind::Sigmoid, PROFILE_LEN));
        layers.push(LayerSpec {
            out_ch: 1,
            ..LayerSpec::simple("reshape", LayerKind::Reshape, PROFILE_LEN)
        });
        return layers;
    }
    push("enc5", LayerKind::Conv, c, LATENT_DIM, (4, 4), (1, 1), (1, 1));
    let decoder = [
        ("dec1", LATENT_DIM, c, (5, 3), (1, 1), (0, 0)),
        ("dec2", c, c, (4, 4), (2, 2), (1, 1)),
        ("dec3", c, c, (4, 4), (2, 2), (1, 1)),
        ("dec4", c, c, (4, 3), (2, 1), (1, 1)),
    ];
    for (name, i, o, kern, s, p) in decoder {
        push(name, LayerKind::Deconv, i, o, kern, s, p);
        push(
            &format!("{name}_bn"),
            LayerKind::BatchNorm,
            o,
            o,
            (0, 0),
            (1, 1),
            (0, 0),
        );
        push(
            &format!("{name}_act"),
            LayerKind::Activation(dec_act),
            o,
            o,
            (0, 0),
            (1, 1),
            (0, 0),
        );
    }
    let head = if variant == Variant::NoAttn { 1 } else { k };
    push("dec5", LayerKind::Deconv, c, head, (5, 5), (1, 1), (2, 2));
    drop(push);
    if variant != Variant::NoAttn {
        layers.push(LayerSpec {
            out_ch: 1,
            ..LayerSpec::simple("attention", LayerKind::Attention, k)
        });
    }
    layers.push(LayerSpec::simple("sigmoid", LayerKind::Sigmoid, 1));
    layers
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gain,
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

/// Names, roles and shapes of every parameter tensor, in storage order.
pub fn param_table(variant: Variant, c: usize, k: usize) -> Vec<(String, ParamRole, Vec<usize>)> {
    let mut table = Vec::new();
    for l in architecture(variant, c, k) {
        let n = &l.name;
        match l.kind {
            LayerKind::Conv => {
                table.push((
                    format!("{n}.weight"),
                    ParamRole::Weight,
                    vec![l.out_ch, l.in_ch, l.kernel.0, l.kernel.1],
                ));
                table.push((format!("{n}.bias"), ParamRole::Bias, vec![l.out_ch]));
            }
            LayerKind::Deconv => {
                table.push((
                    format!("{n}.weight"),
                    ParamRole::Weight,
                    vec![l.in_ch, l.out_ch, l.kernel.0, l.kernel.1],
                ));
                table.push((format!("{n}.bias"), ParamRole::Bias, vec![l.out_ch]));
            }
            LayerKind::BatchNorm => {
                for (suffix, role) in [
                    ("gain", ParamRole::Gain),
                    ("bias", ParamRole::Shift),
                    ("running_mean", ParamRole::RunningMean),
                    ("running_var", ParamRole::RunningVar),
                ] {
                    table.push((format!("{n}.{suffix}"), role, vec![l.out_ch]));
                }
            }
            _ => {}
        }
    }
    table
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub variant: Variant,
    pub channels: usize,
    pub k: usize,
    pub tensors: Vec<NamedTensor<T>>,
    pub stats: ChannelStats,
}

impl<T: Real> ModelParams<T> {
    /// Zero-filled parameters (running variances 1) for a variant.
    pub fn zeros(variant: Variant, channels: usize, k: usize) -> Self {
        let tensors = param_table(variant, channels, k)
            .into_iter()
            .map(|(name, role, shape)| {
                let fill = if role == ParamRole::RunningVar {
                    T::one()
                } else {
                    T::zero()
                };
                NamedTensor {
                    name,
                    role,
                    tensor: Tensor::full(&shape, fill),
                }
            })
            .collect();
        Self {
            variant,
            channels,
            k,
            tensors,
            stats: ChannelStats::identity(),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            variant: self.variant,
            channels: self.channels,
            k: self.k,
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    role: t.role,
                    tensor: t.tensor.cast(),
                })
                .collect(),
            stats: self.stats,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.role.trainable())
            .map(|t| t.tensor.len())
            .sum()
    }

    /// Confirms names and shapes against the variant's table.
    pub fn validate(&self) -> Result<()> {
        let table = param_table(self.variant, self.channels, self.k);
        if table.len() != self.tensors.len() {
            return Err(shape_err(format!(
                "{} expects {} parameter tensors, found {}",
                self.variant,
                table.len(),
                self.tensors.len()
            )));
        }
        for ((name, _, shape), t) in table.iter().zip(&self.tensors) {
            if *name != t.name || shape[..] != *t.tensor.shape() {
                return Err(shape_err(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    t.name,
                    t.tensor.shape()
                )));
            }
        }
        if self
            .tensors
            .iter()
            .any(|t| t.role == ParamRole::RunningVar && t.tensor.data().iter().any(|&v| v < T::zero()))
        {
            return Err(Error::Malformed("negative running variance".into()));
        }
        Ok(())
    }

    /// Folds the batch statistics of one training step into the running stats.
    pub fn apply_running_updates(&mut self, updates: &[RunningUpdate<T>]) {
        for u in updates {
            ops::update_running(&mut self.tensors[u.param + 2].tensor, &u.mean, BN_MOMENTUM);
            ops::update_running(&mut self.tensors[u.param + 3].tensor, &u.var, BN_MOMENTUM);
        }
    }

    /// Standardized `[B, 6, 40, 40]` input batch.
    pub fn input_batch(&self, samples: &[&Sample]) -> Tensor<T> {
        let mut data = vec![T::zero(); samples.len() * CHANNELS_LEN];
        for (s, chunk) in samples.iter().zip(data.chunks_exact_mut(CHANNELS_LEN)) {
            self.stats.standardize_into(&s.channels, chunk);
        }
        Tensor::new(vec![samples.len(), N_CHANNELS, SCAN_H, SCAN_W], data).expect("batch shape")
    }
}

/// Binary target profiles as a `[B, 1, 40, 12]` tensor.
pub fn target_batch<T: Real>(samples: &[&Sample]) -> Tensor<T> {
    let data = samples
        .iter()
        .flat_map(|s| s.profile.cells().iter().map(|&c| T::cast(c as f64)))
        .collect();
    Tensor::new(vec![samples.len(), 1, PROFILE_H, PROFILE_W], data).expect("target shape")
}

/// DCGAN-style init: weights `N(0, 0.02^2)`, batch-norm gains `N(1, 0.02^2)`,
/// everything else at its neutral value. Draws follow storage order, and
/// row-major order within each tensor.
pub fn init_params<T: Real>(variant: Variant, channels: usize, k: usize, rng: &mut RngState) -> ModelParams<T> {
    let mut p = ModelParams::zeros(variant, channels, k);
    for t in &mut p.tensors {
        let offset = match t.role {
            ParamRole::Weight => 0.0,
            ParamRole::Gain => 1.0,
            _ => continue,
        };
        for v in t.tensor.data_mut() {
            *v = T::cast(offset + INIT_STD * rng.next_gaussian());
        }
    }
    p
}

/// Batch statistics produced by one train-mode batch norm.
#[derive(Debug, Clone)]
pub struct RunningUpdate<T> {
    /// Index of the layer's `gain` tensor.
    pub param: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Saved<T> {
    None,
    Bn(BnCache<T>),
    Attention { weights: Vec<T>, output: Tensor<T> },
    Sigmoid(Tensor<T>),
}

/// Activations retained by a forward pass for the backward pass.
pub struct Trace<T> {
    inputs: Vec<Tensor<T>>,
    saved: Vec<Saved<T>>,
    /// Output of the encoder's last layer.
    pub latent: Option<Tensor<T>>,
    pub running: Vec<RunningUpdate<T>>,
    pub output: Tensor<T>,
}

struct Plan {
    layers: Vec<(LayerSpec, usize)>,
}

impl Plan {
    fn new(variant: Variant, c: usize, k: usize) -> Self {
        let mut next = 0;
        let layers = architecture(variant, c, k)
            .into_iter()
            .map(|l| {
                let at = next;
                next += l.param_count();
                (l, at)
            })
            .collect();
        Self { layers }
    }
}

fn forward_impl<T: Real>(params: &ModelParams<T>, batch: &Tensor<T>, mode: Mode, keep: bool) -> Result<Trace<T>> {
    let (bs, ch, h, w) = batch.dims4()?;
    if (ch, h, w) != (N_CHANNELS, SCAN_H, SCAN_W) {
        return Err(shape_err(format!(
            "input batch must be Bx{N_CHANNELS}x{SCAN_H}x{SCAN_W}, got {:?}",
            batch.shape()
        )));
    }
    let plan = Plan::new(params.variant, params.channels, params.k);
    let t = |i: usize| &params.tensors[i].tensor;
    let mut inputs = Vec::new();
    let mut saved = Vec::new();
    let mut running = Vec::new();
    let mut latent = None;
    let mut x = batch.clone();
    for (spec, at) in &plan.layers {
        let (y, s) = match spec.kind {
            LayerKind::Conv => (
                ops::conv2d_forward(&x, t(*at), t(at + 1), spec.stride, spec.pad)?,
                Saved::None,
            ),
            LayerKind::Deconv => (
                ops::deconv2d_forward(&x, t(*at), t(at + 1), spec.stride, spec.pad)?,
                Saved::None,
            ),
            LayerKind::BatchNorm => match mode {
                Mode::Train => {
                    let out = ops::batchnorm_train(&x, t(*at), t(at + 1))?;
                    running.push(RunningUpdate {
                        param: *at,
                        mean: out.batch_mean,
                        var: out.batch_var,
                    });
                    (out.y, Saved::Bn(out.cache))
                }
                Mode::Eval => (
                    ops::batchnorm_eval(&x, t(*at), t(at + 1), t(at + 2), t(at + 3))?,
                    Saved::None,
                ),
            },
            LayerKind::Activation(a) => (a.forward(&x), Saved::None),
            LayerKind::Attention => {
                let (y, weights) = ops::channel_attention(&x)?;
                let keep_out = if keep { y.clone() } else { Tensor::zeros(&[0]) };
                (
                    y,
                    Saved::Attention {
                        weights,
                        output: keep_out,
                    },
                )
            }
            LayerKind::Sigmoid => {
                let y = ops::sigmoid_forward(&x);
                (y.clone(), Saved::Sigmoid(if keep { y } else { Tensor::zeros(&[0]) }))
            }
            LayerKind::Reshape => (x.clone().reshape(&[bs, 1, PROFILE_H, PROFILE_W])?, Saved::None),
        };
        if spec.name == "enc5" {
            latent = Some(y.clone());
        }
        if keep {
            inputs.push(std::mem::replace(&mut x, y));
            saved.push(s);
        } else {
            x = y;
        }
    }
    Ok(Trace {
        inputs,
        saved,
        latent,
        running,
        output: x,
    })
}

/// Runs the network; outputs `[B, 1, 40, 12]` in (0, 1). The batch must
/// already be standardized with `params.stats`.
pub fn model_forward<T: Real>(params: &ModelParams<T>, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
    Ok(forward_impl(params, batch, mode, false)?.output)
}

/// Forward pass that keeps intermediate activations.
pub fn model_forward_traced<T: Real>(params: &ModelParams<T>, batch: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
    forward_impl(params, batch, mode, true)
}

pub struct Backward<T> {
    pub loss: f64,
    /// One gradient per parameter tensor (zeros for running statistics).
    pub grads: Vec<Tensor<T>>,
    pub running: Vec<RunningUpdate<T>>,
    pub output: Tensor<T>,
}

/// Reverse pass of an arbitrary output gradient through a traced forward.
pub fn backward_from<T: Real>(
    params: &ModelParams<T>,
    trace: Trace<T>,
    dout: Tensor<T>,
) -> Result<(Vec<Tensor<T>>, Vec<RunningUpdate<T>>, Tensor<T>)> {
    let plan = Plan::new(params.variant, params.channels, params.k);
    let t = |i: usize| &params.tensors[i].tensor;
    let mut grads: Vec<Tensor<T>> = params.tensors.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
    let Trace {
        inputs,
        saved,
        running,
        output,
        ..
    } = trace;
    let mut dy = dout;
    for (((spec, at), x), s) in plan.layers.iter().zip(inputs.iter()).zip(saved).rev() {
        dy = match (spec.kind, s) {
            (LayerKind::Conv, _) => {
                let g = ops::conv2d_backward(x, t(*at), &dy, spec.stride, spec.pad)?;
                grads[*at] = g.dw;
                grads[at + 1] = g.db;
                g.dx
            }
            (LayerKind::Deconv, _) => {
                let g = ops::deconv2d_backward(x, t(*at), &dy, spec.stride, spec.pad)?;
                grads[*at] = g.dw;
                grads[at + 1] = g.db;
                g.dx
            }
            (LayerKind::BatchNorm, Saved::Bn(cache)) => {
                let (dx, dg, db) = ops::batchnorm_backward(&dy, t(*at), &cache)?;
                grads[*at] = dg;
                grads[at + 1] = db;
                dx
            }
            (LayerKind::Activation(a), _) => a.backward(x, &dy),
            (LayerKind::Attention, Saved::Attention { weights, output }) => {
                ops::channel_attention_backward(x, &weights, &output, &dy)?
            }
            (LayerKind::Sigmoid, Saved::Sigmoid(y)) => ops::sigmoid_backward(&y, &dy),
            (LayerKind::Reshape, _) => dy.reshape(x.shape())?,
            (kind, _) => {
                return Err(Error::InvalidArgument(format!(
                    "layer {kind:?} was not traced in train mode"
                )))
            }
        };
    }
    Ok((grads, running, output))
}

/// MAE loss of a train-mode forward pass and its exact parameter gradients.
pub fn model_backward<T: Real>(params: &ModelParams<T>, batch: &Tensor<T>, truth: &Tensor<T>) -> Result<Backward<T>> {
    let trace = model_forward_traced(params, batch, Mode::Train)?;
    let (loss, dout) = ops::mae_loss(&trace.output, truth)?;
    let (grads, running, output) = backward_from(params, trace, dout)?;
    Ok(Backward {
        loss,
        grads,
        running,
        output,
    })
}
