//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each check perturbs inputs and parameters by `±h` in 64-bit arithmetic and
//! compares against the analytic gradient. Layer checks use a fixed random
//! projection `L = <r, f(x)>` as the scalar objective; composed checks use
//! the MAE training loss itself.

use crate::error::{Error, Result};
use crate::neural::model::{init_params, model_backward, model_forward, ModelParams, ParamRole, Variant};
use crate::neural::ops::{self, Activation, Mode};
use crate::neural::tensor::Tensor;
use crate::rng::RngState;

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOLERANCE
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

fn random(shape: &[usize], scale: f64, rng: &mut RngState) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.next_gaussian()).collect()).expect("shape")
}

/// Central-difference gradient of `f` w.r.t. `inputs[which]`.
fn numeric(inputs: &[Tensor<f64>], which: usize, f: &dyn Fn(&[Tensor<f64>]) -> f64) -> Tensor<f64> {
    let mut work = inputs.to_vec();
    let mut g = Tensor::zeros(inputs[which].shape());
    for i in 0..g.len() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + FD_STEP;
        let up = f(&work);
        work[which].data_mut()[i] = orig - FD_STEP;
        let down = f(&work);
        work[which].data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

fn compare(name: &str, analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> CheckReport {
    let max_rel_error = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max);
    CheckReport {
        name: name.to_string(),
        max_rel_error,
        entries: analytic.len(),
    }
}

/// Checks a layer given its forward and the analytic gradients of
/// `<r, forward(inputs)>` for every input.
fn check_layer(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    labels: &[&str],
    forward: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>,
    backward: &dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
    rng: &mut RngState,
) -> Vec<CheckReport> {
    let probe = random(forward(&inputs).shape(), 1.0, rng);
    let objective = |xs: &[Tensor<f64>]| forward(xs).dot(&probe);
    let analytic = backward(&inputs, &probe);
    labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            compare(
                &format!("{name}/{label}"),
                &analytic[i],
                &numeric(&inputs, i, &objective),
            )
        })
        .collect()
}

/// Inputs kept at least `margin` away from zero, for kinked activations.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut RngState) -> Tensor<f64> {
    random(shape, 1.0, rng).map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

pub fn layer_checks(rng: &mut RngState) -> Vec<CheckReport> {
    let mut out = Vec::new();

    let conv_cases = [
        ((2, 1), (1, 0), [2, 3, 7, 6], [4, 3, 3, 2]),
        ((2, 2), (2, 2), [2, 2, 8, 8], [3, 2, 6, 6]),
    ];
    for (i, (stride, pad, xs, ws)) in conv_cases.into_iter().enumerate() {
        let inputs = vec![random(&xs, 1.0, rng), random(&ws, 0.5, rng), random(&[ws[0]], 0.5, rng)];
        out.extend(check_layer(
            &format!("conv#{i}"),
            inputs,
            &["input", "weight", "bias"],
            &|t| ops::conv2d_forward(&t[0], &t[1], &t[2], stride, pad).unwrap(),
            &|t, dy| {
                let g = ops::conv2d_backward(&t[0], &t[1], dy, stride, pad).unwrap();
                vec![g.dx, g.dw, g.db]
            },
            rng,
        ));
    }

    let deconv_cases = [
        ((2, 1), (1, 1), [2, 3, 4, 3], [3, 2, 4, 3]),
        ((1, 1), (0, 0), [2, 3, 1, 1], [3, 2, 5, 3]),
    ];
    for (i, (stride, pad, xs, ws)) in deconv_cases.into_iter().enumerate() {
        let inputs = vec![random(&xs, 1.0, rng), random(&ws, 0.5, rng), random(&[ws[1]], 0.5, rng)];
        out.extend(check_layer(
            &format!("deconv#{i}"),
            inputs,
            &["input", "weight", "bias"],
            &|t| ops::deconv2d_forward(&t[0], &t[1], &t[2], stride, pad).unwrap(),
            &|t, dy| {
                let g = ops::deconv2d_backward(&t[0], &t[1], dy, stride, pad).unwrap();
                vec![g.dx, g.dw, g.db]
            },
            rng,
        ));
    }

    let bn_inputs = vec![
        random(&[3, 2, 3, 3], 2.0, rng).map(|v| v + 0.7),
        random(&[2], 0.3, rng).map(|v| v + 1.0),
        random(&[2], 0.3, rng),
    ];
    out.extend(check_layer(
        "batchnorm",
        bn_inputs,
        &["input", "gain", "bias"],
        &|t| ops::batchnorm_train(&t[0], &t[1], &t[2]).unwrap().y,
        &|t, dy| {
            let fwd = ops::batchnorm_train(&t[0], &t[1], &t[2]).unwrap();
            let (dx, dg, db) = ops::batchnorm_backward(dy, &t[1], &fwd.cache).unwrap();
            vec![dx, dg, db]
        },
        rng,
    ));

    for (name, act) in [
        ("mish", Activation::Mish),
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::LeakyRelu),
    ] {
        let x = away_from_zero(&[2, 3, 4, 4], 0.05, rng).map(|v| 3.0 * v);
        out.extend(check_layer(
            name,
            vec![x],
            &["input"],
            &|t| act.forward(&t[0]),
            &|t, dy| vec![act.backward(&t[0], dy)],
            rng,
        ));
    }

    out.extend(check_layer(
        "sigmoid",
        vec![random(&[2, 1, 4, 3], 3.0, rng)],
        &["input"],
        &|t| ops::sigmoid_forward(&t[0]),
        &|t, dy| vec![ops::sigmoid_backward(&ops::sigmoid_forward(&t[0]), dy)],
        rng,
    ));

    out.extend(check_layer(
        "attention",
        vec![random(&[2, 4, 3, 3], 1.5, rng)],
        &["input"],
        &|t| ops::channel_attention(&t[0]).unwrap().0,
        &|t, dy| {
            let (y, w) = ops::channel_attention(&t[0]).unwrap();
            vec![ops::channel_attention_backward(&t[0], &w, &y, dy).unwrap()]
        },
        rng,
    ));

    // The loss itself, with predictions bounded away from the kink.
    let truth = Tensor::new(
        vec![2, 1, 4, 3],
        (0..24).map(|_| (rng.next_u64() >> 63) as f64).collect(),
    )
    .unwrap();
    let pred = Tensor::new(
        vec![2, 1, 4, 3],
        (0..24).map(|_| 0.05 + 0.9 * rng.next_unit()).collect(),
    )
    .unwrap();
    let (_, analytic) = ops::mae_loss(&pred, &truth).unwrap();
    let loss = |t: &[Tensor<f64>]| ops::mae_loss(&t[0], &truth).unwrap().0;
    out.push(compare("mae/input", &analytic, &numeric(&[pred], 0, &loss)));
    out
}

/// Upper bound on probed elements per tensor. Larger tensors are probed at
/// distinct indices scattered by a prime step, so no kernel position or
/// channel is systematically skipped.
pub const MAX_PROBES_PER_TENSOR: usize = 256;
const PROBE_STEP: usize = 7919;

/// Finite-difference check of every trainable tensor of a composed model.
///
/// Weights are rescaled to unit fan-in variance first. At the training init
/// (std 0.02) a step of 1e-4 is large relative to the scale every batch norm
/// divides by, and central-difference truncation alone exceeds the tolerance.
pub fn model_check(
    variant: Variant,
    channels: usize,
    k: usize,
    batch: usize,
    rng: &mut RngState,
) -> Result<Vec<CheckReport>> {
    let mut params: ModelParams<f64> = init_params(variant, channels, k, rng);
    for t in params.tensors.iter_mut().filter(|t| t.role == ParamRole::Weight) {
        let fan_in: usize = t.tensor.shape()[1..].iter().product();
        let scale = 1.0 / (fan_in as f64).sqrt() / crate::neural::model::INIT_STD;
        t.tensor.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    let x = random(&[batch, 6, 40, 40], 1.0, rng);
    let truth = Tensor::new(
        vec![batch, 1, 40, 12],
        (0..batch * 480).map(|_| (rng.next_u64() >> 63) as f64).collect(),
    )?;
    let analytic = model_backward(&params, &x, &truth)?;
    let loss = |p: &ModelParams<f64>| -> f64 {
        let y = model_forward(p, &x, Mode::Train).expect("forward");
        ops::mae_loss(&y, &truth).expect("loss").0
    };
    let mut reports = Vec::new();
    let mut work = params.clone();
    for (i, entry) in params.tensors.iter().enumerate() {
        if !entry.role.trainable() {
            continue;
        }
        let len = entry.tensor.len();
        let probes: Vec<usize> = if len <= MAX_PROBES_PER_TENSOR {
            (0..len).collect()
        } else {
            (0..MAX_PROBES_PER_TENSOR).map(|i| i * PROBE_STEP % len).collect()
        };
        let mut numeric = Vec::with_capacity(probes.len());
        for &j in &probes {
            let orig = entry.tensor.data()[j];
            work.tensors[i].tensor.data_mut()[j] = orig + FD_STEP;
            let up = loss(&work);
            work.tensors[i].tensor.data_mut()[j] = orig - FD_STEP;
            let down = loss(&work);
            work.tensors[i].tensor.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let analytic: Vec<f64> = probes.iter().map(|&j| analytic.grads[i].data()[j]).collect();
        let max_rel_error = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &b)| relative_error(a, b))
            .fold(0.0, f64::max);
        reports.push(CheckReport {
            name: format!("{variant}/{}", entry.name),
            max_rel_error,
            entries: probes.len(),
        });
    }
    debug_assert!(params.tensors.iter().any(|t| t.role == ParamRole::RunningVar));
    Ok(reports)
}

/// Every layer type in isolation plus the composed eddynet model at
/// C=4, K=3, B=2.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = RngState::new(seed);
    let mut reports = layer_checks(&mut rng);
    reports.extend(model_check(Variant::EddyNet, 4, 3, 2, &mut rng)?);
    Ok(reports)
}

/// Fails with the worst offender when any check exceeds the tolerance.
pub fn ensure_passed(reports: &[CheckReport]) -> Result<()> {
    match reports
        .iter()
        .filter(|r| !r.passed())
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    {
        None => Ok(()),
        Some(worst) => Err(Error::GradCheck(format!(
            "{} of {} checks failed; worst {} at relative error {:.3e}",
            reports.iter().filter(|r| !r.passed()).count(),
            reports.len(),
            worst.name,
            worst.max_rel_error
        ))),
    }
}
