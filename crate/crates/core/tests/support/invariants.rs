//! Module invariants as property checks, shared by the `properties` and
//! `acceptance` targets.

use eddynet::neural::ops::{self, BN_EPS};
use eddynet::neural::Tensor;
use eddynet::optim::{ranger_step, OptState, RangerConfig};
use eddynet::rng::RngState;
use eddynet::simulate::{
    forward_operate, median_filter_3x3, shadow_factor, CrackProfile, SimConfig, N_FREQ, PROFILE_H, PROFILE_W, SCAN_H,
    SCAN_W,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

fn gaussian(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = RngState::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.next_gaussian()).collect()).unwrap()
}

fn random_profile(seed: u64, density: f64) -> CrackProfile {
    let mut rng = RngState::new(seed);
    let mut p = CrackProfile::zeros();
    for m in 0..PROFILE_H {
        for n in 0..PROFILE_W {
            p.set(m, n, rng.next_unit() < density);
        }
    }
    p
}

fn complement(p: &CrackProfile) -> CrackProfile {
    let mut q = CrackProfile::zeros();
    for m in 0..PROFILE_H {
        for n in 0..PROFILE_W {
            q.set(m, n, !p.get(m, n));
        }
    }
    q
}

/// Profile made of runs along one axis, each at least two cells long.
fn banded(seed: u64, along_depth: bool) -> CrackProfile {
    let mut rng = RngState::new(seed);
    let len = if along_depth { PROFILE_W } else { PROFILE_H };
    let mut bands = Vec::with_capacity(len);
    let mut value = rng.next_unit() < 0.5;
    while bands.len() < len {
        let run = 2 + rng.next_below(4) as usize;
        bands.extend(std::iter::repeat(value).take(run));
        value = !value;
    }
    // A trailing run cut to length one would not be stable.
    if bands[len - 1] != bands[len - 2] {
        bands[len - 1] = bands[len - 2];
    }
    let mut p = CrackProfile::zeros();
    for m in 0..PROFILE_H {
        for n in 0..PROFILE_W {
            p.set(m, n, bands[if along_depth { n } else { m }]);
        }
    }
    p
}

/// Cases per invariant.
pub const CASES: u32 = 256;

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

pub fn attention_shift_equivariance() -> Result<(), String> {
    run(
        (1usize..3, 1usize..6, 1usize..5, 1usize..5, any::<u64>(), 0.1f64..4.0),
        |(b, k, h, w, seed, scale)| {
            let x = gaussian(&[b, k, h, w], scale, seed);
            let shift = gaussian(&[b, 1, h, w], 3.0, seed ^ 1);
            let mut shifted = x.clone();
            for s in 0..b {
                for c in 0..k {
                    for p in 0..h * w {
                        shifted.data_mut()[(s * k + c) * h * w + p] += shift.data()[s * h * w + p];
                    }
                }
            }
            let (y, _) = ops::channel_attention(&x).unwrap();
            let (ys, _) = ops::channel_attention(&shifted).unwrap();
            for ((a, c), d) in y.data().iter().zip(ys.data()).zip(shift.data()) {
                prop_assert!((a + d - c).abs() <= 1e-12 * (1.0 + c.abs()));
            }
            if k == 1 {
                prop_assert_eq!(y.data(), x.data());
            }
            Ok(())
        },
    )
}

pub fn median_filter_fixed_points() -> Result<(), String> {
    run((any::<u64>(), any::<bool>()), |(seed, along_depth)| {
        let p = banded(seed, along_depth);
        prop_assert_eq!(median_filter_3x3(&p), p.clone());
        prop_assert_eq!(median_filter_3x3(&complement(&p)), complement(&p));
        Ok(())
    })
}

pub fn median_filter_commutes_with_complement() -> Result<(), String> {
    run((any::<u64>(), 0.0f64..1.0), |(seed, density)| {
        let p = random_profile(seed, density);
        prop_assert_eq!(median_filter_3x3(&complement(&p)), complement(&median_filter_3x3(&p)));
        Ok(())
    })
}

pub fn shadowing_monotonicity() -> Result<(), String> {
    run((any::<u64>(), 0.0f64..1.0, 1e-3f64..2.0), |(seed, density, gamma)| {
        let p = random_profile(seed, density);
        for m in 0..PROFILE_H {
            for n in 0..PROFILE_W {
                if !p.get(m, n) {
                    continue;
                }
                let s = shadow_factor(&p, m, n, gamma);
                prop_assert_eq!(shadow_factor(&p, m, n, 0.0), 1.0);
                prop_assert!(s <= 1.0);
                let shadowed = (0..n).any(|above| p.get(m, above));
                prop_assert_eq!(s == 1.0, !shadowed);
            }
        }
        Ok(())
    })
}

pub fn calibration_normalizes_the_full_profile() -> Result<(), String> {
    run(
        (
            0.5f64..3.0,
            1.1f64..3.0,
            1.1f64..3.0,
            0.5f64..6.0,
            0.5f64..6.0,
            0u16..39,
            1u16..40,
        ),
        |(d3, r2, r1, sigma_y, sigma_x, x0, width)| {
            let x1 = (x0 + width).min(SCAN_H as u16);
            let cfg = SimConfig::new([d3 * r2 * r1, d3 * r2, d3], sigma_y, sigma_x, (x0, x1), 0.0).unwrap();
            let maps = forward_operate(&CrackProfile::ones(), &cfg);
            for k in 0..N_FREQ {
                let mut peak = 0.0f64;
                for i in 0..SCAN_H {
                    for j in 0..SCAN_W {
                        peak = peak.max(maps.get(k, i, j).norm());
                    }
                }
                prop_assert!((peak - 1.0).abs() <= 1e-12, "frequency {} peaks at {}", k, peak);
            }
            Ok(())
        },
    )
}

pub fn ranger_zero_gradient_identity() -> Result<(), String> {
    run(
        (any::<u64>(), 1usize..40, 1usize..30, 1e-6f64..1.0, 1u64..10),
        |(seed, n, steps, lr, k)| {
            let mut p = gaussian(&[n], 2.0, seed);
            let orig = p.clone();
            let zero = Tensor::zeros(&[n]);
            let cfg = RangerConfig {
                lr,
                lookahead_k: k,
                ..RangerConfig::default()
            };
            let mut state = OptState::new(cfg, std::slice::from_ref(&p));
            for _ in 0..steps {
                ranger_step(&mut [&mut p], &[&zero], &mut state).unwrap();
                prop_assert_eq!(&p, &orig);
            }
            prop_assert_eq!(state.t, steps as u64);
            Ok(())
        },
    )
}

pub fn ranger_slow_weights_move_only_at_sync() -> Result<(), String> {
    run((any::<u64>(), 1usize..25, 2u64..8), |(seed, steps, k)| {
        let mut p = gaussian(&[5], 1.0, seed);
        let mut state = OptState::new(
            RangerConfig {
                lookahead_k: k,
                ..RangerConfig::default()
            },
            std::slice::from_ref(&p),
        );
        let mut rng = RngState::new(seed ^ 7);
        for _ in 0..steps {
            let before = state.slow.clone();
            let g = Tensor::new(vec![5], (0..5).map(|_| rng.next_gaussian()).collect()).unwrap();
            ranger_step(&mut [&mut p], &[&g], &mut state).unwrap();
            prop_assert!(p.all_finite());
            if state.t % k != 0 {
                prop_assert_eq!(&state.slow, &before);
            } else {
                prop_assert_eq!(p.data(), &state.slow[0][..]);
            }
        }
        Ok(())
    })
}

pub fn batchnorm_normalization() -> Result<(), String> {
    run(
        (
            1usize..4,
            1usize..4,
            1usize..5,
            2usize..5,
            any::<u64>(),
            0.01f64..10.0,
            -5.0f64..5.0,
        ),
        |(b, c, h, w, seed, scale, shift)| {
            let x = gaussian(&[b, c, h, w], scale, seed).map(|v| v + shift);
            let out = ops::batchnorm_train(&x, &Tensor::full(&[c], 1.0), &Tensor::zeros(&[c])).unwrap();
            let plane = h * w;
            let count = (b * plane) as f64;
            for ch in 0..c {
                let values: Vec<f64> = (0..b)
                    .flat_map(|s| out.y.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane].to_vec())
                    .collect();
                let mean = values.iter().sum::<f64>() / count;
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
                let batch_var = out.batch_var[ch];
                prop_assert!(mean.abs() <= 1e-9);
                prop_assert!((var - batch_var / (batch_var + BN_EPS)).abs() <= 1e-9);
            }
            Ok(())
        },
    )
}

pub fn conv_deconv_adjointness() -> Result<(), String> {
    run(
        (
            any::<u64>(),
            1usize..6,
            1usize..3,
            0usize..3,
            1usize..4,
            1usize..4,
            4usize..9,
            4usize..9,
        ),
        |(seed, k, s, p, cin, cout, h, w)| {
            prop_assume!(p < k);
            let Some(oh) = ops::conv_out_len(h, k, s, p).filter(|&v| v >= 1) else {
                return Ok(());
            };
            let Some(ow) = ops::conv_out_len(w, k, s, p).filter(|&v| v >= 1) else {
                return Ok(());
            };
            // Deconv maps back to h x w only when the strided windows tile it.
            prop_assume!(ops::deconv_out_len(oh, k, s, p) == Some(h) && ops::deconv_out_len(ow, k, s, p) == Some(w));
            let x = gaussian(&[2, cin, h, w], 1.0, seed);
            let y = gaussian(&[2, cout, oh, ow], 1.0, seed ^ 3);
            let wt = gaussian(&[cout, cin, k, k], 1.0, seed ^ 5);
            let lhs = ops::conv2d_forward(&x, &wt, &Tensor::zeros(&[cout]), (s, s), (p, p))
                .unwrap()
                .dot(&y);
            let rhs = x.dot(&ops::deconv2d_forward(&y, &wt, &Tensor::zeros(&[cin]), (s, s), (p, p)).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0));
            Ok(())
        },
    )
}

pub const ALL: [(&str, fn() -> Result<(), String>); 9] = [
    ("attention_shift_equivariance", attention_shift_equivariance),
    ("median_filter_fixed_points", median_filter_fixed_points),
    (
        "median_filter_commutes_with_complement",
        median_filter_commutes_with_complement,
    ),
    ("shadowing_monotonicity", shadowing_monotonicity),
    (
        "calibration_normalizes_the_full_profile",
        calibration_normalizes_the_full_profile,
    ),
    ("ranger_zero_gradient_identity", ranger_zero_gradient_identity),
    (
        "ranger_slow_weights_move_only_at_sync",
        ranger_slow_weights_move_only_at_sync,
    ),
    ("batchnorm_normalization", batchnorm_normalization),
    ("conv_deconv_adjointness", conv_deconv_adjointness),
];
