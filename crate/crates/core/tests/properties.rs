//! Invariants of each module, checked over random inputs.

mod support;

use support::invariants;

#[test]
fn attention_shift_equivariance() {
    invariants::attention_shift_equivariance().unwrap();
}

#[test]
fn median_filter_fixed_points() {
    invariants::median_filter_fixed_points().unwrap();
}

#[test]
fn median_filter_commutes_with_complement() {
    invariants::median_filter_commutes_with_complement().unwrap();
}

#[test]
fn shadowing_monotonicity() {
    invariants::shadowing_monotonicity().unwrap();
}

#[test]
fn calibration_normalizes_the_full_profile() {
    invariants::calibration_normalizes_the_full_profile().unwrap();
}

#[test]
fn ranger_zero_gradient_identity() {
    invariants::ranger_zero_gradient_identity().unwrap();
}

#[test]
fn ranger_slow_weights_move_only_at_sync() {
    invariants::ranger_slow_weights_move_only_at_sync().unwrap();
}

#[test]
fn batchnorm_normalization() {
    invariants::batchnorm_normalization().unwrap();
}

#[test]
fn conv_deconv_adjointness() {
    invariants::conv_deconv_adjointness().unwrap();
}
