//! Finite-difference checks of every reverse-mode rule.
mod common;

use common::gradcheck::*;

const TOL: f64 = 1e-3;

#[test]
fn conv2d_strided_and_padded() {
    assert!(conv2d_error(1) < TOL);
}

#[test]
fn norm_layer() {
    assert!(norm_error(2) < TOL);
}

#[test]
fn relu_away_from_kink() {
    assert!(relu_error(3) < TOL);
}

#[test]
fn add_and_pool() {
    assert!(add_error(4) < TOL);
    assert!(pool_error(4) < TOL);
}

#[test]
fn dense_layer() {
    assert!(dense_error(5) < TOL);
}

#[test]
fn shared_input_accumulates() {
    assert!(shared_input_error(6) < TOL);
}

#[test]
fn full_encoder_with_head() {
    for seed in [3, 30] {
        let err = encoder_error(seed);
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn ntxent_wrt_projections() {
    assert!(ntxent_error(5) < TOL);
}

#[test]
fn logistic_regression_objective() {
    assert!(logreg_error(8) < TOL);
}
