//! Analytic gradients against central differences, 10 random points per case.

use ssmlab_core::check::{gradient_cases, sweep, GRAD_TOL};

const POINTS: u64 = 10;

fn check(prefix: &str) {
    let cases: Vec<_> = gradient_cases().into_iter().filter(|(n, _)| n.starts_with(prefix)).collect();
    assert!(!cases.is_empty(), "no case named {prefix}*");
    for (name, case) in cases {
        let worst = sweep(name, case, POINTS);
        assert!(worst <= GRAD_TOL, "{name}: relative error {worst:.3e}");
    }
}

#[test]
fn add_and_mul() {
    check("add");
    check("mul");
}

#[test]
fn matmul_and_affine() {
    check("matmul");
    check("affine");
}

#[test]
fn conv1d_all_inputs() {
    check("conv1d");
}

#[test]
fn depthwise_all_inputs() {
    check("depthwise");
}

#[test]
fn relu_and_max_pool() {
    check("relu");
    check("global_max_pool");
}

#[test]
fn concat_reshape_dropout() {
    check("concat");
    check("reshape");
    check("dropout");
}

#[test]
fn exp_log_sum_mean() {
    check("exp");
    check("log");
    check("sum_mean");
}

#[test]
fn embedding_and_channel_scale() {
    check("embedding");
    check("scale_channels");
}

#[test]
fn weighted_bce_loss() {
    check("weighted_bce");
}

#[test]
fn kernel_wrt_c_and_log_dt() {
    check("kernel");
}

#[test]
fn causal_convolution_inputs() {
    check("causal_conv");
}

#[test]
fn s4d_layer_end_to_end() {
    check("s4d_layer");
}

#[test]
fn every_architecture_end_to_end() {
    check("arch_");
}
