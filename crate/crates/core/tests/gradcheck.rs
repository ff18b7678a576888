//! Central finite-difference checks (h = 1e-4, fp64) of every
//! differentiable op and of a tiny end-to-end network.

mod common;

use common::grad_cases::{self, TOL};
use common::GradCheck;

fn assert_passes(label: &str, r: GradCheck) {
    assert!(r.checked > 0, "{label}: nothing checked");
    assert!(r.max_rel < TOL, "{label}: max relative error {:.3e} at {}", r.max_rel, r.worst);
}

#[test]
fn conv3x3() {
    assert_passes("conv3x3", grad_cases::conv3x3());
}

#[test]
fn conv_multi_part_strided_and_concat() {
    assert_passes("conv parts", grad_cases::conv_parts_strided_concat());
}

#[test]
fn prelu_away_from_kink() {
    assert_passes("prelu", grad_cases::prelu_off_kink());
}

#[test]
fn relu_and_pools() {
    assert_passes("relu/pool", grad_cases::relu_and_pools());
}

#[test]
fn fully_connected_softmax_and_cross_entropy() {
    assert_passes("fc+softmax+ce", grad_cases::fc_softmax_cross_entropy());
}

#[test]
fn softmax_and_scalar_ops() {
    assert_passes("softmax", grad_cases::softmax_and_scalar_ops());
}

#[test]
fn unfused_cross_entropy() {
    assert_passes("unfused ce", grad_cases::unfused_cross_entropy());
}

#[test]
fn tiny_network_end_to_end() {
    let r = grad_cases::tiny_network();
    let params = gradepipe::densenet::parameter_layout(&gradepipe::densenet::DenseNetConfig {
        growth_rate: 2,
        block_pairs: 1,
        input_px: 8,
        ..Default::default()
    });
    assert_eq!(r.checked, params.iter().map(|(_, d, _)| d.iter().product::<usize>()).sum::<usize>());
    assert_passes("tiny densenet", r);
}
