//! Finite-difference verification of every backward path: the five kernels,
//! the detection loss, and the whole m=16 network end to end.

mod common;

use common::*;

const SEEDS: std::ops::Range<u64> = 0..12;

#[test]
fn conv_backward_matches_central_differences_all_engines() {
    for seed in SEEDS {
        check_conv_gradients(seed);
    }
}

#[test]
fn deconv_backward_matches_central_differences() {
    for seed in SEEDS {
        check_deconv_gradients(seed);
    }
}

#[test]
fn batchnorm_backward_matches_central_differences() {
    for seed in SEEDS {
        check_batchnorm_gradients(seed);
    }
}

#[test]
fn maxpool_backward_matches_central_differences() {
    for seed in SEEDS {
        check_pool_gradients(seed);
    }
}

#[test]
fn relu_backward_matches_central_differences() {
    for seed in SEEDS {
        check_relu_gradients(seed);
    }
}

#[test]
fn detection_loss_gradient_matches_central_differences() {
    for seed in SEEDS {
        check_loss_gradients(seed);
    }
}

#[test]
fn tiny_network_gradients_match_central_differences() {
    for seed in SEEDS {
        check_end_to_end_gradients(seed);
    }
}
