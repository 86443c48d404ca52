mod common;

use common::props;

#[test]
fn grid_determinism() {
    props::grid_determinism().unwrap();
}

#[test]
fn split_partition() {
    props::split_partition().unwrap();
}

#[test]
fn threshold_monotonicity() {
    props::threshold_monotonicity().unwrap();
}

#[test]
fn blend_normalization() {
    props::blend_normalization().unwrap();
}

#[test]
fn render_threshold_agreement() {
    props::render_threshold_agreement().unwrap();
}

#[test]
fn ssim_symmetry() {
    props::ssim_symmetry().unwrap();
}
