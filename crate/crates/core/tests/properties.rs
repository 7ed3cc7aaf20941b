//! Randomized numerical invariants.

mod suites;

use suites::numeric;

#[test]
fn svd_reconstruction() {
    numeric::svd_reconstruction().unwrap();
}

#[test]
fn svd_eigen_oracle() {
    numeric::svd_eigen_oracle().unwrap();
}

#[test]
fn residual_additivity() {
    numeric::residual_additivity().unwrap();
}

#[test]
fn attention_rows() {
    numeric::attention_rows().unwrap();
}

#[test]
fn self_patch_identity() {
    numeric::self_patch_identity().unwrap();
}

#[test]
fn composition_bounds() {
    numeric::composition_bounds().unwrap();
}

#[test]
fn composition_scan_matches_naive() {
    numeric::composition_scan_matches_naive().unwrap();
}

#[test]
fn rank1_exact() {
    numeric::rank1_exact().unwrap();
}

#[test]
fn rank1_grid_oracle() {
    numeric::rank1_grid_oracle().unwrap();
}

#[test]
fn rank1_sign_flip() {
    numeric::rank1_sign_flip().unwrap();
}

#[test]
fn softmax_shift() {
    numeric::softmax_shift().unwrap();
}

#[test]
fn steering_zero() {
    numeric::steering_zero().unwrap();
}

#[test]
fn steering_sign() {
    numeric::steering_sign().unwrap();
}
