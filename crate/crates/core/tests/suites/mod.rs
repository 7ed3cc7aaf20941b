//! Randomized suites shared by the core integration tests and the CLI
//! acceptance run. Each suite returns `Err` with the first counterexample.

#![allow(dead_code)]

pub mod numeric;
pub mod prompts;

use std::path::PathBuf;

use proptest::test_runner::{Config, RngSeed, TestRunner};

pub const CASES: u32 = 200;

/// Works from both the core and cli manifests.
pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

pub fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        max_shrink_iters: 64,
        rng_seed: RngSeed::Fixed(0x726f_7574_656c),
        ..Config::default()
    })
}

pub type SuiteResult = Result<(), String>;

/// Every suite with its name, in report order.
pub fn all() -> Vec<(&'static str, fn() -> SuiteResult)> {
    vec![
        ("svd reconstruction", numeric::svd_reconstruction as fn() -> SuiteResult),
        ("svd eigen oracle", numeric::svd_eigen_oracle),
        ("residual additivity", numeric::residual_additivity),
        ("attention rows", numeric::attention_rows),
        ("self-patch identity", numeric::self_patch_identity),
        ("composition score", numeric::composition_bounds),
        ("composition scan", numeric::composition_scan_matches_naive),
        ("rank-1 exact", numeric::rank1_exact),
        ("rank-1 grid oracle", numeric::rank1_grid_oracle),
        ("softmax shift", numeric::softmax_shift),
        ("steering zero", numeric::steering_zero),
        ("steering sign", numeric::steering_sign),
        ("rank-1 sign flip", numeric::rank1_sign_flip),
    ]
}

pub fn prompt_suites() -> Vec<(&'static str, fn() -> SuiteResult)> {
    vec![
        ("length matching", prompts::length_matching as fn() -> SuiteResult),
        ("span round trip", prompts::span_round_trip),
        ("permutation involution", prompts::permutation_involution),
        ("pad expansion", prompts::pad_expansion),
        ("tokenizer utf-8 fuzz", prompts::tokenizer_fuzz),
    ]
}
