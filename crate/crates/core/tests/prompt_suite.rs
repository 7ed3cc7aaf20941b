//! Prompt construction on randomized examples.

mod suites;

use suites::prompts;

#[test]
fn length_matching() {
    prompts::length_matching().unwrap();
}

#[test]
fn span_round_trip() {
    prompts::span_round_trip().unwrap();
}

#[test]
fn permutation_involution() {
    prompts::permutation_involution().unwrap();
}

#[test]
fn pad_expansion() {
    prompts::pad_expansion().unwrap();
}

#[test]
fn tokenizer_fuzz() {
    prompts::tokenizer_fuzz().unwrap();
}
