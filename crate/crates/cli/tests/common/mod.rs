#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use mbr_core::model::{EstimateConfig, ToyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mbrdecode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbrdecode"))
        .args(args)
        .output()
        .expect("spawn mbrdecode")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = mbrdecode(args);
    assert!(
        out.status.success(),
        "mbrdecode {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A random toy model with source words `s1..` and target words `t1..`.
pub fn toy_model(seed: u64, words: usize, cap: usize) -> ToyModel {
    let cfg = EstimateConfig {
        order: 2,
        add_k: 0.1,
        lambda: 0.5,
        max_len_cap: cap,
    };
    ToyModel::random(&mut ChaCha8Rng::seed_from_u64(seed), words, words, 30, cfg).unwrap()
}

/// Source sentences over the model's source words, one per line.
pub fn toy_sources(model: &ToyModel, seed: u64, n: usize, max_len: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = model.source_vocab.len() as u32 - 1;
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(1..=words)).collect()
        })
        .collect()
}

pub fn source_text(model: &ToyModel, sources: &[Vec<u32>]) -> String {
    sources
        .iter()
        .map(|s| {
            let words: Vec<&str> = s.iter().map(|&t| model.source_vocab[t as usize].as_str()).collect();
            words.join(" ") + "\n"
        })
        .collect()
}

/// Detokenized content of an output: words without the end marker.
pub fn words(model: &ToyModel, tokens: &[u32]) -> String {
    let content = match tokens.split_last() {
        Some((&0, rest)) => rest,
        _ => tokens,
    };
    let w: Vec<&str> = content.iter().map(|&t| model.target_token(t)).collect();
    w.join(" ")
}
