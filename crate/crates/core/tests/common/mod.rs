#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpc_core::encoder::{init_encoder, init_head, EncoderConfig};
use vpc_core::numerics::{ParameterStore, Tensor};
use vpc_core::objectives::{Batch, CODEBOOK, NCE_PROJ};

pub fn toy_config(d: usize, causal: bool) -> EncoderConfig {
    EncoderConfig {
        input_dim: d,
        layers: 2,
        model_dim: 8,
        heads: 2,
        ffn_dim: 12,
        dropout: 0.0,
        causal,
    }
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Encoder, head, codebook and NCE projection with random values.
pub fn toy_model(d: usize, k: usize, causal: bool, seed: u64) -> (EncoderConfig, ParameterStore) {
    let cfg = toy_config(d, causal);
    let mut store = ParameterStore::new();
    init_encoder(&mut store, &cfg, seed).unwrap();
    init_head(&mut store, k, cfg.model_dim, seed + 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    store.insert(CODEBOOK, random_matrix(&mut rng, k, d, 1.5), true).unwrap();
    store.insert(NCE_PROJ, random_matrix(&mut rng, cfg.model_dim, d, 0.5), true).unwrap();
    (cfg, store)
}

pub fn random_batch(rng: &mut impl Rng, d: usize, lens: &[usize]) -> Batch {
    let seqs: Vec<Tensor> = lens.iter().map(|&l| random_matrix(rng, l, d, 1.5)).collect();
    let named: Vec<(String, &Tensor)> = seqs.iter().enumerate().map(|(i, t)| (format!("u{i}"), t)).collect();
    let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    Batch::from_sequences(&refs).unwrap()
}
