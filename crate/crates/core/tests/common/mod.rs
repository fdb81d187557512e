#![allow(dead_code)]

use advseq_core::data::SentencePair;
use advseq_core::models::ModelSet;
use advseq_core::transformer::TransformerConfig;
use advseq_core::{Real, TokenId, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn config(layers: usize, dim: usize, src_vocab: usize, trg_vocab: usize) -> TransformerConfig {
    TransformerConfig {
        num_layers: layers,
        model_dim: dim,
        num_heads: 4,
        ff_dim: 2 * dim,
        src_vocab_size: src_vocab,
        trg_vocab_size: trg_vocab,
        max_len: 16,
        ..Default::default()
    }
}

pub fn models<T: Real>(layers: usize, dim: usize, vocab: usize, seed: u64) -> ModelSet<T> {
    ModelSet::init(&config(layers, dim, vocab, vocab), seed).unwrap()
}

/// Content tokens start after the four reserved ids.
pub fn random_sentence<R: Rng>(rng: &mut R, vocab: usize, lo: usize, hi: usize) -> Vec<TokenId> {
    let len = rng.gen_range(lo..=hi);
    (0..len).map(|_| rng.gen_range(4..vocab as TokenId)).collect()
}

/// Sentence without repeated tokens.
pub fn distinct_sentence<R: Rng>(rng: &mut R, vocab: usize, lo: usize, hi: usize) -> Vec<TokenId> {
    let len = rng.gen_range(lo..=hi);
    let mut pool: Vec<TokenId> = (4..vocab as TokenId).collect();
    pool.shuffle(rng);
    pool.truncate(len);
    pool
}

pub fn random_pairs<R: Rng>(rng: &mut R, n: usize, vocab: usize) -> Vec<SentencePair> {
    (0..n)
        .map(|_| {
            let x = random_sentence(rng, vocab, 2, 7);
            let y = random_sentence(rng, vocab, 2, 7);
            SentencePair::new(x, &y)
        })
        .collect()
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
