//! Shared fixtures for the benchmarks.

use advseq_core::data::{build_vocab, make_toy_task, SentencePair, ToyKind};
use advseq_core::models::ModelSet;
use advseq_core::transformer::TransformerConfig;

/// A toy corpus and an untrained 2-layer, 64-wide model set sized for it.
pub fn toy_fixture(pairs: usize) -> (ModelSet<f32>, Vec<SentencePair>) {
    let task = make_toy_task(ToyKind::CipherLocalSwap, 200, pairs, (3, 10), 1).expect("toy task");
    let src = build_vocab(&task.corpus.source, 1).expect("vocab");
    let trg = build_vocab(&task.corpus.target, 1).expect("vocab");
    let config = TransformerConfig {
        num_layers: 2,
        model_dim: 64,
        num_heads: 4,
        ff_dim: 128,
        src_vocab_size: src.len(),
        trg_vocab_size: trg.len(),
        max_len: 16,
        ..Default::default()
    };
    let models = ModelSet::init(&config, 1).expect("init");
    (models, task.corpus.encode(&src, &trg))
}
