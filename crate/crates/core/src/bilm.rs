//! Bidirectional language model.
//!
//! Two causal transformer stacks read the sentence from opposite ends. For
//! position `i` the left-to-right stack has seen `BOS, s_0 .. s_{i-1}` and
//! the right-to-left stack has seen `EOS, s_{n-1} .. s_{i+1}`; neither ever
//! sees `s_i`. A linear layer combines the two final states and a softmax
//! layer predicts `s_i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_along, GradBuffer, Graph, Var};
use crate::layers::{causal_mask, embed, Dropout, LayerNorm, Linear, SelfAttentionLayer};
use crate::optim::{Adam, OptimConfig};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, stream};
use crate::tensor::{Real, Tensor};
use crate::transformer::TransformerConfig;
use crate::TokenId;

/// Targets never equal this, so no LM position is skipped as padding.
const NO_PAD: TokenId = TokenId::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLmConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
}

impl BiLmConfig {
    /// Stacks sized like the translation encoder, over the source vocabulary.
    pub fn source_side(mt: &TransformerConfig) -> Self {
        Self::sized_like(mt, mt.src_vocab_size)
    }

    pub fn target_side(mt: &TransformerConfig) -> Self {
        Self::sized_like(mt, mt.trg_vocab_size)
    }

    fn sized_like(mt: &TransformerConfig, vocab_size: usize) -> Self {
        BiLmConfig {
            num_layers: mt.num_layers,
            model_dim: mt.model_dim,
            num_heads: mt.num_heads,
            ff_dim: mt.ff_dim,
            vocab_size,
            // one extra slot for the BOS/EOS context token
            max_len: mt.max_len + 1,
            dropout_rate: mt.dropout_rate,
            bos_id: mt.bos_id,
            eos_id: mt.eos_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLm {
    pub config: BiLmConfig,
    pub embedding: ParamId,
    pub forward_stack: Vec<SelfAttentionLayer>,
    pub forward_norm: LayerNorm,
    pub backward_stack: Vec<SelfAttentionLayer>,
    pub backward_norm: LayerNorm,
    pub combine: Linear,
    pub projection: Linear,
}

/// Pretraining schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_sentences: usize,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            batch_sentences: 32,
            optim: OptimConfig {
                warmup_steps: 100,
                ..OptimConfig::default()
            },
        }
    }
}

impl BiLm {
    /// Builds the model around `embedding` (shared with the translation
    /// model of the same language). Parameter names use `prefix`.
    pub fn new<T: Real, R: Rng>(
        config: &BiLmConfig,
        store: &mut ParamStore<T>,
        embedding: ParamId,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.model_dim;
        if config.num_heads == 0 || d % config.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {d} not divisible by num_heads {}",
                config.num_heads
            )));
        }
        if store.get(embedding).shape() != [config.vocab_size, d] {
            return Err(Error::shape(
                "language model embedding",
                store.get(embedding).shape(),
                &[config.vocab_size, d],
            ));
        }
        let stack = |store: &mut ParamStore<T>, dir: &str, rng: &mut R| -> Vec<SelfAttentionLayer> {
            (0..config.num_layers)
                .map(|l| {
                    SelfAttentionLayer::new(
                        store,
                        &format!("{prefix}.{dir}{l}"),
                        d,
                        config.num_heads,
                        config.ff_dim,
                        rng,
                    )
                })
                .collect()
        };
        let forward_stack = stack(store, "fwd", rng);
        let forward_norm = LayerNorm::new(store, &format!("{prefix}.fwd_norm"), d);
        let backward_stack = stack(store, "bwd", rng);
        let backward_norm = LayerNorm::new(store, &format!("{prefix}.bwd_norm"), d);
        let combine = Linear::new(store, &format!("{prefix}.combine"), 2 * d, d, rng);
        let projection = Linear::new(store, &format!("{prefix}.proj"), d, config.vocab_size, rng);
        Ok(BiLm {
            config: config.clone(),
            embedding,
            forward_stack,
            forward_norm,
            backward_stack,
            backward_norm,
            combine,
            projection,
        })
    }

    fn run_stack<T: Real>(
        g: &mut Graph<'_, T>,
        stack: &[SelfAttentionLayer],
        norm: &LayerNorm,
        mut h: Var,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let n = g.shape(h)[0];
        let mask = causal_mask::<T>(n);
        h = drop.apply(g, h)?;
        for layer in stack {
            h = layer.forward(g, h, Some(&mask), drop)?;
        }
        norm.forward(g, h)
    }

    /// Logits `[|s|, vocab]`; row `i` predicts `s_i` from its two contexts.
    pub fn logits<T: Real>(&self, g: &mut Graph<'_, T>, s: &[TokenId], drop: &mut Dropout) -> Result<Var> {
        let n = s.len();
        if n == 0 {
            return Err(Error::DegenerateInput("empty sentence".into()));
        }
        if n + 1 > self.config.max_len {
            return Err(Error::Length {
                len: n,
                max: self.config.max_len - 1,
            });
        }
        let mut left = Vec::with_capacity(n);
        left.push(self.config.bos_id);
        left.extend_from_slice(&s[..n - 1]);
        let mut right = Vec::with_capacity(n);
        right.push(self.config.eos_id);
        right.extend(s[1..].iter().rev());

        let (l_in, _) = embed(g, self.embedding, &left)?;
        let hf = Self::run_stack(g, &self.forward_stack, &self.forward_norm, l_in, drop)?;
        let (r_in, _) = embed(g, self.embedding, &right)?;
        let hb_rev = Self::run_stack(g, &self.backward_stack, &self.backward_norm, r_in, drop)?;
        // right-to-left row k belongs to position n-1-k
        let order: Vec<TokenId> = (0..n as TokenId).rev().collect();
        let hb = g.gather_rows(hb_rev, &order)?;
        let both = g.concat(&[hf, hb], 1)?;
        let c = self.combine.forward(g, both)?;
        let c = drop.apply(g, c)?;
        self.projection.forward(g, c)
    }

    /// Distributions for every position, eval mode.
    pub fn distributions<T: Real>(&self, store: &ParamStore<T>, s: &[TokenId]) -> Result<Tensor<T>> {
        self.distributions_on(&mut Graph::new(store, false), s)
    }

    /// As [`BiLm::distributions`], recording the pass on an existing graph.
    pub fn distributions_on<T: Real>(&self, g: &mut Graph<'_, T>, s: &[TokenId]) -> Result<Tensor<T>> {
        let logits = self.logits(g, s, &mut Dropout::eval())?;
        Ok(softmax_along(g.value(logits), 1, false))
    }

    /// `P(· | s_{<i}, s_{>i})`.
    pub fn position_distribution<T: Real>(
        &self,
        store: &ParamStore<T>,
        s: &[TokenId],
        i: usize,
    ) -> Result<Vec<T>> {
        if i >= s.len() {
            return Err(Error::Contract(format!(
                "position {i} out of range for sentence of length {}",
                s.len()
            )));
        }
        Ok(self.distributions(store, s)?.row(i).to_vec())
    }

    /// Mean over positions of `−log P(s_i | context)` for one sentence.
    pub fn sentence_loss<T: Real>(&self, g: &mut Graph<'_, T>, s: &[TokenId], drop: &mut Dropout) -> Result<Var> {
        let logits = self.logits(g, s, drop)?;
        g.cross_entropy(logits, s, NO_PAD)
    }

    /// Batch mean of per-sentence losses.
    pub fn lm_loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &[&[TokenId]],
        drop: &mut Dropout,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::DegenerateInput("empty language-model batch".into()));
        }
        let mut losses = Vec::with_capacity(batch.len());
        for s in batch {
            losses.push(self.sentence_loss(g, s, drop)?);
        }
        g.mean_scalars(&losses)
    }

    /// Mean log-probability of `s` under the model, eval mode.
    pub fn sentence_score<T: Real>(&self, store: &ParamStore<T>, s: &[TokenId]) -> Result<f64> {
        let mut g = Graph::new(store, false);
        let loss = self.sentence_loss(&mut g, s, &mut Dropout::eval())?;
        Ok(-g.value(loss).item().to_f64().unwrap_or(f64::NAN))
    }

    /// Trains this model alone on a monolingual corpus. Returns the loss of
    /// every step. Only this model's parameters change.
    pub fn pretrain<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        corpus: &[Vec<TokenId>],
        config: &PretrainConfig,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if corpus.is_empty() {
            return Err(Error::Data("language-model corpus is empty".into()));
        }
        let mut adam = Adam::new(store);
        let mut grads = GradBuffer::new(store);
        let mut losses = Vec::with_capacity(config.steps as usize);
        let bs = config.batch_sentences.max(1);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut cursor = order.len();
        let mut epoch = 0;
        for step in 1..=config.steps {
            let mut batch = Vec::with_capacity(bs);
            while batch.len() < bs.min(corpus.len()) {
                if cursor == order.len() {
                    use rand::seq::SliceRandom;
                    order.shuffle(&mut rng::rng_for(seed, stream::LM_PRETRAIN, epoch));
                    epoch += 1;
                    cursor = 0;
                }
                batch.push(corpus[order[cursor]].as_slice());
                cursor += 1;
            }
            grads.zero();
            let loss = {
                let mut g = Graph::new(store, true);
                let mut drop = Dropout::train(
                    self.config.dropout_rate,
                    rng::derive(seed, stream::LM_DROPOUT, step),
                );
                let l = self.lm_loss(&mut g, &batch, &mut drop)?;
                grads.accumulate(&g.backward(l)?);
                g.value(l).item().to_f64().unwrap_or(f64::NAN)
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("language-model loss {loss}"),
                });
            }
            let lr = config.optim.learning_rate(step, self.config.model_dim);
            adam.update(store, &grads, &config.optim, lr);
            losses.push(loss);
        }
        Ok(losses)
    }
}

/// Registers a standalone embedding table for a language model.
pub fn new_embedding<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    vocab: usize,
    dim: usize,
    rng: &mut R,
) -> ParamId {
    store.add_normal(name, &[vocab, dim], 1.0 / (dim as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::{BOS, EOS};

    fn model(vocab: usize) -> (ParamStore<f64>, BiLm) {
        let cfg = BiLmConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            vocab_size: vocab,
            max_len: 16,
            dropout_rate: 0.0,
            bos_id: BOS,
            eos_id: EOS,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = new_embedding(&mut store, "emb", vocab.max(3), 8, &mut rng);
        let m = BiLm::new(&cfg, &mut store, emb, "lm", &mut rng);
        (store, m.unwrap())
    }

    #[test]
    fn distribution_is_normalized() {
        let (store, lm) = model(12);
        let s = [4, 5, 6, 7];
        for i in 0..s.len() {
            let p = lm.position_distribution(&store, &s, i).unwrap();
            let total: f64 = p.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&v| v > 0.0));
        }
        let single = lm.position_distribution(&store, &[5], 0).unwrap();
        assert!((single.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(lm.position_distribution(&store, &s, 4).is_err());
    }

    #[test]
    fn masked_token_does_not_leak() {
        let (store, lm) = model(12);
        let s = vec![4, 5, 6, 7, 8];
        for i in 0..s.len() {
            let base = lm.position_distribution(&store, &s, i).unwrap();
            for sub in 3..12 {
                let mut t = s.clone();
                t[i] = sub;
                assert_eq!(lm.position_distribution(&store, &t, i).unwrap(), base);
            }
        }
    }

    #[test]
    fn single_token_vocabulary_has_zero_loss() {
        let cfg = BiLmConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            vocab_size: 1,
            max_len: 8,
            dropout_rate: 0.0,
            bos_id: 0,
            eos_id: 0,
        };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = new_embedding(&mut store, "emb", 1, 8, &mut rng);
        let lm = BiLm::new(&cfg, &mut store, emb, "lm", &mut rng).unwrap();
        let mut g = Graph::new(&store, false);
        let l = lm.lm_loss(&mut g, &[&[0, 0, 0]], &mut Dropout::eval()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (mut store, lm) = model(12);
        for id in [lm.projection.w, lm.projection.b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new(&store, false);
        let l = lm.lm_loss(&mut g, &[&[4, 5, 6], &[7]], &mut Dropout::eval()).unwrap();
        assert!((g.value(l).item() - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pretrain_zero_steps_is_identity_and_empty_corpus_fails() {
        let (mut store, lm) = model(12);
        let before = store.clone();
        let losses = lm
            .pretrain(&mut store, &[vec![4, 5]], &PretrainConfig { steps: 0, ..Default::default() }, 1)
            .unwrap();
        assert!(losses.is_empty());
        assert_eq!(store, before);
        assert!(matches!(
            lm.pretrain(&mut store, &[], &PretrainConfig::default(), 1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn score_is_batch_independent_and_single_position() {
        let (store, lm) = model(12);
        let s = [4, 9, 5];
        let a = lm.sentence_score(&store, &s).unwrap();
        let mut g = Graph::new(&store, false);
        let first = lm.sentence_loss(&mut g, &[7, 7, 8], &mut Dropout::eval()).unwrap();
        let second = lm.sentence_loss(&mut g, &s, &mut Dropout::eval()).unwrap();
        assert_ne!(g.value(first).item(), g.value(second).item());
        assert_eq!(a, -g.value(second).item());
        let one = lm.sentence_score(&store, &[6]).unwrap();
        let p = lm.position_distribution(&store, &[6], 0).unwrap();
        assert!((one - p[6].ln()).abs() < 1e-12);
    }
}
