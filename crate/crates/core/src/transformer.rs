//! Encoder-decoder translation model.
//!
//! Sentences are processed one at a time (`[len, dim]` activations); a
//! mini-batch is a list of per-sentence subgraphs on one [`Graph`]. This
//! keeps every sentence free of padding inside the model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax_along, Graph, Var};
use crate::layers::{embed, causal_mask, DecoderLayer, Dropout, LayerNorm, Linear, SelfAttentionLayer};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::{TokenId, BOS, EOS, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub src_vocab_size: usize,
    pub trg_vocab_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub pad_id: TokenId,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
    /// Decoder layer whose cross-attention feeds the target position
    /// distribution; `None` means the last layer.
    pub attention_layer: Option<usize>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            num_layers: 2,
            model_dim: 64,
            num_heads: 4,
            ff_dim: 128,
            src_vocab_size: 0,
            trg_vocab_size: 0,
            max_len: 64,
            dropout_rate: 0.1,
            pad_id: PAD,
            bos_id: BOS,
            eos_id: EOS,
            attention_layer: None,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be positive".into()));
        }
        if self.src_vocab_size == 0 || self.trg_vocab_size == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if let Some(l) = self.attention_layer {
            if l >= self.num_layers {
                return Err(Error::Config(format!(
                    "attention_layer {l} >= num_layers {}",
                    self.num_layers
                )));
            }
        }
        Ok(())
    }
}

/// Encoder-decoder attention scores `M[i][j]` between source position `i`
/// and target position `j`. Each column sums to one over `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    scores: Tensor<f64>,
}

impl AttentionMap {
    /// `scores` is `[source_len, target_len]`.
    pub fn new(scores: Tensor<f64>) -> Result<Self> {
        scores.dims2()?;
        Ok(AttentionMap { scores })
    }

    pub fn source_len(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn target_len(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores.at(i, j)
    }

    pub fn scores(&self) -> &Tensor<f64> {
        &self.scores
    }

    /// Averages per-head `[target, source]` weights and transposes.
    fn from_heads<T: Real>(heads: &[&Tensor<T>]) -> Result<Self> {
        let (tl, sl) = heads[0].dims2()?;
        let mut m = Tensor::<f64>::zeros(&[sl, tl]);
        let inv = 1.0 / heads.len() as f64;
        for h in heads {
            for j in 0..tl {
                for i in 0..sl {
                    m.data_mut()[i * tl + j] += h.at(j, i).to_f64().unwrap_or(f64::NAN) * inv;
                }
            }
        }
        AttentionMap::new(m)
    }
}

/// Nodes produced by one encoder-decoder pass.
pub struct Forward {
    pub logits: Var,
    /// Unscaled source embedding rows `e(x_i)`, `[|x|, dim]`.
    pub source_embeddings: Var,
    /// Unscaled decoder-input embedding rows `e(z_j)`, `[|z|, dim]`.
    pub target_embeddings: Var,
    pub attention: AttentionMap,
}

/// Gradients of a translation loss with respect to input embeddings.
#[derive(Debug, Clone)]
pub struct InputGrads<T> {
    /// One row `g_{x_i}` per source position.
    pub source: Tensor<T>,
    /// One row `g_{z_j}` per decoder-input position.
    pub target: Tensor<T>,
    pub loss: T,
    pub attention: AttentionMap,
    /// Decoder logits `[|z|, trg_vocab]` of the same pass.
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    pub config: TransformerConfig,
    pub src_embedding: ParamId,
    pub trg_embedding: ParamId,
    pub encoder: Vec<SelfAttentionLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
    pub projection: Linear,
}

impl Seq2Seq {
    /// Registers fresh embedding tables `emb.src` / `emb.trg` and the model
    /// weights under `mt.*`.
    pub fn init<T: Real, R: Rng>(
        config: &TransformerConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let std = 1.0 / (config.model_dim as f64).sqrt();
        let src = store.add_normal("emb.src", &[config.src_vocab_size, config.model_dim], std, rng);
        let trg = store.add_normal("emb.trg", &[config.trg_vocab_size, config.model_dim], std, rng);
        Self::with_embeddings(config, store, src, trg, rng)
    }

    /// Builds the model around existing embedding tables.
    pub fn with_embeddings<T: Real, R: Rng>(
        config: &TransformerConfig,
        store: &mut ParamStore<T>,
        src_embedding: ParamId,
        trg_embedding: ParamId,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        for (id, rows) in [
            (src_embedding, config.src_vocab_size),
            (trg_embedding, config.trg_vocab_size),
        ] {
            if store.get(id).shape() != [rows, d] {
                return Err(Error::shape("embedding table", store.get(id).shape(), &[rows, d]));
            }
        }
        let encoder = (0..config.num_layers)
            .map(|l| {
                SelfAttentionLayer::new(store, &format!("mt.enc{l}"), d, config.num_heads, config.ff_dim, rng)
            })
            .collect();
        let encoder_norm = LayerNorm::new(store, "mt.enc_norm", d);
        let decoder = (0..config.num_layers)
            .map(|l| DecoderLayer::new(store, &format!("mt.dec{l}"), d, config.num_heads, config.ff_dim, rng))
            .collect();
        let decoder_norm = LayerNorm::new(store, "mt.dec_norm", d);
        let projection = Linear::new(store, "mt.proj", d, config.trg_vocab_size, rng);
        Ok(Seq2Seq {
            config: config.clone(),
            src_embedding,
            trg_embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            projection,
        })
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::Length {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Encodes `x` to `h` (`[|x|, dim]`). Returns `(h, e(x))`.
    pub fn encode_graph<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: &[TokenId],
        drop: &mut Dropout,
    ) -> Result<(Var, Var)> {
        if x.is_empty() {
            return Err(Error::DegenerateInput("empty source sentence".into()));
        }
        self.check_len(x.len())?;
        let (h, raw) = embed(g, self.src_embedding, x)?;
        let mut h = drop.apply(g, h)?;
        for layer in &self.encoder {
            h = layer.forward(g, h, None, drop)?;
        }
        Ok((self.encoder_norm.forward(g, h)?, raw))
    }

    /// Runs the decoder over `z` given encoder states `h`. Returns
    /// `(logits, e(z), attention)`.
    pub fn decode_graph<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        z: &[TokenId],
        h: Var,
        drop: &mut Dropout,
    ) -> Result<(Var, Var, AttentionMap)> {
        if z.first() != Some(&self.config.bos_id) {
            return Err(Error::Contract("decoder input must begin with BOS".into()));
        }
        self.check_len(z.len())?;
        let (s, raw) = embed(g, self.trg_embedding, z)?;
        let mut s = drop.apply(g, s)?;
        let causal = causal_mask::<T>(z.len());
        let wanted = self.config.attention_layer.unwrap_or(self.decoder.len() - 1);
        let mut attn = None;
        for (l, layer) in self.decoder.iter().enumerate() {
            let (next, heads) = layer.forward(g, s, h, &causal, drop)?;
            if l == wanted {
                attn = Some(heads);
            }
            s = next;
        }
        let s = self.decoder_norm.forward(g, s)?;
        let logits = self.projection.forward(g, s)?;
        let heads = attn.expect("attention layer index validated");
        let tensors: Vec<&Tensor<T>> = heads.iter().map(|&v| g.value(v)).collect();
        let attention = AttentionMap::from_heads(&tensors)?;
        Ok((logits, raw, attention))
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: &[TokenId],
        z: &[TokenId],
        drop: &mut Dropout,
    ) -> Result<Forward> {
        let (h, source_embeddings) = self.encode_graph(g, x, drop)?;
        let (logits, target_embeddings, attention) = self.decode_graph(g, z, h, drop)?;
        Ok(Forward {
            logits,
            source_embeddings,
            target_embeddings,
            attention,
        })
    }

    /// `−log P(y | x)` averaged over non-pad target tokens.
    pub fn translation_loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: &[TokenId],
        z: &[TokenId],
        y: &[TokenId],
        drop: &mut Dropout,
    ) -> Result<(Var, Forward)> {
        if z.len() != y.len() {
            return Err(Error::Contract(format!(
                "decoder input length {} != target length {}",
                z.len(),
                y.len()
            )));
        }
        let fwd = self.forward(g, x, z, drop)?;
        let loss = g.cross_entropy(fwd.logits, y, self.config.pad_id)?;
        Ok((loss, fwd))
    }

    /// Gradients of `−log P(y | x)` with respect to every source and
    /// decoder-input embedding row, evaluated without dropout. Parameters
    /// are read-only.
    pub fn input_embedding_grads<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[TokenId],
        z: &[TokenId],
        y: &[TokenId],
    ) -> Result<InputGrads<T>> {
        let mut g = Graph::new(store, false);
        self.input_embedding_grads_on(&mut g, x, z, y)
    }

    /// As [`Seq2Seq::input_embedding_grads`], recording the pass on an
    /// existing graph. The graph's other losses are unaffected.
    pub fn input_embedding_grads_on<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: &[TokenId],
        z: &[TokenId],
        y: &[TokenId],
    ) -> Result<InputGrads<T>> {
        let (loss, fwd) = self.translation_loss(g, x, z, y, &mut Dropout::eval())?;
        let grads = g.backward(loss)?;
        let d = self.config.model_dim;
        Ok(InputGrads {
            source: grads.get_or_zeros(fwd.source_embeddings, &[x.len(), d]),
            target: grads.get_or_zeros(fwd.target_embeddings, &[z.len(), d]),
            loss: g.value(loss).item(),
            attention: fwd.attention,
            logits: g.value(fwd.logits).clone(),
        })
    }

    /// Encoder states for `x` in eval mode.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, x: &[TokenId]) -> Result<Tensor<T>> {
        let mut g = Graph::new(store, false);
        let (h, _) = self.encode_graph(&mut g, x, &mut Dropout::eval())?;
        Ok(g.value(h).clone())
    }

    /// Decoder logits and attention for `z` given precomputed encoder
    /// states, eval mode.
    pub fn decode<T: Real>(
        &self,
        store: &ParamStore<T>,
        z: &[TokenId],
        h: &Tensor<T>,
    ) -> Result<(Tensor<T>, AttentionMap)> {
        let (_, d) = h.dims2()?;
        if d != self.config.model_dim {
            return Err(Error::shape("decode", h.shape(), &[0, self.config.model_dim]));
        }
        let mut g = Graph::new(store, false);
        let hv = g.constant(h.clone());
        let (logits, _, attn) = self.decode_graph(&mut g, z, hv, &mut Dropout::eval())?;
        Ok((g.value(logits).clone(), attn))
    }

    /// Next-token distributions `P(· | z_{≤j}, x)` for every decoder
    /// position `j`, eval mode. Row `j` predicts `y_j = z_{j+1}`.
    pub fn next_token_distributions<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[TokenId],
        z: &[TokenId],
    ) -> Result<Tensor<T>> {
        let h = self.encode(store, x)?;
        let (logits, _) = self.decode(store, z, &h)?;
        Ok(softmax_along(&logits, 1, false))
    }

    /// Greedy decoding; stops after EOS or `max_steps` tokens. The returned
    /// sequence excludes BOS and EOS.
    pub fn greedy_decode<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[TokenId],
        max_steps: usize,
    ) -> Result<Vec<TokenId>> {
        let h = self.encode(store, x)?;
        let mut z = vec![self.config.bos_id];
        let limit = max_steps.min(self.config.max_len.saturating_sub(1));
        while z.len() <= limit {
            let (logits, _) = self.decode(store, &z, &h)?;
            let last = logits.row(logits.shape()[0] - 1);
            let next = argmax_excluding(last, &[self.config.pad_id, self.config.bos_id]);
            if next == self.config.eos_id {
                break;
            }
            z.push(next);
        }
        z.remove(0);
        Ok(z)
    }

    /// Mean loss over a list of `(x, z, y)` triples on one graph.
    pub fn batch_loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &[(&[TokenId], &[TokenId], &[TokenId])],
        drop: &mut Dropout,
    ) -> Result<Var> {
        let mut losses = Vec::with_capacity(batch.len());
        for &(x, z, y) in batch {
            losses.push(self.translation_loss(g, x, z, y, drop)?.0);
        }
        g.mean_scalars(&losses)
    }
}

/// Index of the largest value, lowest index on ties, skipping `skip`.
fn argmax_excluding<T: Real>(row: &[T], skip: &[TokenId]) -> TokenId {
    let mut best = None::<(usize, T)>;
    for (i, &v) in row.iter().enumerate() {
        if skip.contains(&(i as TokenId)) {
            continue;
        }
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i as TokenId)
}

/// Uniform-logit check helper: `ln(V)`.
pub fn uniform_loss(vocab: usize) -> f64 {
    (vocab as f64).ln()
}
