//! Transformer building blocks on top of [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{real, Real, Tensor};

/// Dropout state for one forward pass. `Dropout::eval()` disables it.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Dropout {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn train(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rate > 0.0 && self.rng.is_some()
    }

    pub fn apply<T: Real>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep: T = real(1.0 / (1.0 - rate));
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        g.mul_const(x, Tensor::new(shape, mask)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            w: store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng),
            b: store.add_const(format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w)?;
        g.add_row(h, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_const(format!("{name}.gain"), &[dim], 1.0),
            bias: store.add_const(format!("{name}.bias"), &[dim], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, Self::EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Output of one attention block, keeping each head's weights so callers
/// can read alignment scores.
pub struct AttentionOut {
    pub out: Var,
    pub head_weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// `query_in` is `[n, dim]`, `memory` is `[m, dim]`; `mask` is an
    /// additive `[n, m]` tensor (0 or -inf).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        query_in: Var,
        memory: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<AttentionOut> {
        let dim = g.shape(query_in)[1];
        let head_dim = dim / self.heads;
        let q = self.query.forward(g, query_in)?;
        let k = self.key.forward(g, memory)?;
        let v = self.value.forward(g, memory)?;
        let scale: T = real(1.0 / (head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut head_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
            let qh = g.slice_last(q, lo, hi)?;
            let kh = g.slice_last(k, lo, hi)?;
            let vh = g.slice_last(v, lo, hi)?;
            let scores = g.matmul_nt(qh, kh)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add_const(scores, m)?;
            }
            let weights = g.softmax(scores, 1)?;
            head_weights.push(weights);
            outs.push(g.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs, 1)?
        };
        let out = self.output.forward(g, merged)?;
        Ok(AttentionOut { out, head_weights })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.ff1"), dim, ff_dim, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), ff_dim, dim, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h);
        let h = drop.apply(g, h)?;
        self.outer.forward(g, h)
    }
}

/// Pre-norm self-attention block, used by the translation encoder (no
/// mask) and by the language-model stacks (causal mask).
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl SelfAttentionLayer {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Self {
        SelfAttentionLayer {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(store, name, dim, ff_dim, rng),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mask: Option<&Tensor<T>>,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let n = self.norm_attn.forward(g, x)?;
        let a = self.attn.forward(g, n, n, mask)?.out;
        let a = drop.apply(g, a)?;
        let x = g.add(x, a)?;
        let n = self.norm_ff.forward(g, x)?;
        let f = self.ff.forward(g, n, drop)?;
        let f = drop.apply(g, f)?;
        g.add(x, f)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over the
/// encoder output, feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Self {
        DecoderLayer {
            norm_self: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.ln3"), dim),
            ff: FeedForward::new(store, name, dim, ff_dim, rng),
        }
    }

    /// Returns the new hidden state and the cross-attention weights of each
    /// head (`[|z|, |x|]`).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        memory: Var,
        causal: &Tensor<T>,
        drop: &mut Dropout,
    ) -> Result<(Var, Vec<Var>)> {
        let n = self.norm_self.forward(g, x)?;
        let a = self.self_attn.forward(g, n, n, Some(causal))?.out;
        let a = drop.apply(g, a)?;
        let x = g.add(x, a)?;
        let n = self.norm_cross.forward(g, x)?;
        let cross = self.cross_attn.forward(g, n, memory, None)?;
        let c = drop.apply(g, cross.out)?;
        let x = g.add(x, c)?;
        let n = self.norm_ff.forward(g, x)?;
        let f = self.ff.forward(g, n, drop)?;
        let f = drop.apply(g, f)?;
        Ok((g.add(x, f)?, cross.head_weights))
    }
}

/// Additive causal mask: position `i` may attend to `j <= i`.
pub fn causal_mask<T: Real>(n: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            m.data_mut()[i * n + j] = T::neg_infinity();
        }
    }
    m
}

/// Fixed sinusoidal position encodings, `[n, dim]`.
pub fn sinusoidal_positions<T: Real>(n: usize, dim: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[n, dim]);
    for pos in 0..n {
        let row = t.row_mut(pos);
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            row[i] = real(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Looks up embeddings for `ids`, scales by √dim and adds positions.
///
/// Returns `(embedded, raw)` where `raw` is the node holding the unscaled
/// table rows `e(s_i)`. When parameters are not tracked, `raw` is a
/// tracked leaf so gradients with respect to input embeddings are still
/// available.
pub fn embed<T: Real>(
    g: &mut Graph<'_, T>,
    table: ParamId,
    ids: &[crate::TokenId],
) -> Result<(Var, Var)> {
    let t = g.param(table);
    let raw = if g.tracks_params() {
        g.gather_rows(t, ids)?
    } else {
        let rows = g.gather_rows(t, ids)?;
        let v = g.value(rows).clone();
        g.leaf(v)
    };
    let dim = g.shape(raw)[1];
    let scaled = g.scale(raw, real((dim as f64).sqrt()));
    let pe = sinusoidal_positions(ids.len(), dim);
    Ok((g.add_const(scaled, &pe)?, raw))
}
