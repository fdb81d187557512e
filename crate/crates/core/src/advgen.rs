//! Gradient-guided adversarial sentence generation.
//!
//! [`adv_gen`] perturbs a sentence `s` by sampling a fraction `γ` of its
//! positions from a position distribution and replacing each sampled word
//! `s_i` with the candidate `c` that maximizes
//! `cos(e(c) − e(s_i), g_{s_i})`, where `g_{s_i}` is the gradient of the
//! translation loss with respect to `e(s_i)`. Candidates are the top-n
//! words of a likelihood `Q(s_i, s)` minus `s_i` itself.
//!
//! On the source side `Q` is the bidirectional source LM ([`q_src`]) and
//! positions are uniform. On the target side `Q` mixes the target LM with
//! the translation model's next-word prediction ([`q_trg`]) and positions
//! follow the encoder-decoder attention paid to the perturbed source words
//! ([`target_position_distribution`]).
//!
//! Conventions:
//! - the number of sampled positions is `round(γ·|s|)`, at least one when
//!   `γ > 0`, capped by the number of eligible positions; sampling is
//!   without replacement;
//! - special tokens are never sampled and never proposed;
//! - top-n and argmax ties go to the lower token id;
//! - a zero gradient or an empty candidate set keeps the original word.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bilm::BiLm;
use crate::error::{Error, Result};
use crate::graph::softmax_along;
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::transformer::{AttentionMap, Seq2Seq};
use crate::{TokenId, BOS, EOS, PAD, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvConfig {
    pub gamma_src: f64,
    pub gamma_trg: f64,
    /// Candidate count `n` of the top-n likelihood filter.
    pub candidates: usize,
    /// Weight of the target LM in the target likelihood mixture.
    pub lambda: f64,
    pub seed: u64,
    pub excluded: Vec<TokenId>,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            gamma_src: 0.25,
            gamma_trg: 0.5,
            candidates: 10,
            lambda: 0.5,
            seed: 0,
            excluded: vec![PAD, BOS, EOS, UNK],
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_src", self.gamma_src),
            ("gamma_trg", self.gamma_trg),
            ("lambda", self.lambda),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.candidates == 0 {
            return Err(Error::Config("candidates (n) must be at least 1".into()));
        }
        Ok(())
    }
}

/// Replacement candidates for one position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub position: usize,
    pub candidates: Vec<TokenId>,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.candidates.contains(&id)
    }
}

/// The `n` most likely tokens under `q` (ties to lower id), minus
/// `original` and `excluded`.
pub fn candidate_set<T: Real>(
    q: &[T],
    position: usize,
    original: TokenId,
    n: usize,
    excluded: &[TokenId],
) -> CandidateSet {
    let mut order: Vec<usize> = (0..q.len()).collect();
    // stable sort keeps lower ids first among equal probabilities
    order.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap_or(std::cmp::Ordering::Equal));
    let candidates = order
        .into_iter()
        .take(n)
        .map(|i| i as TokenId)
        .filter(|&id| id != original && !excluded.contains(&id))
        .collect();
    CandidateSet {
        position,
        candidates,
    }
}

/// Cosine similarity in f64; `None` when either vector has zero norm.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64()?, y.to_f64()?);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na.sqrt() * nb.sqrt()))
}

/// `argmax_{c ∈ cands} cos(e(c) − e_orig, g)`.
///
/// Returns `None` for an empty candidate set or a zero gradient. A
/// candidate whose embedding equals `e_orig` has no direction and is
/// skipped.
pub fn select_adversarial_word<T: Real>(
    cands: &CandidateSet,
    original_embedding: &[T],
    grad: &[T],
    embeddings: &Tensor<T>,
) -> Option<TokenId> {
    if grad.iter().all(|&v| v == T::zero()) {
        return None;
    }
    let mut best: Option<(TokenId, f64)> = None;
    let mut diff = vec![T::zero(); original_embedding.len()];
    for &c in &cands.candidates {
        for ((d, &e), &o) in diff
            .iter_mut()
            .zip(embeddings.row(c as usize))
            .zip(original_embedding)
        {
            *d = e - o;
        }
        let Some(sim) = cosine(&diff, grad) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((id, b)) => sim > b || (sim == b && c < id),
        };
        if better {
            best = Some((c, sim));
        }
    }
    best.map(|(id, _)| id)
}

/// A probability distribution over the positions of one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionDistribution {
    probs: Vec<f64>,
}

impl PositionDistribution {
    /// Normalizes nonnegative weights; `None` if they sum to zero.
    pub fn from_weights(weights: Vec<f64>) -> Option<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return None;
        }
        Some(PositionDistribution {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn uniform(len: usize) -> Self {
        PositionDistribution {
            probs: vec![1.0 / len as f64; len],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Zeroes positions holding an excluded token and renormalizes.
    pub fn masked(&self, tokens: &[TokenId], excluded: &[TokenId]) -> Option<Self> {
        let weights = self
            .probs
            .iter()
            .zip(tokens)
            .map(|(&p, t)| if excluded.contains(t) { 0.0 } else { p })
            .collect();
        Self::from_weights(weights)
    }

    pub fn support(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }

    /// Draws `k` distinct positions (capped by the support), each draw
    /// proportional to the remaining mass. Returned in draw order.
    pub fn sample_without_replacement<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        let mut weights = self.probs.clone();
        let mut picked = Vec::with_capacity(k);
        for _ in 0..k.min(self.support()) {
            let total: f64 = weights.iter().sum();
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut choice = None;
            for (i, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                choice = Some(i);
                if target < acc {
                    break;
                }
            }
            let i = choice.expect("positive support");
            weights[i] = 0.0;
            picked.push(i);
        }
        picked
    }
}

/// Number of positions to perturb: `round(γ·len)`.
pub fn replacement_budget(gamma: f64, len: usize) -> usize {
    if gamma <= 0.0 {
        return 0;
    }
    (gamma * len as f64).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdvGenStatus {
    Ok,
    /// No position had probability mass after masking special tokens; the
    /// sentence was returned unchanged.
    NoEligiblePositions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvGenOutput {
    pub sentence: Vec<TokenId>,
    /// Positions drawn from the position distribution, in draw order.
    pub sampled: Vec<usize>,
    /// Positions whose token actually changed, ascending.
    pub changed: Vec<usize>,
    pub status: AdvGenStatus,
}

/// Inputs of one [`adv_gen`] call.
pub struct AdvGenInputs<'a, T> {
    pub sentence: &'a [TokenId],
    /// Likelihood `Q(s_i, s)`: row `i` is a distribution over the vocabulary.
    pub likelihood: &'a Tensor<T>,
    pub positions: &'a PositionDistribution,
    /// Row `i` is `g_{s_i}`.
    pub grads: &'a Tensor<T>,
    pub embeddings: &'a Tensor<T>,
    pub gamma: f64,
    pub candidates: usize,
    pub excluded: &'a [TokenId],
}

/// Generates an adversarial copy of `inputs.sentence`.
pub fn adv_gen<T: Real, R: Rng>(inputs: &AdvGenInputs<'_, T>, rng: &mut R) -> Result<AdvGenOutput> {
    let s = inputs.sentence;
    let n = s.len();
    if inputs.positions.len() != n {
        return Err(Error::Contract(format!(
            "position distribution has {} entries for a sentence of length {n}",
            inputs.positions.len()
        )));
    }
    if inputs.grads.shape().first() != Some(&n) || inputs.likelihood.shape().first() != Some(&n) {
        return Err(Error::shape(
            "adv_gen",
            inputs.grads.shape(),
            inputs.likelihood.shape(),
        ));
    }
    let unchanged = |status| AdvGenOutput {
        sentence: s.to_vec(),
        sampled: Vec::new(),
        changed: Vec::new(),
        status,
    };
    let budget = replacement_budget(inputs.gamma, n);
    if budget == 0 {
        return Ok(unchanged(AdvGenStatus::Ok));
    }
    let Some(dist) = inputs.positions.masked(s, inputs.excluded) else {
        warn!("adv_gen: no eligible positions in a sentence of length {n}");
        return Ok(unchanged(AdvGenStatus::NoEligiblePositions));
    };
    let sampled = dist.sample_without_replacement(budget, rng);
    let mut out = s.to_vec();
    for &i in &sampled {
        let cands = candidate_set(
            inputs.likelihood.row(i),
            i,
            s[i],
            inputs.candidates,
            inputs.excluded,
        );
        let original = inputs.embeddings.row(s[i] as usize);
        if let Some(c) = select_adversarial_word(&cands, original, inputs.grads.row(i), inputs.embeddings) {
            out[i] = c;
        }
    }
    let changed = (0..n).filter(|&i| out[i] != s[i]).collect();
    Ok(AdvGenOutput {
        sentence: out,
        sampled,
        changed,
        status: AdvGenStatus::Ok,
    })
}

/// Source likelihood: the bidirectional source LM at every position.
pub fn q_src<T: Real>(bilm: &BiLm, store: &ParamStore<T>, x: &[TokenId]) -> Result<Tensor<T>> {
    bilm.distributions(store, x)
}

/// Target likelihood for every decoder-input position `i ≥ 1`:
/// `λ·P_lm(z_i | z_{<i}, z_{>i}) + (1−λ)·P_mt(z_i | z_{<i}, x′)`.
///
/// `lm` holds the target LM distributions for the content tokens
/// `z[1..]` and `mt_next` the translation model's next-token
/// distributions for decoder positions `0..|z|` (row `j` predicts
/// `z_{j+1}`). Row 0 (the BOS slot) is a point mass on BOS.
pub fn mix_target_likelihood<T: Real>(
    lm: Option<&Tensor<T>>,
    mt_next: &Tensor<T>,
    lambda: f64,
    bos: TokenId,
) -> Result<Tensor<T>> {
    let (zlen, vocab) = mt_next.dims2()?;
    if let Some(lm) = lm {
        if lm.shape() != [zlen - 1, vocab] {
            return Err(Error::shape("mix_target_likelihood", lm.shape(), &[zlen - 1, vocab]));
        }
    }
    let lam: T = T::from_f64_lossy(lambda);
    let rest: T = T::from_f64_lossy(1.0 - lambda);
    let mut out = Tensor::zeros(&[zlen, vocab]);
    out.row_mut(0)[bos as usize] = T::one();
    for i in 1..zlen {
        let mt = mt_next.row(i - 1);
        let row = out.row_mut(i);
        match lm {
            Some(lm) => {
                for ((o, &p), &m) in row.iter_mut().zip(lm.row(i - 1)).zip(mt) {
                    *o = lam * p + rest * m;
                }
            }
            None => row.copy_from_slice(mt),
        }
    }
    Ok(out)
}

/// [`mix_target_likelihood`] with both components computed from the
/// models: the LM on `z[1..]`, the translation model on `(x′, z)`.
pub fn q_trg<T: Real>(
    z: &[TokenId],
    x_prime: &[TokenId],
    bilm_trg: &BiLm,
    mt: &Seq2Seq,
    store: &ParamStore<T>,
    lambda: f64,
) -> Result<Tensor<T>> {
    let mt_next = mt.next_token_distributions(store, x_prime, z)?;
    let lm = if z.len() > 1 {
        Some(bilm_trg.distributions(store, &z[1..])?)
    } else {
        None
    };
    mix_target_likelihood(lm.as_ref(), &mt_next, lambda, mt.config.bos_id)
}

/// Next-token distributions from decoder logits.
pub fn next_token_probs<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    softmax_along(logits, 1, false)
}

/// `P(j) ∝ Σ_i M_ij · [x_i ≠ x′_i]`, uniform over all target positions when
/// no source word changed.
pub fn target_position_distribution(
    attn: &AttentionMap,
    x: &[TokenId],
    x_prime: &[TokenId],
) -> Result<PositionDistribution> {
    if x.len() != x_prime.len() || attn.source_len() != x.len() {
        return Err(Error::Contract(format!(
            "attention map is {}x{} but |x| = {}, |x'| = {}",
            attn.source_len(),
            attn.target_len(),
            x.len(),
            x_prime.len()
        )));
    }
    let changed: Vec<usize> = (0..x.len()).filter(|&i| x[i] != x_prime[i]).collect();
    let weights: Vec<f64> = (0..attn.target_len())
        .map(|j| changed.iter().map(|&i| attn.get(i, j)).sum())
        .collect();
    Ok(PositionDistribution::from_weights(weights)
        .unwrap_or_else(|| PositionDistribution::uniform(attn.target_len())))
}
