//! Robust training: adversarial source and target inputs, the four-term
//! objective, and the optimizer loop.
//!
//! Each step takes one batch and, per sentence:
//!
//! 1. computes `g_x`, the gradient of `−log P(y|x)` at the source
//!    embeddings, and perturbs `x` into `x′` with the source LM proposing
//!    candidates at uniformly sampled positions;
//! 2. computes `g_z` from `−log P(y|x′)` and perturbs the decoder input `z`
//!    into `z′`, with candidates from a mixture of the target LM and the
//!    translation model and positions weighted by the attention paid to the
//!    changed source words.
//!
//! Both constructions run on read-only parameters and contribute nothing
//! to the gradient. The objective is then
//! `L_clean + L_lm(src) + L_robust + L_lm(trg)`, each term a batch mean,
//! with `L_robust = −log P(y | x′, z′)`.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::advgen::{
    adv_gen, mix_target_likelihood, next_token_probs, target_position_distribution, AdvConfig,
    AdvGenInputs, AdvGenStatus, PositionDistribution,
};
use crate::bilm::PretrainConfig;
use crate::data::{batch_iter, Batch, SentencePair};
use crate::error::{Error, Result};
use crate::graph::{GradBuffer, Graph, Var};
use crate::layers::Dropout;
use crate::models::ModelSet;
use crate::optim::{Adam, OptimConfig};
use crate::rng::{self, stream};
use crate::tensor::{Real, Tensor};
use crate::transformer::{AttentionMap, InputGrads};
use crate::TokenId;

/// Which parts of the objective are active.
///
/// `lm` toggles the two language-model loss terms only. The language
/// models still propose candidates (frozen) when it is off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSwitches {
    pub clean: bool,
    pub robust: bool,
    pub lm: bool,
    pub perturb_source: bool,
    pub perturb_target: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            clean: true,
            robust: true,
            lm: true,
            perturb_source: true,
            perturb_target: true,
        }
    }
}

impl LossSwitches {
    pub const CLEAN_ONLY: LossSwitches = LossSwitches {
        clean: true,
        robust: false,
        lm: false,
        perturb_source: false,
        perturb_target: false,
    };

    /// The six rows of the component ablation, 1-based:
    ///
    /// | row | clean | x′≠x | z′≠z | lm |
    /// |-----|-------|------|------|----|
    /// | 1   | ✓     |      |      |    |
    /// | 2   | ✓     |      |      | ✓  |
    /// | 3   | ✓     | ✓    |      | ✓  |
    /// | 4   | ✓     |      | ✓    | ✓  |
    /// | 5   | ✓     | ✓    | ✓    |    |
    /// | 6   | ✓     | ✓    | ✓    | ✓  |
    pub fn ablation_row(row: usize) -> Option<Self> {
        let (src, trg, lm) = match row {
            1 => (false, false, false),
            2 => (false, false, true),
            3 => (true, false, true),
            4 => (false, true, true),
            5 => (true, true, false),
            6 => (true, true, true),
            _ => return None,
        };
        Some(LossSwitches {
            clean: true,
            robust: src || trg,
            lm,
            perturb_source: src,
            perturb_target: trg,
        })
    }

    pub fn any(&self) -> bool {
        self.clean || self.robust || self.lm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adv: AdvConfig,
    pub optim: OptimConfig,
    /// Source plus target tokens per batch.
    pub batch_tokens: usize,
    pub max_steps: u64,
    /// Checkpoint every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub switches: LossSwitches,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adv: AdvConfig::default(),
            optim: OptimConfig::default(),
            batch_tokens: 1024,
            max_steps: 1000,
            checkpoint_every: 0,
            switches: LossSwitches::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adv.validate()?;
        if !self.switches.any() {
            return Err(Error::Config("every loss term is disabled".into()));
        }
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to resume training. All randomness is derived from
/// `(seed, step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub models: ModelSet<T>,
    pub adam: Adam<T>,
    pub step: u64,
    pub seed: u64,
}

impl<T: Real> TrainState<T> {
    pub fn new(models: ModelSet<T>, seed: u64) -> Self {
        let adam = Adam::new(&models.store);
        TrainState {
            models,
            adam,
            step: 0,
            seed,
        }
    }
}

/// Adversarial inputs for one sentence pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvPair {
    pub x: Vec<TokenId>,
    pub z: Vec<TokenId>,
    pub source_changed: usize,
    pub target_changed: usize,
    pub source_status: AdvGenStatus,
    pub target_status: AdvGenStatus,
}

impl AdvPair {
    pub fn unchanged(pair: &SentencePair) -> Self {
        AdvPair {
            x: pair.x.clone(),
            z: pair.z.clone(),
            source_changed: 0,
            target_changed: 0,
            source_status: AdvGenStatus::Ok,
            target_status: AdvGenStatus::Ok,
        }
    }
}

fn input_grads<T: Real>(
    models: &ModelSet<T>,
    tape: &mut Option<&mut Graph<'_, T>>,
    x: &[TokenId],
    z: &[TokenId],
    y: &[TokenId],
) -> Result<InputGrads<T>> {
    match tape {
        Some(g) => models.mt.input_embedding_grads_on(g, x, z, y),
        None => models.mt.input_embedding_grads(&models.store, x, z, y),
    }
}

fn lm_distributions<T: Real>(
    models: &ModelSet<T>,
    tape: &mut Option<&mut Graph<'_, T>>,
    source_side: bool,
    s: &[TokenId],
) -> Result<Tensor<T>> {
    let lm = if source_side { &models.lm_src } else { &models.lm_trg };
    match tape {
        Some(g) => lm.distributions_on(g, s),
        None => lm.distributions(&models.store, s),
    }
}

/// Builds `x′` and `z′` for one pair. Randomness comes from `seed` alone.
///
/// With `tape = Some(g)` every internal pass is recorded on `g` instead of
/// on private graphs; the outputs are the same either way.
pub fn adversarial_pair<T: Real>(
    models: &ModelSet<T>,
    pair: &SentencePair,
    adv: &AdvConfig,
    switches: &LossSwitches,
    seed: u64,
    mut tape: Option<&mut Graph<'_, T>>,
) -> Result<AdvPair> {
    let mut out = AdvPair::unchanged(pair);
    let (x, z, y) = (&pair.x, &pair.z, &pair.y);
    let store = &models.store;
    let mut clean_attention: Option<AttentionMap> = None;

    if switches.perturb_source && adv.gamma_src > 0.0 {
        let grads = input_grads(models, &mut tape, x, z, y)?;
        let q = lm_distributions(models, &mut tape, true, x)?;
        let positions = PositionDistribution::uniform(x.len());
        let result = adv_gen(
            &AdvGenInputs {
                sentence: x,
                likelihood: &q,
                positions: &positions,
                grads: &grads.source,
                embeddings: store.get(models.mt.src_embedding),
                gamma: adv.gamma_src,
                candidates: adv.candidates,
                excluded: &adv.excluded,
            },
            &mut rng::rng_for(seed, stream::ADVGEN_SRC, 0),
        )?;
        out.source_changed = result.changed.len();
        out.source_status = result.status;
        out.x = result.sentence;
        clean_attention = Some(grads.attention);
    }

    if switches.perturb_target && adv.gamma_trg > 0.0 {
        let grads = input_grads(models, &mut tape, &out.x, z, y)?;
        let mt_next = next_token_probs(&grads.logits);
        let lm = if z.len() > 1 {
            Some(lm_distributions(models, &mut tape, false, &z[1..])?)
        } else {
            None
        };
        let q = mix_target_likelihood(lm.as_ref(), &mt_next, adv.lambda, models.mt.config.bos_id)?;
        let positions = match &clean_attention {
            Some(attn) => target_position_distribution(attn, x, &out.x)?,
            None => PositionDistribution::uniform(z.len()),
        };
        let result = adv_gen(
            &AdvGenInputs {
                sentence: z,
                likelihood: &q,
                positions: &positions,
                grads: &grads.target,
                embeddings: store.get(models.mt.trg_embedding),
                gamma: adv.gamma_trg,
                candidates: adv.candidates,
                excluded: &adv.excluded,
            },
            &mut rng::rng_for(seed, stream::ADVGEN_TRG, 0),
        )?;
        out.target_changed = result.changed.len();
        out.target_status = result.status;
        out.z = result.sentence;
    }
    Ok(out)
}

/// `−log P(y | x′, z′)` for one pair, with `x′` and `z′` built by
/// [`adversarial_pair`]. Only the final pass is differentiable.
pub fn robustness_loss<T: Real>(
    g: &mut Graph<'_, T>,
    models: &ModelSet<T>,
    pair: &SentencePair,
    adv: &AdvConfig,
    seed: u64,
    drop: &mut Dropout,
) -> Result<(Var, AdvPair)> {
    let switches = LossSwitches::default();
    let ap = adversarial_pair(models, pair, adv, &switches, seed, None)?;
    let (loss, _) = models.mt.translation_loss(g, &ap.x, &ap.z, &pair.y, drop)?;
    Ok((loss, ap))
}

/// The objective's terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Clean,
    Robust,
    LmSource,
    LmTarget,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Clean, Term::Robust, Term::LmSource, Term::LmTarget];

    pub fn enabled(self, s: &LossSwitches) -> bool {
        match self {
            Term::Clean => s.clean,
            Term::Robust => s.robust,
            Term::LmSource | Term::LmTarget => s.lm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Term::Clean => "l_clean",
            Term::Robust => "l_robust",
            Term::LmSource => "l_lm_x",
            Term::LmTarget => "l_lm_y",
        }
    }
}

/// Batch mean of one term. `adv` must hold one entry per pair when `term`
/// is [`Term::Robust`].
pub fn term_loss<T: Real>(
    g: &mut Graph<'_, T>,
    models: &ModelSet<T>,
    term: Term,
    batch: &[&SentencePair],
    adv: &[AdvPair],
    drop: &mut Dropout,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::DegenerateInput("empty batch".into()));
    }
    match term {
        Term::Clean => {
            let triples: Vec<_> = batch
                .iter()
                .map(|p| (&p.x[..], &p.z[..], &p.y[..]))
                .collect();
            models.mt.batch_loss(g, &triples, drop)
        }
        Term::Robust => {
            if adv.len() != batch.len() {
                return Err(Error::Contract(format!(
                    "{} adversarial pairs for a batch of {}",
                    adv.len(),
                    batch.len()
                )));
            }
            let triples: Vec<_> = batch
                .iter()
                .zip(adv)
                .map(|(p, a)| (&a.x[..], &a.z[..], &p.y[..]))
                .collect();
            models.mt.batch_loss(g, &triples, drop)
        }
        Term::LmSource => {
            let sents: Vec<&[TokenId]> = batch.iter().map(|p| &p.x[..]).collect();
            models.lm_src.lm_loss(g, &sents, drop)
        }
        Term::LmTarget => {
            let sents: Vec<&[TokenId]> = batch.iter().map(|p| p.target()).collect();
            models.lm_trg.lm_loss(g, &sents, drop)
        }
    }
}

/// The enabled terms of one batch and their unweighted sum, on one graph.
pub fn total_loss<T: Real>(
    g: &mut Graph<'_, T>,
    models: &ModelSet<T>,
    batch: &[&SentencePair],
    adv: &[AdvPair],
    switches: &LossSwitches,
    drop: &mut Dropout,
) -> Result<(Var, Vec<(Term, Var)>)> {
    if !switches.any() {
        return Err(Error::Config("every loss term is disabled".into()));
    }
    let mut terms = Vec::new();
    for term in Term::ALL {
        if term.enabled(switches) {
            terms.push((term, term_loss(g, models, term, batch, adv, drop)?));
        }
    }
    let vars: Vec<Var> = terms.iter().map(|&(_, v)| v).collect();
    Ok((g.add_n(&vars)?, terms))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_clean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_robust: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_lm_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_lm_y: Option<f64>,
    pub sentences: usize,
    pub src_tokens: usize,
    pub trg_tokens: usize,
    pub src_replaced: usize,
    pub trg_replaced: usize,
    pub lr: f64,
    pub wall_ms: f64,
    pub advgen_ms: f64,
    pub clean_ms: f64,
    /// `advgen_ms / clean_ms`: the cost of building adversarial inputs
    /// relative to a clean forward-backward pass on the same batch.
    pub advgen_ratio: f64,
}

impl StepMetrics {
    fn set(&mut self, term: Term, value: f64) {
        let slot = match term {
            Term::Clean => &mut self.l_clean,
            Term::Robust => &mut self.l_robust,
            Term::LmSource => &mut self.l_lm_x,
            Term::LmTarget => &mut self.l_lm_y,
        };
        *slot = Some(value);
    }

    /// The same record without timing fields, for run-to-run comparison.
    pub fn without_timing(&self) -> StepMetrics {
        StepMetrics {
            wall_ms: 0.0,
            advgen_ms: 0.0,
            clean_ms: 0.0,
            advgen_ratio: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Deterministic batch order: epoch `e` is shuffled with a seed derived
/// from `(seed, e)`, and step `s` (1-based) takes the next batch.
#[derive(Debug, Clone)]
pub struct BatchSchedule<'a> {
    pairs: &'a [SentencePair],
    budget: usize,
    seed: u64,
    epoch: u64,
    batches: Vec<Batch>,
}

impl<'a> BatchSchedule<'a> {
    pub fn new(pairs: &'a [SentencePair], budget: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        let batches = batch_iter(pairs, budget, rng::derive(seed, stream::SHUFFLE, 0));
        Ok(BatchSchedule {
            pairs,
            budget,
            seed,
            epoch: 0,
            batches,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches.len()
    }

    /// Pairs of the batch used at 1-based `step`.
    pub fn batch(&mut self, step: u64) -> Vec<&'a SentencePair> {
        let per = self.batches.len() as u64;
        let (epoch, k) = ((step - 1) / per, ((step - 1) % per) as usize);
        if epoch != self.epoch {
            self.batches = batch_iter(
                self.pairs,
                self.budget,
                rng::derive(self.seed, stream::SHUFFLE, epoch),
            );
            self.epoch = epoch;
        }
        self.batches[k].indices.iter().map(|&i| &self.pairs[i]).collect()
    }
}

fn check_corpus(pairs: &[SentencePair]) -> Result<()> {
    if let Some(k) = pairs.iter().position(|p| p.x.is_empty() || p.target().is_empty()) {
        return Err(Error::Data(format!("pair {k} has an empty side")));
    }
    Ok(())
}

fn finite(step: u64, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("{name} = {v}"),
        })
    }
}

fn step_dropout(state_seed: u64, step: u64, rate: f64) -> Dropout {
    Dropout::train(rate, rng::derive(state_seed, stream::DROPOUT, step))
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Runs the optimizer loop one step at a time.
pub struct Trainer<'a, T: Real> {
    pub state: TrainState<T>,
    config: TrainConfig,
    schedule: BatchSchedule<'a>,
    grads: GradBuffer<T>,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(state: TrainState<T>, pairs: &'a [SentencePair], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        check_corpus(pairs)?;
        let schedule = BatchSchedule::new(pairs, config.batch_tokens, state.seed)?;
        let grads = GradBuffer::new(&state.models.store);
        Ok(Trainer {
            state,
            config: config.clone(),
            schedule,
            grads,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.max_steps
    }

    /// One optimizer update on the next batch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let start = Instant::now();
        let step = self.state.step + 1;
        let batch = self.schedule.batch(step);
        let switches = self.config.switches;
        let models = &self.state.models;
        let mut m = StepMetrics {
            step,
            l_clean: None,
            l_robust: None,
            l_lm_x: None,
            l_lm_y: None,
            sentences: batch.len(),
            src_tokens: batch.iter().map(|p| p.x.len()).sum(),
            trg_tokens: batch.iter().map(|p| p.z.len()).sum(),
            src_replaced: 0,
            trg_replaced: 0,
            lr: self.config.optim.learning_rate(step, models.config().model_dim),
            wall_ms: 0.0,
            advgen_ms: 0.0,
            clean_ms: 0.0,
            advgen_ratio: 0.0,
        };

        let t = Instant::now();
        let mut adv = Vec::new();
        if switches.robust {
            for (k, pair) in batch.iter().enumerate() {
                let seed = rng::derive(self.state.seed, stream::ADVGEN_SRC, (step << 20) | k as u64);
                let ap = adversarial_pair(models, pair, &self.config.adv, &switches, seed, None)?;
                m.src_replaced += ap.source_changed;
                m.trg_replaced += ap.target_changed;
                adv.push(ap);
            }
        }
        m.advgen_ms = ms(t);

        self.grads.zero();
        let mut drop = step_dropout(self.state.seed, step, models.config().dropout_rate);
        for term in Term::ALL {
            if !term.enabled(&switches) {
                continue;
            }
            let t = Instant::now();
            let mut g = Graph::new(&models.store, true);
            let loss = term_loss(&mut g, models, term, &batch, &adv, &mut drop)?;
            let value = finite(step, term.name(), g.value(loss).item().to_f64().unwrap_or(f64::NAN))?;
            self.grads.accumulate(&g.backward(loss)?);
            m.set(term, value);
            if term == Term::Clean {
                m.clean_ms = ms(t);
            }
        }
        self.state
            .adam
            .update(&mut self.state.models.store, &self.grads, &self.config.optim, m.lr);
        self.state.step = step;
        m.wall_ms = ms(start);
        if m.clean_ms > 0.0 {
            m.advgen_ratio = m.advgen_ms / m.clean_ms;
        }
        Ok(m)
    }

    pub fn into_state(self) -> TrainState<T> {
        self.state
    }
}

/// Trains until `config.max_steps` and returns the final state with one
/// metrics record per step taken.
pub fn train<T: Real>(
    state: TrainState<T>,
    pairs: &[SentencePair],
    config: &TrainConfig,
) -> Result<(TrainState<T>, Vec<StepMetrics>)> {
    let mut trainer = Trainer::new(state, pairs, config)?;
    let mut log = Vec::new();
    while !trainer.is_done() {
        log.push(trainer.step()?);
    }
    Ok((trainer.into_state(), log))
}

/// Plain maximum-likelihood training of the translation model with the
/// same batch order, dropout masks and optimizer as [`train`]. Returns the
/// per-step loss.
pub fn train_baseline<T: Real>(
    state: TrainState<T>,
    pairs: &[SentencePair],
    optim: &OptimConfig,
    batch_tokens: usize,
    max_steps: u64,
) -> Result<(TrainState<T>, Vec<f64>)> {
    check_corpus(pairs)?;
    let mut state = state;
    let mut schedule = BatchSchedule::new(pairs, batch_tokens, state.seed)?;
    let mut grads = GradBuffer::new(&state.models.store);
    let mut losses = Vec::new();
    while state.step < max_steps {
        let step = state.step + 1;
        let batch = schedule.batch(step);
        let triples: Vec<_> = batch.iter().map(|p| (&p.x[..], &p.z[..], &p.y[..])).collect();
        grads.zero();
        let loss = {
            let mt = &state.models.mt;
            let mut g = Graph::new(&state.models.store, true);
            let mut drop = step_dropout(state.seed, step, mt.config.dropout_rate);
            let l = mt.batch_loss(&mut g, &triples, &mut drop)?;
            grads.accumulate(&g.backward(l)?);
            finite(step, "l_clean", g.value(l).item().to_f64().unwrap_or(f64::NAN))?
        };
        let lr = optim.learning_rate(step, state.models.config().model_dim);
        state.adam.update(&mut state.models.store, &grads, optim, lr);
        state.step = step;
        losses.push(loss);
    }
    Ok((state, losses))
}

/// Pretrains both language models on the two sides of the corpus. Returns
/// the per-step losses of the source and target models.
pub fn pretrain_language_models<T: Real>(
    models: &mut ModelSet<T>,
    pairs: &[SentencePair],
    config: &PretrainConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let src: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.x.clone()).filter(|s| !s.is_empty()).collect();
    let trg: Vec<Vec<TokenId>> = pairs
        .iter()
        .map(|p| p.target().to_vec())
        .filter(|s| !s.is_empty())
        .collect();
    let a = models
        .lm_src
        .pretrain(&mut models.store, &src, config, rng::derive(seed, stream::LM_PRETRAIN, 0))?;
    let b = models
        .lm_trg
        .pretrain(&mut models.store, &trg, config, rng::derive(seed, stream::LM_PRETRAIN, 1))?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::TransformerConfig;

    fn tiny() -> (ModelSet<f64>, Vec<SentencePair>) {
        let cfg = TransformerConfig {
            num_layers: 1,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            src_vocab_size: 12,
            trg_vocab_size: 12,
            max_len: 12,
            ..Default::default()
        };
        let pairs = vec![
            SentencePair::new(vec![4, 5, 6, 7], &[8, 9, 10]),
            SentencePair::new(vec![9, 10], &[4, 5]),
            SentencePair::new(vec![11, 4, 8], &[6, 7, 11, 5]),
        ];
        (ModelSet::init(&cfg, 3).unwrap(), pairs)
    }

    #[test]
    fn ablation_rows_are_distinct() {
        let rows: Vec<_> = (1..=6).map(|r| LossSwitches::ablation_row(r).unwrap()).collect();
        for i in 0..6 {
            for j in 0..i {
                assert_ne!(rows[i], rows[j]);
            }
        }
        assert_eq!(rows[0], LossSwitches::CLEAN_ONLY);
        assert!(LossSwitches::ablation_row(7).is_none());
    }

    #[test]
    fn no_terms_is_a_config_error() {
        let (m, pairs) = tiny();
        let off = LossSwitches {
            clean: false,
            robust: false,
            lm: false,
            ..Default::default()
        };
        let mut g = Graph::new(&m.store, true);
        let batch: Vec<_> = pairs.iter().collect();
        let err = total_loss(&mut g, &m, &batch, &[], &off, &mut Dropout::eval()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let cfg = TrainConfig {
            switches: off,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn budgets_hold_and_bos_is_kept() {
        let (m, pairs) = tiny();
        let adv = AdvConfig {
            gamma_src: 0.5,
            gamma_trg: 0.5,
            candidates: 5,
            ..Default::default()
        };
        for (k, p) in pairs.iter().enumerate() {
            let a = adversarial_pair(&m, p, &adv, &LossSwitches::default(), k as u64, None).unwrap();
            assert!(a.source_changed <= (0.5 * p.x.len() as f64).round() as usize);
            assert!(a.target_changed <= (0.5 * p.z.len() as f64).round() as usize);
            assert_eq!(a.z[0], crate::BOS);
            assert_eq!(a.x.len(), p.x.len());
            assert_eq!(a.z.len(), p.z.len());
        }
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let (m, pairs) = tiny();
        let state = TrainState::new(m, 1);
        let cfg = TrainConfig {
            max_steps: 0,
            ..Default::default()
        };
        let (out, log) = train(state.clone(), &pairs, &cfg).unwrap();
        assert_eq!(out, state);
        assert!(log.is_empty());
    }

    #[test]
    fn schedule_covers_each_epoch() {
        let (_, pairs) = tiny();
        let mut s = BatchSchedule::new(&pairs, 8, 4).unwrap();
        let per = s.batches_per_epoch() as u64;
        for epoch in 0..3 {
            let mut seen: Vec<Vec<TokenId>> = (1..=per)
                .flat_map(|k| s.batch(epoch * per + k))
                .map(|p| p.x.clone())
                .collect();
            seen.sort();
            let mut all: Vec<_> = pairs.iter().map(|p| p.x.clone()).collect();
            all.sort();
            assert_eq!(seen, all);
        }
    }
}
