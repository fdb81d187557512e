//! BLEU, synthetic word-substitution noise, robustness curves and
//! ablation runs.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advgen::cosine;
use crate::bilm::BiLm;
use crate::data::{SentencePair, Vocab};
use crate::error::{Error, Result};
use crate::models::ModelSet;
use crate::params::ParamStore;
use crate::rng::{self, stream};
use crate::robust::{train, LossSwitches, TrainConfig, TrainState};
use crate::tensor::{Real, Tensor};
use crate::transformer::Seq2Seq;
use crate::TokenId;

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics of corpus BLEU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    fn new(max_n: usize) -> Self {
        BleuStats {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    fn add(&mut self, hyp: &[String], reference: &[String]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=self.matches.len() {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
            self.matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }

    fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Unsmoothed score in `[0, 100]`; any zero precision gives 0.
    pub fn score(&self) -> f64 {
        let n = self.matches.len() as f64;
        let mut log_sum = 0.0;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            if m == 0 || t == 0 {
                return 0.0;
            }
            log_sum += (m as f64 / t as f64).ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / n).exp()
    }

    /// Add-one smoothing on the precisions of order two and up.
    pub fn smoothed_score(&self) -> f64 {
        let n = self.matches.len() as f64;
        let mut log_sum = 0.0;
        for (k, (&m, &t)) in self.matches.iter().zip(&self.totals).enumerate() {
            let (m, t) = if k == 0 {
                (m as f64, t as f64)
            } else {
                (m as f64 + 1.0, t as f64 + 1.0)
            };
            if m == 0.0 || t == 0.0 {
                return 0.0;
            }
            log_sum += (m / t).ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / n).exp()
    }
}

pub fn bleu_stats<S: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[S],
    references: &[R],
    max_n: usize,
) -> Result<BleuStats> {
    if hypotheses.is_empty() {
        return Err(Error::Contract("BLEU of an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut stats = BleuStats::new(max_n.max(1));
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(&tokens(h.as_ref()), &tokens(r.as_ref()));
    }
    Ok(stats)
}

/// Case-insensitive corpus BLEU over whitespace tokens, in `[0, 100]`.
/// A corpus identical to its references scores exactly 100 even when its
/// sentences are too short to contain `max_n`-grams.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[S], references: &[R], max_n: usize) -> Result<f64> {
    let stats = bleu_stats(hypotheses, references, max_n)?;
    let identical = hypotheses
        .iter()
        .zip(references)
        .all(|(h, r)| tokens(h.as_ref()) == tokens(r.as_ref()));
    if identical && stats.hyp_len > 0 {
        return Ok(100.0);
    }
    Ok(stats.score())
}

/// Smoothed BLEU of a single sentence, for inspection output.
pub fn sentence_bleu(hypothesis: &str, reference: &str) -> f64 {
    let mut stats = BleuStats::new(4);
    stats.add(&tokens(hypothesis), &tokens(reference));
    stats.smoothed_score()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub fraction: f64,
    /// Noisy candidates generated per sentence; the LM keeps the best.
    pub candidates: usize,
    /// Nearest neighbors a replacement is drawn from.
    pub pool: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            fraction: 0.1,
            candidates: 100,
            pool: 10,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::Config(format!("noise fraction {} outside [0, 1]", self.fraction)));
        }
        if self.candidates == 0 || self.pool == 0 {
            return Err(Error::Config("noise candidates and pool must be at least 1".into()));
        }
        Ok(())
    }

    pub fn replacements(&self, len: usize) -> usize {
        ((self.fraction * len as f64).round() as usize).min(len)
    }
}

/// For every token, its `pool` most cosine-similar tokens, excluding
/// itself and `excluded`. Excluded tokens have no neighbors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborIndex {
    neighbors: Vec<Vec<TokenId>>,
}

impl NeighborIndex {
    pub fn build<T: Real>(embeddings: &Tensor<T>, pool: usize, excluded: &[TokenId]) -> Result<Self> {
        let (vocab, _) = embeddings.dims2()?;
        let mut neighbors = Vec::with_capacity(vocab);
        for a in 0..vocab {
            if excluded.contains(&(a as TokenId)) {
                neighbors.push(Vec::new());
                continue;
            }
            let mut sims: Vec<(f64, TokenId)> = (0..vocab)
                .filter(|&b| b != a && !excluded.contains(&(b as TokenId)))
                .map(|b| {
                    let s = cosine(embeddings.row(a), embeddings.row(b)).unwrap_or(-1.0);
                    (s, b as TokenId)
                })
                .collect();
            sims.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            neighbors.push(sims.into_iter().take(pool).map(|(_, b)| b).collect());
        }
        Ok(NeighborIndex { neighbors })
    }

    pub fn neighbors(&self, id: TokenId) -> &[TokenId] {
        self.neighbors.get(id as usize).map_or(&[], Vec::as_slice)
    }
}

/// A noisy sentence and the candidates it was chosen from.
#[derive(Debug, Clone, PartialEq)]
pub struct Noisy {
    pub sentence: Vec<TokenId>,
    pub candidates: Vec<Vec<TokenId>>,
    pub scores: Vec<f64>,
    pub chosen: usize,
}

/// Generates `spec.candidates` noisy copies of `s`, each replacing
/// `round(fraction·|s|)` distinct uniformly chosen positions with a word
/// drawn uniformly from that position's neighbor pool, and keeps the copy
/// the language model scores highest (first on ties).
pub fn make_noisy<T: Real, R: Rng>(
    s: &[TokenId],
    spec: &NoiseSpec,
    index: &NeighborIndex,
    lm: &BiLm,
    store: &ParamStore<T>,
    rng: &mut R,
) -> Result<Noisy> {
    let k = spec.replacements(s.len());
    if k == 0 {
        return Ok(Noisy {
            sentence: s.to_vec(),
            candidates: vec![s.to_vec(); spec.candidates],
            scores: Vec::new(),
            chosen: 0,
        });
    }
    let mut candidates = Vec::with_capacity(spec.candidates);
    for _ in 0..spec.candidates {
        let mut c = s.to_vec();
        for i in sample(rng, s.len(), k) {
            let pool = index.neighbors(s[i]);
            if !pool.is_empty() {
                c[i] = pool[rng.gen_range(0..pool.len())];
            }
        }
        candidates.push(c);
    }
    let scores = candidates
        .iter()
        .map(|c| lm.sentence_score(store, c))
        .collect::<Result<Vec<f64>>>()?;
    let mut chosen = 0;
    for (i, &sc) in scores.iter().enumerate() {
        if sc > scores[chosen] {
            chosen = i;
        }
    }
    Ok(Noisy {
        sentence: candidates[chosen].clone(),
        candidates,
        scores,
        chosen,
    })
}

/// Noisy copies of a whole test set; sentence `i` uses its own RNG stream,
/// so the result does not depend on how the set is split.
pub fn noisy_test_set<T: Real>(
    sources: &[Vec<TokenId>],
    spec: &NoiseSpec,
    index: &NeighborIndex,
    lm: &BiLm,
    store: &ParamStore<T>,
) -> Result<Vec<Vec<TokenId>>> {
    spec.validate()?;
    sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng::rng_for(spec.seed, stream::NOISE, i as u64);
            make_noisy(s, spec, index, lm, store, &mut rng).map(|n| n.sentence)
        })
        .collect()
}

/// Greedy translations rendered as target text.
pub fn translate_all<T: Real>(
    mt: &Seq2Seq,
    store: &ParamStore<T>,
    vocab: &Vocab,
    sources: &[Vec<TokenId>],
) -> Result<Vec<String>> {
    sources
        .iter()
        .map(|x| {
            let out = mt.greedy_decode(store, x, 2 * x.len() + 2)?;
            Ok(vocab.decode(&out))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub fraction: f64,
    /// Against the references.
    pub bleu: f64,
    /// Against the model's own outputs on clean input.
    pub stability: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn row(&self, fraction: f64) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.fraction == fraction)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("fraction    bleu  stability\n");
        for r in &self.rows {
            let _ = writeln!(s, "{:>8.2} {:>7.2} {:>10.2}", r.fraction, r.bleu, r.stability);
        }
        s
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
}

/// Decodes the clean sources and every noisy set, in the order given.
/// `noisy[k]` holds the inputs for fraction `k`; a fraction of 0 should
/// hold the clean sources.
pub fn robustness_curve<T: Real>(
    mt: &Seq2Seq,
    store: &ParamStore<T>,
    trg_vocab: &Vocab,
    clean: &[Vec<TokenId>],
    noisy: &[(f64, Vec<Vec<TokenId>>)],
    references: &[String],
) -> Result<RobustnessReport> {
    let clean_out = translate_all(mt, store, trg_vocab, clean)?;
    let mut rows = Vec::with_capacity(noisy.len());
    for (fraction, sources) in noisy {
        let out = if sources.as_slice() == clean {
            clean_out.clone()
        } else {
            translate_all(mt, store, trg_vocab, sources)?
        };
        rows.push(RobustnessRow {
            fraction: *fraction,
            bleu: bleu(&out, references, 4)?,
            stability: bleu(&out, &clean_out, 4)?,
        });
    }
    Ok(RobustnessReport { rows })
}

/// One configuration of an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub label: String,
    pub switches: LossSwitches,
    pub gamma_src: f64,
    pub gamma_trg: f64,
}

/// The six loss-component rows at the configuration's ratios.
pub fn component_rows(base: &TrainConfig) -> Vec<AblationSpec> {
    (1..=6)
        .map(|r| AblationSpec {
            label: format!("row{r}"),
            switches: LossSwitches::ablation_row(r).expect("rows 1..=6 exist"),
            gamma_src: base.adv.gamma_src,
            gamma_trg: base.adv.gamma_trg,
        })
        .collect()
}

/// Every `(γ_src, γ_trg)` pair with the full objective.
pub fn gamma_grid(values: &[f64]) -> Vec<AblationSpec> {
    let mut out = Vec::new();
    for &s in values {
        for &t in values {
            out.push(AblationSpec {
                label: format!("src{s:.2}_trg{t:.2}"),
                switches: LossSwitches::default(),
                gamma_src: s,
                gamma_trg: t,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub clean: bool,
    pub perturb_source: bool,
    pub perturb_target: bool,
    pub lm: bool,
    pub gamma_src: f64,
    pub gamma_trg: f64,
    pub bleu: f64,
    pub final_loss: f64,
}

/// Validation inputs and references for [`ablation_run`].
pub struct ValidationSet<'a> {
    pub sources: &'a [Vec<TokenId>],
    pub references: &'a [String],
    pub vocab: &'a Vocab,
}

/// Trains every configuration from the same initial models and seed and
/// reports validation BLEU.
pub fn ablation_run<T: Real>(
    initial: &ModelSet<T>,
    seed: u64,
    pairs: &[SentencePair],
    valid: &ValidationSet<'_>,
    base: &TrainConfig,
    rows: &[AblationSpec],
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let mut cfg = base.clone();
        cfg.switches = row.switches;
        cfg.adv.gamma_src = row.gamma_src;
        cfg.adv.gamma_trg = row.gamma_trg;
        let (state, log) = train(TrainState::new(initial.clone(), seed), pairs, &cfg)?;
        let hyps = translate_all(&state.models.mt, &state.models.store, valid.vocab, valid.sources)?;
        out.push(AblationResult {
            label: row.label.clone(),
            clean: row.switches.clean,
            perturb_source: row.switches.perturb_source,
            perturb_target: row.switches.perturb_target,
            lm: row.switches.lm,
            gamma_src: row.gamma_src,
            gamma_trg: row.gamma_trg,
            bleu: bleu(&hyps, valid.references, 4)?,
            final_loss: log.last().and_then(|m| m.l_clean).unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}

pub fn write_ablation_csv(rows: &[AblationResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn ablation_table(rows: &[AblationResult]) -> String {
    let mut s = String::from("label              clean x'!=x z'!=z lm  g_src g_trg   bleu\n");
    let mark = |b: bool| if b { "y" } else { "-" };
    for r in rows {
        let _ = writeln!(
            s,
            "{:<18} {:>5} {:>5} {:>5} {:>3} {:>5.2} {:>5.2} {:>6.2}",
            r.label,
            mark(r.clean),
            mark(r.perturb_source),
            mark(r.perturb_target),
            mark(r.lm),
            r.gamma_src,
            r.gamma_trg,
            r.bleu
        );
    }
    s
}
