//! Acceptance suite. Every test prints one `criterion N ...: PASS|FAIL`
//! line with the measured value and the pinned tolerance, then asserts.

mod common;

use std::io::Write;
use std::time::Instant;

use advseq_core::advgen::{
    adv_gen, candidate_set, replacement_budget, select_adversarial_word, target_position_distribution,
    AdvConfig, AdvGenInputs, CandidateSet, PositionDistribution,
};
use advseq_core::data::{build_vocab, make_toy_task, SentencePair, ToyKind, Vocab};
use advseq_core::eval::{
    ablation_run, bleu, component_rows, gamma_grid, noisy_test_set, robustness_curve, NeighborIndex, NoiseSpec, RobustnessReport,
    ValidationSet,
};
use advseq_core::layers::Dropout;
use advseq_core::models::ModelSet;
use advseq_core::optim::OptimConfig;
use advseq_core::robust::{
    adversarial_pair, pretrain_language_models, robustness_loss, total_loss, train, train_baseline, LossSwitches,
    TrainConfig, TrainState,
};
use advseq_core::bilm::PretrainConfig;
use advseq_core::transformer::{AttentionMap, TransformerConfig};
use advseq_core::{Graph, Tensor, TokenId, BOS, EOS, PAD, UNK};
use common::{distinct_sentence, random_sentence, relative_error};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SPECIALS: [TokenId; 4] = [PAD, BOS, EOS, UNK];

// Written to the stdout handle directly so the line survives test output
// capture.
fn report(n: u32, name: &str, pass: bool, detail: String) {
    let line = format!("criterion {n} {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
}

/// Parallel toy corpus encoded with vocabularies built from its first
/// `train` pairs.
struct Toy {
    src: Vocab,
    trg: Vocab,
    train: Vec<SentencePair>,
    test: Vec<SentencePair>,
}

fn toy(kind: ToyKind, vocab: usize, train: usize, test: usize, lengths: (usize, usize), seed: u64) -> Toy {
    let task = make_toy_task(kind, vocab, train + test, lengths, seed).unwrap();
    let c = task.corpus;
    let src = build_vocab(&c.source[..train], 1).unwrap();
    let trg = build_vocab(&c.target[..train], 1).unwrap();
    let pairs = c.encode(&src, &trg);
    let (a, b) = pairs.split_at(train);
    Toy {
        src,
        trg,
        train: a.to_vec(),
        test: b.to_vec(),
    }
}

fn toy_model(t: &Toy, layers: usize, dim: usize) -> TransformerConfig {
    TransformerConfig {
        num_layers: layers,
        model_dim: dim,
        num_heads: 4,
        ff_dim: 2 * dim,
        src_vocab_size: t.src.len(),
        trg_vocab_size: t.trg.len(),
        max_len: 16,
        ..Default::default()
    }
}

fn eval_loss(m: &ModelSet<f64>, x: &[TokenId], z: &[TokenId], y: &[TokenId]) -> f64 {
    let mut g = Graph::new(&m.store, false);
    let (l, _) = m.mt.translation_loss(&mut g, x, z, y, &mut Dropout::eval()).unwrap();
    g.value(l).item()
}

#[test]
fn criterion_01_source_embedding_gradients() {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let vocab = 40;
    let cfg = common::config(2, 32, vocab, vocab);
    let m = ModelSet::<f64>::init(&cfg, 21).unwrap();
    let table = m.mt.src_embedding;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut positions = 0;
    let pairs = 20;
    for _ in 0..pairs {
        // distinct source tokens, so a table row is one position
        let x = distinct_sentence(&mut rng, vocab, 2, 6);
        let y = SentencePair::new(x.clone(), &random_sentence(&mut rng, vocab, 1, 6));
        let grads = m.mt.input_embedding_grads(&m.store, &x, &y.z, &y.y).unwrap();
        for (i, &tok) in x.iter().enumerate() {
            let mut numeric = vec![0.0; 32];
            for (c, slot) in numeric.iter_mut().enumerate() {
                let mut plus = m.clone();
                plus.store.get_mut(table).row_mut(tok as usize)[c] += H;
                let mut minus = m.clone();
                minus.store.get_mut(table).row_mut(tok as usize)[c] -= H;
                *slot = (eval_loss(&plus, &x, &y.z, &y.y) - eval_loss(&minus, &x, &y.z, &y.y)) / (2.0 * H);
            }
            worst = worst.max(relative_error(grads.source.row(i), &numeric));
            positions += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= TOL && secs <= 120.0;
    report(
        1,
        "gradient fidelity",
        pass,
        format!("{pairs} pairs, {positions} positions, max rel err {worst:.2e} <= {TOL:e}, {secs:.1}s <= 120s"),
    );
    assert!(pass);
}

/// Exhaustive `argmax cos(e(w) − e(s), g)`, lowest id on ties.
fn oracle(cands: &[TokenId], table: &Tensor<f64>, orig: &[f64], g: &[f64]) -> Option<TokenId> {
    let gn: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if gn == 0.0 {
        return None;
    }
    let mut best: Option<(f64, TokenId)> = None;
    let mut sorted = cands.to_vec();
    sorted.sort_unstable();
    for &w in &sorted {
        let d: Vec<f64> = table.row(w as usize).iter().zip(orig).map(|(a, b)| a - b).collect();
        let dn: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dn == 0.0 {
            continue;
        }
        let cos = d.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (dn * gn);
        if best.map_or(true, |(b, _)| cos > b) {
            best = Some((cos, w));
        }
    }
    best.map(|(_, w)| w)
}

#[test]
fn criterion_02_selection_matches_exhaustive_oracle() {
    let trials = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut matches = 0;
    for t in 0..trials {
        let vocab = rng.gen_range(12..40);
        let table = common::random_tensor(&mut rng, &[vocab, 8]);
        let orig = rng.gen_range(0..vocab) as TokenId;
        let grad: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut pool: Vec<TokenId> = (0..vocab as TokenId).filter(|&w| w != orig).collect();
        pool.shuffle(&mut rng);
        pool.truncate(rng.gen_range(0..=10));
        // a few trials duplicate the original row to exercise the zero-displacement rule
        let mut table = table;
        if t % 50 == 0 && !pool.is_empty() {
            let copy = table.row(orig as usize).to_vec();
            table.row_mut(pool[0] as usize).copy_from_slice(&copy);
        }
        let set = CandidateSet {
            position: 0,
            candidates: pool.clone(),
        };
        let got = select_adversarial_word(&set, table.row(orig as usize), &grad, &table);
        if got == oracle(&pool, &table, table.row(orig as usize), &grad) {
            matches += 1;
        }
    }
    let pass = matches == trials;
    report(2, "selection oracle", pass, format!("{matches}/{trials} exact matches, required 100%"));
    assert!(pass);
}

#[test]
fn criterion_03_adv_gen_contract() {
    let cases = 500;
    let gammas = [0.0, 0.15, 0.25, 0.5, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for k in 0..cases {
        let gamma = gammas[k % gammas.len()];
        let vocab = rng.gen_range(8..30);
        let dim = rng.gen_range(2..8);
        let mut s = random_sentence(&mut rng, vocab, 1, 15);
        // occasional special tokens, which must never be replaced
        if k % 7 == 0 {
            let i = rng.gen_range(0..s.len());
            s[i] = SPECIALS[k % 4];
        }
        let len = s.len();
        let mut q = common::random_tensor(&mut rng, &[len, vocab]).map(f64::abs);
        for i in 0..len {
            let total: f64 = q.row(i).iter().sum();
            q.row_mut(i).iter_mut().for_each(|v| *v /= total);
        }
        let grads = common::random_tensor(&mut rng, &[len, dim]);
        let table = common::random_tensor(&mut rng, &[vocab, dim]);
        let n = rng.gen_range(1..=10);
        let positions = PositionDistribution::uniform(len);
        let inputs = AdvGenInputs {
            sentence: &s,
            likelihood: &q,
            positions: &positions,
            grads: &grads,
            embeddings: &table,
            gamma,
            candidates: n,
            excluded: &SPECIALS,
        };
        let seed = rng.gen();
        let out = adv_gen(&inputs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let again = adv_gen(&inputs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let bound = (gamma * len as f64).round() as usize;
        let mut ok = out.sentence.len() == len
            && out.changed.len() <= bound
            && replacement_budget(gamma, len) == bound
            && out == again
            && (gamma > 0.0 || out.sentence == s);
        for i in 0..len {
            if out.sentence[i] != s[i] {
                let cands = candidate_set(q.row(i), i, s[i], n, &SPECIALS);
                ok &= cands.contains(out.sentence[i]) && !SPECIALS.contains(&s[i]);
            }
        }
        if !ok {
            failures.push(k);
        }
    }
    let pass = failures.is_empty();
    report(
        3,
        "AdvGen contract",
        pass,
        format!("{}/{cases} cases pass, required 100%; failing {:?}", cases - failures.len(), failures),
    );
    assert!(pass);
}

#[test]
fn criterion_04_target_position_distribution() {
    const TOL: f64 = 1e-6;
    // (rows of M as [source][target], changed source positions, expected P)
    let cases: Vec<(Vec<Vec<f64>>, Vec<usize>, Vec<f64>)> = vec![
        (vec![vec![0.9, 0.1], vec![0.1, 0.9]], vec![0], vec![0.9, 0.1]),
        (vec![vec![0.9, 0.1], vec![0.1, 0.9]], vec![1], vec![0.1, 0.9]),
        (vec![vec![0.9, 0.1], vec![0.1, 0.9]], vec![0, 1], vec![0.5, 0.5]),
        (
            vec![vec![0.5, 0.2, 0.1], vec![0.3, 0.3, 0.3], vec![0.2, 0.5, 0.6]],
            vec![0],
            vec![0.625, 0.25, 0.125],
        ),
        (
            vec![vec![0.5, 0.2, 0.1], vec![0.3, 0.3, 0.3], vec![0.2, 0.5, 0.6]],
            vec![2],
            vec![2.0 / 13.0, 5.0 / 13.0, 6.0 / 13.0],
        ),
        (
            vec![vec![0.5, 0.2, 0.1], vec![0.3, 0.3, 0.3], vec![0.2, 0.5, 0.6]],
            vec![0, 2],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        ),
        (
            vec![vec![0.5, 0.2, 0.1], vec![0.3, 0.3, 0.3], vec![0.2, 0.5, 0.6]],
            vec![1, 2],
            vec![5.0 / 22.0, 8.0 / 22.0, 9.0 / 22.0],
        ),
        (vec![vec![1.0, 0.0, 0.25], vec![0.0, 1.0, 0.75]], vec![1], vec![0.0, 4.0 / 7.0, 3.0 / 7.0]),
        (vec![vec![1.0, 0.0, 0.25], vec![0.0, 1.0, 0.75]], vec![0], vec![0.8, 0.0, 0.2]),
        (
            vec![vec![0.6, 0.1], vec![0.3, 0.1], vec![0.1, 0.8]],
            vec![0, 1],
            vec![9.0 / 11.0, 2.0 / 11.0],
        ),
        (vec![vec![1.0, 1.0, 1.0, 1.0]], vec![0], vec![0.25; 4]),
        (vec![vec![0.25], vec![0.25], vec![0.25], vec![0.25]], vec![1], vec![1.0]),
    ];
    let mut worst: f64 = 0.0;
    let mut fallback_ok = true;
    for (rows, changed, expected) in &cases {
        let (src, trg) = (rows.len(), rows[0].len());
        let attn = AttentionMap::new(Tensor::from_rows(rows).unwrap()).unwrap();
        let x: Vec<TokenId> = (0..src as TokenId).map(|t| t + 4).collect();
        let mut xp = x.clone();
        for &i in changed {
            xp[i] += 50;
        }
        let got = target_position_distribution(&attn, &x, &xp).unwrap();
        for (a, b) in got.probs().iter().zip(expected) {
            worst = worst.max((a - b).abs());
        }
        let same = target_position_distribution(&attn, &x, &x).unwrap();
        fallback_ok &= same == PositionDistribution::uniform(trg);
    }
    // attention with no mass on the changed word does not silently go uniform
    let attn = AttentionMap::new(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap()).unwrap();
    let degenerate = target_position_distribution(&attn, &[4, 5], &[4, 9]).unwrap();
    let pass = worst <= TOL && fallback_ok;
    report(
        4,
        "target position distribution",
        pass,
        format!(
            "{} hand cases, max abs err {worst:.1e} <= {TOL:e}, uniform fallback iff x'==x: {fallback_ok}",
            cases.len()
        ),
    );
    assert!(pass);
    assert_eq!(degenerate, PositionDistribution::uniform(2));
}

#[test]
fn criterion_05_degeneracy_and_recomposition() {
    const TOL: f64 = 1e-6;
    let vocab = 30;
    let m = ModelSet::<f64>::init(&common::config(2, 16, vocab, vocab), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pairs: Vec<SentencePair> = (0..8)
        .map(|_| SentencePair::new(random_sentence(&mut rng, vocab, 2, 8), &random_sentence(&mut rng, vocab, 2, 8)))
        .collect();

    let zero = AdvConfig {
        gamma_src: 0.0,
        gamma_trg: 0.0,
        ..Default::default()
    };
    let mut bit_exact = true;
    for (k, p) in pairs.iter().enumerate() {
        for dropout_seed in [None, Some(k as u64)] {
            let drop = || match dropout_seed {
                None => Dropout::eval(),
                Some(s) => Dropout::train(0.1, s),
            };
            let mut g = Graph::new(&m.store, true);
            let (clean, _) = m.mt.translation_loss(&mut g, &p.x, &p.z, &p.y, &mut drop()).unwrap();
            let (robust, _) = robustness_loss(&mut g, &m, p, &zero, k as u64, &mut drop()).unwrap();
            bit_exact &= g.value(clean).item().to_bits() == g.value(robust).item().to_bits();
        }
    }

    let adv = AdvConfig::default();
    let batch: Vec<&SentencePair> = pairs.iter().collect();
    let advs: Vec<_> = batch
        .iter()
        .enumerate()
        .map(|(k, p)| adversarial_pair(&m, p, &adv, &LossSwitches::default(), k as u64, None).unwrap())
        .collect();
    let mut g = Graph::new(&m.store, true);
    let (total, _) = total_loss(&mut g, &m, &batch, &advs, &LossSwitches::default(), &mut Dropout::eval()).unwrap();
    let total = g.value(total).item();

    // independent recomposition from per-sentence losses
    let n = pairs.len() as f64;
    let clean: f64 = pairs.iter().map(|p| eval_loss(&m, &p.x, &p.z, &p.y)).sum::<f64>() / n;
    let robust: f64 = pairs.iter().zip(&advs).map(|(p, a)| eval_loss(&m, &a.x, &a.z, &p.y)).sum::<f64>() / n;
    let lm = |side: bool| -> f64 {
        pairs
            .iter()
            .map(|p| {
                let (lm, s) = if side { (&m.lm_src, &p.x[..]) } else { (&m.lm_trg, p.target()) };
                -lm.sentence_score(&m.store, s).unwrap()
            })
            .sum::<f64>()
            / n
    };
    let recomposed = clean + robust + lm(true) + lm(false);
    let diff = (total - recomposed).abs();
    let changed: usize = advs.iter().map(|a| a.source_changed + a.target_changed).sum();
    let pass = bit_exact && diff <= TOL && changed > 0;
    report(
        5,
        "degeneracy and recomposition",
        pass,
        format!(
            "zero-ratio robust loss bit-exact: {bit_exact}; |objective - recomposed| = {diff:.1e} <= {TOL:e}; {changed} words replaced"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_language_model_does_not_see_the_masked_word() {
    let vocab = 30;
    let m = ModelSet::<f32>::init(&common::config(2, 32, vocab, vocab), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let triples = 500;
    let mut identical = 0;
    for k in 0..triples {
        let lm = if k % 2 == 0 { &m.lm_src } else { &m.lm_trg };
        let s = random_sentence(&mut rng, vocab, 1, 12);
        let i = rng.gen_range(0..s.len());
        let mut t = s.clone();
        t[i] = rng.gen_range(0..vocab as TokenId);
        let a = lm.position_distribution(&m.store, &s, i).unwrap();
        let b = lm.position_distribution(&m.store, &t, i).unwrap();
        if a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()) {
            identical += 1;
        }
    }
    let pass = identical == triples;
    report(6, "LM leak test", pass, format!("{identical}/{triples} bit-identical, required 100%"));
    assert!(pass);
}

#[test]
fn criterion_07_toy_robustness() {
    let started = Instant::now();
    let t = toy(ToyKind::CipherLocalSwap, 200, 4800, 200, (3, 6), 11);
    let cfg = toy_model(&t, 2, 64);
    let sources: Vec<Vec<TokenId>> = t.test.iter().map(|p| p.x.clone()).collect();
    let refs: Vec<String> = t.test.iter().map(|p| t.trg.decode(p.target())).collect();
    let optim = OptimConfig {
        warmup_steps: 400,
        lr_scale: 0.5,
        ..Default::default()
    };
    let clean_cfg = TrainConfig {
        batch_tokens: 500,
        max_steps: 1000,
        switches: LossSwitches::CLEAN_ONLY,
        optim: optim.clone(),
        ..Default::default()
    };
    // source-side perturbation only, no LM terms
    let robust_cfg = TrainConfig {
        switches: LossSwitches::ablation_row(5).unwrap(),
        adv: AdvConfig {
            gamma_src: 0.15,
            gamma_trg: 0.0,
            ..Default::default()
        },
        ..clean_cfg.clone()
    };
    let pretrain = PretrainConfig {
        steps: 100,
        batch_sentences: 32,
        optim: OptimConfig {
            warmup_steps: 100,
            lr_scale: 2.0,
            ..Default::default()
        },
    };

    let (mut clean_ok, mut wins, mut stable) = (true, 0, true);
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let mut init = ModelSet::<f32>::init(&cfg, seed).unwrap();
        pretrain_language_models(&mut init, &t.train, &pretrain, seed).unwrap();
        let index = NeighborIndex::build(init.store.get(init.mt.src_embedding), 10, &SPECIALS).unwrap();
        let mut noisy = vec![(0.0, sources.clone())];
        for fraction in [0.1, 0.2] {
            let spec = NoiseSpec {
                fraction,
                candidates: 10,
                pool: 10,
                seed,
            };
            noisy.push((fraction, noisy_test_set(&sources, &spec, &index, &init.lm_src, &init.store).unwrap()));
        }
        let curve = |tc: &TrainConfig| {
            let (st, _) = train(TrainState::new(init.clone(), seed), &t.train, tc).unwrap();
            robustness_curve(&st.models.mt, &st.models.store, &t.trg, &sources, &noisy, &refs).unwrap()
        };
        let c = curve(&clean_cfg);
        let r = curve(&robust_cfg);
        let at = |rep: &RobustnessReport, f: f64| rep.row(f).unwrap().bleu;
        let d = [0.0, 0.1, 0.2].map(|f| at(&r, f) - at(&c, f));
        clean_ok &= d[0] >= -0.5;
        if d[1] >= 1.0 && d[2] >= 1.0 {
            wins += 1;
        }
        stable &= r.row(0.0).unwrap().stability == 100.0 && c.row(0.0).unwrap().stability == 100.0;
        lines.push(format!(
            "seed {seed}: clean {:.2}/{:.2}/{:.2} robust {:.2}/{:.2}/{:.2}",
            at(&c, 0.0),
            at(&c, 0.1),
            at(&c, 0.2),
            at(&r, 0.0),
            at(&r, 0.1),
            at(&r, 0.2)
        ));
    }
    for l in &lines {
        std::io::stdout().lock().write_all(format!("  {l}\n").as_bytes()).unwrap();
    }
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let pass = clean_ok && wins >= 4 && stable && minutes <= 30.0;
    report(
        7,
        "toy robustness",
        pass,
        format!(
            "clean BLEU within 0.5 on all seeds: {clean_ok}; >=1.0 gain at noise 0.1 and 0.2 in {wins}/5 seeds (need 4); stability 100 at zero noise: {stable}; {minutes:.1} min"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_ablations_run_end_to_end() {
    let t = toy(ToyKind::CipherLocalSwap, 200, 300, 20, (3, 8), 8);
    let init = ModelSet::<f32>::init(&toy_model(&t, 1, 16), 8).unwrap();
    let sources: Vec<Vec<TokenId>> = t.test.iter().map(|p| p.x.clone()).collect();
    let refs: Vec<String> = t.test.iter().map(|p| t.trg.decode(p.target())).collect();
    let valid = ValidationSet {
        sources: &sources,
        references: &refs,
        vocab: &t.trg,
    };
    let base = TrainConfig {
        batch_tokens: 200,
        max_steps: 3,
        ..Default::default()
    };
    let rows = component_rows(&base);
    let grid = gamma_grid(&[0.0, 0.25, 0.5, 0.75]);
    let a = ablation_run(&init, 8, &t.train, &valid, &base, &rows).unwrap();
    let b = ablation_run(&init, 8, &t.train, &valid, &base, &grid).unwrap();
    let finite = a.iter().chain(&b).all(|r| r.final_loss.is_finite() && r.bleu.is_finite());

    let long = TrainConfig {
        max_steps: 12,
        switches: LossSwitches::ablation_row(1).unwrap(),
        ..base.clone()
    };
    let (s1, log) = train(TrainState::new(init.clone(), 8), &t.train, &long).unwrap();
    let (s2, losses) = train_baseline(TrainState::new(init, 8), &t.train, &long.optim, long.batch_tokens, 12).unwrap();
    let trace_equal = log.iter().map(|m| m.l_clean.unwrap().to_bits()).eq(losses.iter().map(|l| l.to_bits()));
    let pass = a.len() == 6 && b.len() == 16 && finite && trace_equal && s1 == s2;
    report(
        8,
        "ablation reachability",
        pass,
        format!(
            "{} component rows and {} grid cells ran; row 1 trace bit-exact vs baseline: {}",
            a.len(),
            b.len(),
            trace_equal && s1 == s2
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_bleu() {
    let corpus = ["a b c d e", "f g h", "i j k l m n"];
    let identity = bleu(&corpus, &corpus, 4).unwrap();
    let hand = bleu(&["a b c d e f"], &["a b c d e g"], 4).unwrap();
    let expected = 100.0 * (5.0f64 / 6.0 * 4.0 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0).powf(0.25);
    let hyps = ["the cat sat on the mat", "a b c d", "x y z w v", "one two three four five"];
    let refs = ["the cat sat on a mat", "a b d c", "x y z w", "one two three four six"];
    let base = bleu(&hyps, &refs, 4).unwrap();
    let mut permutation_ok = true;
    for perm in [[1, 0, 3, 2], [3, 2, 1, 0], [2, 3, 0, 1]] {
        let h: Vec<&str> = perm.iter().map(|&i| hyps[i]).collect();
        let r: Vec<&str> = perm.iter().map(|&i| refs[i]).collect();
        permutation_ok &= bleu(&h, &r, 4).unwrap().to_bits() == base.to_bits();
    }
    let clipped = bleu(&["a a a a"], &["a b"], 4).unwrap();
    let pass = format!("{identity:.2}") == "100.00"
        && format!("{hand:.2}") == format!("{expected:.2}")
        && permutation_ok
        && clipped == 0.0;
    report(
        9,
        "BLEU",
        pass,
        format!(
            "identity {identity:.2}; hand example {hand:.2} vs {expected:.2}; permutation invariant: {permutation_ok}; clipped zero-precision case {clipped:.2}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_adversarial_overhead() {
    let t = toy(ToyKind::CipherLocalSwap, 200, 5000, 0, (3, 10), 10);
    let cfg = toy_model(&t, 2, 64);
    let init = ModelSet::<f32>::init(&cfg, 10).unwrap();
    let tc = TrainConfig {
        batch_tokens: 500,
        max_steps: 20,
        ..Default::default()
    };
    let (_, log) = train(TrainState::new(init, 10), &t.train, &tc).unwrap();
    let reported = log.iter().all(|m| m.advgen_ms > 0.0 && m.clean_ms > 0.0);
    let mean = log.iter().map(|m| m.advgen_ratio).sum::<f64>() / log.len() as f64;
    let max = log.iter().map(|m| m.advgen_ratio).fold(0.0, f64::max);
    let pass = reported && mean < 3.0;
    report(
        10,
        "AdvGen overhead",
        pass,
        format!("mean AdvGen/clean-step time ratio {mean:.2} < 3 over {} steps (max {max:.2})", log.len()),
    );
    assert!(pass);
}
