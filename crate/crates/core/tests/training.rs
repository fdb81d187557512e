mod common;

use advseq_core::advgen::AdvConfig;
use advseq_core::checkpoint::{load_checkpoint, save_checkpoint};
use advseq_core::data::SentencePair;
use advseq_core::layers::Dropout;
use advseq_core::models::ModelSet;
use advseq_core::optim::OptimConfig;
use advseq_core::robust::{
    adversarial_pair, robustness_loss, term_loss, total_loss, train, train_baseline, AdvPair, LossSwitches, Term,
    TrainConfig, TrainState, Trainer,
};
use advseq_core::{GradBuffer, Graph};
use common::{models, random_pairs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize) -> Vec<SentencePair> {
    random_pairs(&mut ChaCha8Rng::seed_from_u64(99), n, 20)
}

fn config(switches: LossSwitches, steps: u64) -> TrainConfig {
    TrainConfig {
        batch_tokens: 60,
        max_steps: steps,
        switches,
        optim: OptimConfig {
            warmup_steps: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn adv_all(m: &ModelSet<f64>, batch: &[&SentencePair], adv: &AdvConfig) -> Vec<AdvPair> {
    batch
        .iter()
        .enumerate()
        .map(|(k, p)| adversarial_pair(m, p, adv, &LossSwitches::default(), k as u64, None).unwrap())
        .collect()
}

#[test]
fn recording_adversarial_passes_on_the_tape_leaves_gradients_unchanged() {
    let m = models::<f64>(1, 16, 20, 1);
    let pairs = corpus(6);
    let adv = AdvConfig {
        gamma_src: 0.5,
        gamma_trg: 0.5,
        ..Default::default()
    };
    for (k, pair) in pairs.iter().enumerate() {
        let private = adversarial_pair(&m, pair, &adv, &LossSwitches::default(), k as u64, None).unwrap();
        let mut g0 = Graph::new(&m.store, true);
        let (l0, _) = m.mt.translation_loss(&mut g0, &private.x, &private.z, &pair.y, &mut Dropout::eval()).unwrap();
        let grads0 = g0.backward(l0).unwrap();

        let mut g1 = Graph::new(&m.store, true);
        let recorded = adversarial_pair(&m, pair, &adv, &LossSwitches::default(), k as u64, Some(&mut g1)).unwrap();
        assert_eq!(recorded, private);
        let before = g1.len();
        let (l1, _) = m.mt.translation_loss(&mut g1, &recorded.x, &recorded.z, &pair.y, &mut Dropout::eval()).unwrap();
        assert!(before > 0);
        let grads1 = g1.backward(l1).unwrap();
        let a = grads0.params();
        let b = grads1.params();
        assert_eq!(a.len(), b.len());
        for ((ia, ta), (ib, tb)) in a.iter().zip(&b) {
            assert_eq!(ia, ib);
            assert_eq!(ta.data(), tb.data(), "{}", m.store.name(*ia));
        }
    }
}

#[test]
fn zero_ratios_make_the_robust_loss_the_clean_loss() {
    let m = models::<f64>(1, 16, 20, 2);
    let adv = AdvConfig {
        gamma_src: 0.0,
        gamma_trg: 0.0,
        ..Default::default()
    };
    for (k, pair) in corpus(5).iter().enumerate() {
        let mut g = Graph::new(&m.store, true);
        let (clean, _) = m.mt.translation_loss(&mut g, &pair.x, &pair.z, &pair.y, &mut Dropout::eval()).unwrap();
        let (robust, ap) = robustness_loss(&mut g, &m, pair, &adv, k as u64, &mut Dropout::eval()).unwrap();
        assert_eq!(ap.x, pair.x);
        assert_eq!(ap.z, pair.z);
        assert_eq!(g.value(clean).item().to_bits(), g.value(robust).item().to_bits());
    }
}

#[test]
fn per_term_backward_matches_the_summed_objective() {
    let m = models::<f64>(1, 16, 20, 3);
    let pairs = corpus(4);
    let batch: Vec<&SentencePair> = pairs.iter().collect();
    let adv = adv_all(&m, &batch, &AdvConfig::default());
    let switches = LossSwitches::default();

    let mut g = Graph::new(&m.store, true);
    let (total, terms) = total_loss(&mut g, &m, &batch, &adv, &switches, &mut Dropout::eval()).unwrap();
    assert_eq!(terms.len(), 4);
    let summed = g.backward(total).unwrap();
    let mut whole = GradBuffer::new(&m.store);
    whole.accumulate(&summed);

    let mut split = GradBuffer::new(&m.store);
    let mut value = 0.0;
    for term in Term::ALL {
        let mut g = Graph::new(&m.store, true);
        let l = term_loss(&mut g, &m, term, &batch, &adv, &mut Dropout::eval()).unwrap();
        value += g.value(l).item();
        split.accumulate(&g.backward(l).unwrap());
    }
    assert!((value - g.value(total).item()).abs() < 1e-12);
    for ((_, a), (_, b)) in whole.iter().zip(split.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn clean_only_training_matches_the_baseline_bit_for_bit() {
    let pairs = corpus(30);
    let init = models::<f32>(1, 16, 20, 4);
    let cfg = config(LossSwitches::CLEAN_ONLY, 6);
    let (a, log) = train(TrainState::new(init.clone(), 5), &pairs, &cfg).unwrap();
    let (b, losses) = train_baseline(TrainState::new(init, 5), &pairs, &cfg.optim, cfg.batch_tokens, 6).unwrap();
    let traced: Vec<u64> = log.iter().map(|m| m.l_clean.unwrap().to_bits()).collect();
    assert_eq!(traced, losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>());
    assert!(log.iter().all(|m| m.l_robust.is_none() && m.l_lm_x.is_none() && m.src_replaced == 0));
    assert_eq!(a, b);
}

#[test]
fn runs_are_reproducible() {
    let pairs = corpus(30);
    let init = models::<f32>(1, 16, 20, 6);
    let cfg = config(LossSwitches::default(), 4);
    let (a, la) = train(TrainState::new(init.clone(), 7), &pairs, &cfg).unwrap();
    let (b, lb) = train(TrainState::new(init.clone(), 7), &pairs, &cfg).unwrap();
    assert_eq!(a, b);
    let strip = |l: &[advseq_core::robust::StepMetrics]| l.iter().map(|m| m.without_timing()).collect::<Vec<_>>();
    assert_eq!(strip(&la), strip(&lb));
    assert!(la.iter().any(|m| m.src_replaced + m.trg_replaced > 0));
    let (c, _) = train(TrainState::new(init, 8), &pairs, &cfg).unwrap();
    assert_ne!(a.models.store, c.models.store);
}

#[test]
fn resuming_from_a_checkpoint_continues_the_same_run() {
    let pairs = corpus(30);
    let init = models::<f32>(1, 16, 20, 9);
    let (straight, _) = train(TrainState::new(init.clone(), 3), &pairs, &config(LossSwitches::default(), 5)).unwrap();

    let (half, _) = train(TrainState::new(init, 3), &pairs, &config(LossSwitches::default(), 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&half, &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path, half.models.config()).unwrap();
    assert_eq!(loaded, half);
    let (resumed, log) = train(loaded, &pairs, &config(LossSwitches::default(), 5)).unwrap();
    assert_eq!(log.first().unwrap().step, 3);
    assert_eq!(resumed, straight);
}

#[test]
fn language_model_updates_reach_the_shared_embedding_table() {
    let pairs = corpus(20);
    let init = models::<f32>(1, 16, 20, 10);
    let lm_only = LossSwitches {
        clean: false,
        robust: false,
        lm: true,
        perturb_source: false,
        perturb_target: false,
    };
    let (state, _) = train(TrainState::new(init.clone(), 1), &pairs, &config(lm_only, 2)).unwrap();
    let m = &state.models;
    assert_eq!(m.mt.src_embedding, m.lm_src.embedding);
    assert_eq!(m.mt.trg_embedding, m.lm_trg.embedding);
    assert_ne!(m.store.get(m.mt.src_embedding), init.store.get(init.mt.src_embedding));
    // translation-only weights receive no gradient from the LM terms
    let proj = m.store.find("mt.proj.w").expect("projection weight");
    assert_eq!(m.store.get(proj), init.store.get(proj));
}

#[test]
fn trainer_reports_every_enabled_term() {
    let pairs = corpus(30);
    let init = models::<f32>(1, 16, 20, 11);
    let mut t = Trainer::new(TrainState::new(init, 2), &pairs, &config(LossSwitches::default(), 2)).unwrap();
    let m = t.step().unwrap();
    assert!(m.l_clean.is_some() && m.l_robust.is_some() && m.l_lm_x.is_some() && m.l_lm_y.is_some());
    assert!(m.advgen_ratio > 0.0);
    let json: serde_json::Value = serde_json::from_str(&m.to_json()).unwrap();
    assert!(json.get("advgen_ratio").is_some());
    t.step().unwrap();
    assert!(t.is_done());
}
