use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use advseq_core::advgen::AdvConfig;
use advseq_core::checkpoint::{load_models, save_checkpoint, save_models};
use advseq_core::config::{Dataset, RunConfig};
use advseq_core::data::{read_lines, write_lines, SentencePair, Vocab};
use advseq_core::eval::{
    ablation_run, ablation_table, bleu, component_rows, gamma_grid, noisy_test_set, robustness_curve,
    translate_all, write_ablation_csv, NeighborIndex, NoiseSpec, ValidationSet,
};
use advseq_core::models::ModelSet;
use advseq_core::robust::{adversarial_pair, pretrain_language_models, LossSwitches, TrainState, Trainer};
use advseq_core::transformer::TransformerConfig;
use advseq_core::{Error, Result, BOS, EOS, PAD, UNK};
use log::info;

use crate::{Common, Grid};

const SRC_VOCAB: &str = "src.vocab";
const TRG_VOCAB: &str = "trg.vocab";
const SPECIALS: [u32; 4] = [PAD, BOS, EOS, UNK];

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut config = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

struct Run {
    config: RunConfig,
    data: Dataset,
    model: TransformerConfig,
    out: PathBuf,
}

/// Resolves the configuration, prepares the data and records both in the
/// output directory.
fn setup(common: &Common) -> Result<Run> {
    let config = resolve_config(common)?;
    let out = out_dir(&config)?;
    let data = Dataset::prepare(&config)?;
    config.save(&out.join("config.toml"))?;
    data.src_vocab.save(&out.join(SRC_VOCAB))?;
    data.trg_vocab.save(&out.join(TRG_VOCAB))?;
    let model = data.model_config(&config.model);
    Ok(Run {
        config,
        data,
        model,
        out,
    })
}

/// Models from a checkpoint plus the vocabularies stored next to it.
fn load_trained(config: &RunConfig, checkpoint: &Path) -> Result<(ModelSet<f32>, Vocab, Vocab)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let src = Vocab::load(&dir.join(SRC_VOCAB))?;
    let trg = Vocab::load(&dir.join(TRG_VOCAB))?;
    let model = TransformerConfig {
        src_vocab_size: src.len(),
        trg_vocab_size: trg.len(),
        ..config.model.clone()
    };
    Ok((load_models(checkpoint, &model)?, src, trg))
}

fn pretrained(run: &Run) -> Result<ModelSet<f32>> {
    let mut models = ModelSet::init(&run.model, run.config.seed)?;
    if run.config.pretrain.steps > 0 {
        let (a, b) = pretrain_language_models(&mut models, &run.data.train, &run.config.pretrain, run.config.seed)?;
        info!(
            "language models pretrained: final losses {:.4} / {:.4}",
            a.last().copied().unwrap_or(f64::NAN),
            b.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(models)
}

fn initial_models(run: &Run, init: Option<&Path>) -> Result<ModelSet<f32>> {
    match init {
        Some(p) => load_models(p, &run.model),
        None => pretrained(run),
    }
}

pub fn pretrain_lm(common: &Common) -> Result<()> {
    let run = setup(common)?;
    let models = pretrained(&run)?;
    let path = run.out.join("lm.ckpt");
    save_models(&models, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn train(common: &Common, init: Option<&Path>) -> Result<()> {
    let run = setup(common)?;
    let switches = run.config.train.switches;
    let models = if init.is_none() && (switches.robust || switches.lm) {
        let m = pretrained(&run)?;
        save_models(&m, &run.out.join("lm.ckpt"))?;
        m
    } else if let Some(p) = init {
        load_models(p, &run.model)?
    } else {
        ModelSet::init(&run.model, run.config.seed)?
    };
    let mut trainer = Trainer::new(TrainState::new(models, run.config.seed), &run.data.train, &run.config.train)?;
    let log_path = run.out.join("metrics.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let every = run.config.train.checkpoint_every;
    while !trainer.is_done() {
        let m = trainer.step()?;
        writeln!(log, "{}", m.to_json()).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && m.step % every == 0 {
            save_checkpoint(&trainer.state, &run.out.join(format!("step{}.ckpt", m.step)))?;
        }
    }
    let state = trainer.into_state();
    let final_path = run.out.join("final.ckpt");
    save_checkpoint(&state, &final_path)?;
    if !run.data.valid.is_empty() {
        let (sources, refs) = run.data.inputs_and_references(&run.data.valid);
        let hyps = translate_all(&state.models.mt, &state.models.store, &run.data.trg_vocab, &sources)?;
        write_lines(&run.out.join("valid.hyp"), &hyps)?;
        println!("valid_bleu {:.2}", bleu(&hyps, &refs, 4)?);
    }
    println!("wrote {}", final_path.display());
    Ok(())
}

pub fn attack(common: &Common, checkpoint: &Path, sentence: &str, reference: Option<&str>) -> Result<()> {
    let config = resolve_config(common)?;
    let (models, src, trg) = load_trained(&config, checkpoint)?;
    let x = src.encode(sentence);
    if x.is_empty() {
        return Err(Error::Data("empty sentence".into()));
    }
    let y = match reference {
        Some(r) => trg.encode(r),
        None => models.mt.greedy_decode(&models.store, &x, 2 * x.len() + 2)?,
    };
    let pair = SentencePair::new(x.clone(), &y);
    let adv: &AdvConfig = &config.train.adv;
    let switches = LossSwitches {
        perturb_target: false,
        ..LossSwitches::default()
    };
    let a = adversarial_pair(&models, &pair, adv, &switches, adv.seed, None)?;
    let translate = |s: &[u32]| -> Result<String> {
        Ok(trg.decode(&models.mt.greedy_decode(&models.store, s, 2 * s.len() + 2)?))
    };
    let adversarial = src.decode(&a.x);
    println!("source {}", src.decode(&x));
    println!("adversarial {adversarial}");
    println!("changed {}", a.source_changed);
    println!("translation {}", translate(&x)?);
    println!("adversarial_translation {}", translate(&a.x)?);
    let out = out_dir(&config)?;
    write_lines(&out.join("attack.txt"), &[adversarial])
}

fn noise_index(models: &ModelSet<f32>, spec: &NoiseSpec) -> Result<NeighborIndex> {
    NeighborIndex::build(models.store.get(models.mt.src_embedding), spec.pool, &SPECIALS)
}

pub fn noise(common: &Common, input: &Path, checkpoint: &Path) -> Result<()> {
    let config = resolve_config(common)?;
    let (models, src, _) = load_trained(&config, checkpoint)?;
    let sources: Vec<Vec<u32>> = read_lines(input)?.iter().map(|l| src.encode(l)).collect();
    let index = noise_index(&models, &config.noise)?;
    let noisy = noisy_test_set(&sources, &config.noise, &index, &models.lm_src, &models.store)?;
    let lines: Vec<String> = noisy.iter().map(|s| src.decode(s)).collect();
    let out = out_dir(&config)?.join(format!("noisy_{:.2}.txt", config.noise.fraction));
    write_lines(&out, &lines)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn eval_files(hyp: &Path, reference: &Path) -> Result<()> {
    let h = read_lines(hyp)?;
    let r = read_lines(reference)?;
    println!("BLEU {:.2}", bleu(&h, &r, 4)?);
    Ok(())
}

pub fn eval_checkpoint(common: &Common, checkpoint: &Path, noise_checkpoint: Option<&Path>) -> Result<()> {
    let run = setup(common)?;
    let (models, _, _) = load_trained(&run.config, checkpoint)?;
    let noise_models = match noise_checkpoint {
        Some(p) => load_trained(&run.config, p)?.0,
        None => models.clone(),
    };
    let split = if run.data.test.is_empty() { &run.data.valid } else { &run.data.test };
    let (clean, refs) = run.data.inputs_and_references(split);
    let index = noise_index(&noise_models, &run.config.noise)?;
    let mut noisy = Vec::new();
    for &fraction in &run.config.eval.fractions {
        let spec = NoiseSpec {
            fraction,
            ..run.config.noise.clone()
        };
        let inputs = if fraction == 0.0 {
            clean.clone()
        } else {
            noisy_test_set(&clean, &spec, &index, &noise_models.lm_src, &noise_models.store)?
        };
        noisy.push((fraction, inputs));
    }
    let report = robustness_curve(&models.mt, &models.store, &run.data.trg_vocab, &clean, &noisy, &refs)?;
    let path = run.out.join("robustness.csv");
    report.write_csv(&path)?;
    print!("{}", report.to_table());
    println!("wrote {}", path.display());
    Ok(())
}

pub fn ablate(common: &Common, grid: Grid, init: Option<&Path>) -> Result<()> {
    let run = setup(common)?;
    let initial = initial_models(&run, init)?;
    let (rows, name) = match grid {
        Grid::Components => (component_rows(&run.config.train), "components"),
        Grid::Gamma => (gamma_grid(&run.config.eval.gamma_values), "gamma"),
    };
    let (sources, refs) = run.data.inputs_and_references(&run.data.valid);
    if sources.is_empty() {
        return Err(Error::Data("ablation needs a nonempty validation split".into()));
    }
    let valid = ValidationSet {
        sources: &sources,
        references: &refs,
        vocab: &run.data.trg_vocab,
    };
    let results = ablation_run(&initial, run.config.seed, &run.data.train, &valid, &run.config.train, &rows)?;
    let path = run.out.join(format!("ablation_{name}.csv"));
    write_ablation_csv(&results, &path)?;
    print!("{}", ablation_table(&results));
    println!("wrote {}", path.display());
    Ok(())
}
