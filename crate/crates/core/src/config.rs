//! Run configuration: one TOML file describes the data, the models, the
//! training recipe, the noise protocol and the output directory.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/toy"
//!
//! [task]
//! type = "toy"
//! kind = "cipher-local-swap"
//! vocab_size = 200
//! corpus_size = 5000
//!
//! [model]
//! num_layers = 2
//! model_dim = 64
//!
//! [train]
//! max_steps = 600
//! adv.gamma_src = 0.25
//! ```
//!
//! Any key can be overridden with `path.to.key=value`; the value is parsed
//! as TOML and falls back to a plain string.
//!
//! Every random choice derives from `seed`: model initialization, batch
//! order, dropout, adversarial sampling, LM pretraining, and the toy task.
//! The noise protocol has its own `noise.seed`.

use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::bilm::PretrainConfig;
use crate::data::{build_vocab, load_parallel, make_toy_task, SentencePair, TextCorpus, ToyKind, Vocab};
use crate::error::{Error, Result};
use crate::eval::NoiseSpec;
use crate::robust::TrainConfig;
use crate::transformer::TransformerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TaskConfig {
    Toy {
        kind: ToyKind,
        vocab_size: usize,
        corpus_size: usize,
        min_len: usize,
        max_len: usize,
        valid_size: usize,
        test_size: usize,
    },
    Files {
        train_src: PathBuf,
        train_trg: PathBuf,
        valid_src: PathBuf,
        valid_trg: PathBuf,
        #[serde(default)]
        test_src: Option<PathBuf>,
        #[serde(default)]
        test_trg: Option<PathBuf>,
        #[serde(default = "one")]
        min_count: usize,
    },
}

fn one() -> usize {
    1
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig::Toy {
            kind: ToyKind::CipherLocalSwap,
            vocab_size: 200,
            corpus_size: 5000,
            min_len: 4,
            max_len: 10,
            valid_size: 200,
            test_size: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Noise fractions of the robustness curve.
    pub fractions: Vec<f64>,
    /// Ratio values of the `(γ_src, γ_trg)` grid.
    pub gamma_values: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fractions: vec![0.0, 0.1, 0.2, 0.3],
            gamma_values: vec![0.0, 0.25, 0.5, 0.75],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub task: TaskConfig,
    /// Vocabulary sizes of 0 are filled in from the data.
    pub model: TransformerConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub noise: NoiseSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            task: TaskConfig::default(),
            model: TransformerConfig {
                max_len: 16,
                ..Default::default()
            },
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            noise: NoiseSpec::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Applies `key.path=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut tree, key.trim(), parse_value(raw.trim()))?;
        }
        tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.noise.validate()?;
        if let TaskConfig::Toy {
            min_len, max_len, ..
        } = self.task
        {
            if max_len + 2 > self.model.max_len {
                return Err(Error::Config(format!(
                    "toy sentences of up to {max_len} tokens need model.max_len >= {}",
                    max_len + 2
                )));
            }
            if min_len == 0 || min_len > max_len {
                return Err(Error::Config(format!("invalid toy length range {min_len}..={max_len}")));
            }
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(tree: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside a table")))?;
        if k + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}

/// Tokenized splits with their vocabularies.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub src_vocab: Vocab,
    pub trg_vocab: Vocab,
    pub train: Vec<SentencePair>,
    pub valid: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
    pub train_text: TextCorpus,
    pub valid_text: TextCorpus,
    pub test_text: TextCorpus,
}

impl Dataset {
    /// Builds or reads the corpus. Vocabularies come from the training
    /// split only.
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        let (train_text, valid_text, test_text, min_count) = match &config.task {
            TaskConfig::Toy {
                kind,
                vocab_size,
                corpus_size,
                min_len,
                max_len,
                valid_size,
                test_size,
            } => {
                let total = corpus_size + valid_size + test_size;
                let task = make_toy_task(*kind, *vocab_size, total, (*min_len, *max_len), config.seed)?;
                let c = task.corpus;
                (
                    c.slice(0..*corpus_size),
                    c.slice(*corpus_size..corpus_size + valid_size),
                    c.slice(corpus_size + valid_size..total),
                    1,
                )
            }
            TaskConfig::Files {
                train_src,
                train_trg,
                valid_src,
                valid_trg,
                test_src,
                test_trg,
                min_count,
            } => {
                let train = load_parallel(train_src, train_trg)?;
                let valid = load_parallel(valid_src, valid_trg)?;
                let test = match (test_src, test_trg) {
                    (Some(s), Some(t)) => load_parallel(s, t)?,
                    (None, None) => valid.clone(),
                    _ => return Err(Error::Config("test_src and test_trg must be given together".into())),
                };
                (train, valid, test, *min_count)
            }
        };
        let src_vocab = build_vocab(&train_text.source, min_count)?;
        let trg_vocab = build_vocab(&train_text.target, min_count)?;
        let limit = config.model.max_len.saturating_sub(1);
        let encode = |c: &TextCorpus, name: &str| {
            let all = c.encode(&src_vocab, &trg_vocab);
            let before = all.len();
            let kept: Vec<SentencePair> = all
                .into_iter()
                .filter(|p| !p.x.is_empty() && p.y.len() > 1 && p.x.len() <= limit && p.y.len() <= limit)
                .collect();
            if kept.len() < before {
                warn!("{name}: dropped {} empty or over-length pairs", before - kept.len());
            }
            kept
        };
        let train = encode(&train_text, "train");
        let valid = encode(&valid_text, "valid");
        let test = encode(&test_text, "test");
        if train.is_empty() {
            return Err(Error::Data("no usable training pairs".into()));
        }
        Ok(Dataset {
            src_vocab,
            trg_vocab,
            train,
            valid,
            test,
            train_text,
            valid_text,
            test_text,
        })
    }

    /// The model configuration with vocabulary sizes from this data.
    pub fn model_config(&self, base: &TransformerConfig) -> TransformerConfig {
        TransformerConfig {
            src_vocab_size: self.src_vocab.len(),
            trg_vocab_size: self.trg_vocab.len(),
            ..base.clone()
        }
    }

    /// Sources of a split and their reference strings.
    pub fn inputs_and_references(&self, split: &[SentencePair]) -> (Vec<Vec<crate::TokenId>>, Vec<String>) {
        let sources = split.iter().map(|p| p.x.clone()).collect();
        let refs = split.iter().map(|p| self.trg_vocab.decode(p.target())).collect();
        (sources, refs)
    }
}
