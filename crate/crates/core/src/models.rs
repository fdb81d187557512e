//! The translation model together with its two language models.

use crate::bilm::{BiLm, BiLmConfig};
use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::{self, stream};
use crate::tensor::Real;
use crate::transformer::{Seq2Seq, TransformerConfig};

/// Translation model plus source and target bidirectional LMs over one
/// parameter store. `mt.src_embedding == lm_src.embedding` and
/// `mt.trg_embedding == lm_trg.embedding` by construction, so the tables
/// are one tensor each and cannot drift apart.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet<T> {
    pub store: ParamStore<T>,
    pub mt: Seq2Seq,
    pub lm_src: BiLm,
    pub lm_trg: BiLm,
}

impl<T: Real> ModelSet<T> {
    /// Fresh parameters. Architecture and parameter order depend only on
    /// `config`; values depend on `seed`.
    pub fn init(config: &TransformerConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng::rng_for(seed, stream::INIT, 0);
        let mt = Seq2Seq::init(config, &mut store, &mut rng)?;
        let lm_src = BiLm::new(
            &BiLmConfig::source_side(config),
            &mut store,
            mt.src_embedding,
            "lm_src",
            &mut rng,
        )?;
        let lm_trg = BiLm::new(
            &BiLmConfig::target_side(config),
            &mut store,
            mt.trg_embedding,
            "lm_trg",
            &mut rng,
        )?;
        Ok(ModelSet {
            store,
            mt,
            lm_src,
            lm_trg,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.mt.config
    }

    /// Same models with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> ModelSet<U> {
        ModelSet {
            store: self.store.cast(),
            mt: self.mt.clone(),
            lm_src: self.lm_src.clone(),
            lm_trg: self.lm_trg.clone(),
        }
    }
}
