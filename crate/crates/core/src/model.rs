//! The full reranker: frozen encoder, projector, and language model.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{LmConfig, ToyLm};
use crate::numerics::{Activation, ParamSet, Parameter, Rng};
use crate::projector::Projector;
use crate::retrieval::{Pooling, ToyEncoder, DEFAULT_ENCODER_DIM, DEFAULT_HASH_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hash_size: usize,
    pub d_enc: usize,
    pub pooling: Pooling,
    pub activation: Activation,
    pub lm: LmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hash_size: DEFAULT_HASH_SIZE,
            d_enc: DEFAULT_ENCODER_DIM,
            pooling: Pooling::Mean,
            activation: Activation::Gelu,
            lm: LmConfig::default(),
        }
    }
}

/// Last training stage a set of weights has completed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Untrained,
    Align,
    Rank,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::Untrained => 0,
            Stage::Align => 1,
            Stage::Rank => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Stage::Untrained),
            1 => Some(Stage::Align),
            2 => Some(Stage::Rank),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: ToyEncoder,
    pub projector: Projector,
    pub lm: ToyLm,
}

impl Model {
    /// Fresh weights. The encoder is drawn from `encoder_seed` alone so that an
    /// index built earlier with the same seed stays valid.
    pub fn new(cfg: &ModelConfig, encoder_seed: u64, seed: u64) -> Result<Self> {
        let encoder = ToyEncoder::new(
            &mut Rng::labeled(encoder_seed, "encoder"),
            cfg.hash_size,
            cfg.d_enc,
            cfg.pooling,
        );
        Self::with_encoder(encoder, cfg, seed)
    }

    pub fn with_encoder(encoder: ToyEncoder, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if encoder.dim() != cfg.d_enc {
            return Err(Error::DimensionMismatch {
                expected: cfg.d_enc,
                got: encoder.dim(),
            });
        }
        let d = cfg.lm.d_model;
        let projector = Projector::new(&mut Rng::labeled(seed, "projector"), cfg.d_enc, d, d, cfg.activation);
        let lm = ToyLm::new(&mut Rng::labeled(seed, "lm"), cfg.lm)?;
        Ok(Self { encoder, projector, lm })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            hash_size: self.encoder.vocab_hash_size,
            d_enc: self.encoder.dim(),
            pooling: self.encoder.pooling,
            activation: self.projector.activation,
            lm: self.lm.cfg,
        }
    }
}

impl ParamSet for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        self.encoder.visit(f);
        self.projector.visit(f);
        self.lm.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.encoder.visit_mut(f);
        self.projector.visit_mut(f);
        self.lm.visit_mut(f);
    }
}

/// SHA-256 over parameter names, shapes and exact values.
pub fn param_digest(params: &dyn ParamSet) -> String {
    let mut h = Sha256::new();
    params.visit(&mut |name, p| {
        h.update(name.as_bytes());
        h.update((p.value.rows() as u64).to_le_bytes());
        h.update((p.value.cols() as u64).to_le_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    });
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            hash_size: 64,
            d_enc: 8,
            lm: LmConfig {
                vocab_size: 64,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                max_seq: 64,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn encoder_depends_only_on_encoder_seed() {
        let a = Model::new(&small(), 5, 1).unwrap();
        let b = Model::new(&small(), 5, 2).unwrap();
        assert_eq!(param_digest(&a.encoder), param_digest(&b.encoder));
        assert_ne!(param_digest(&a.lm), param_digest(&b.lm));
        assert_eq!(a.config(), small());
        assert!(!a.encoder.table.trainable);
    }

    #[test]
    fn digest_sees_single_bit_changes() {
        let mut m = Model::new(&small(), 0, 0).unwrap();
        let before = param_digest(&m);
        let v = m.lm.vocab_head.value.get(0, 0);
        m.lm.vocab_head.value.set(0, 0, f64::from_bits(v.to_bits() ^ 1));
        assert_ne!(before, param_digest(&m));
    }

    #[test]
    fn stage_tags_round_trip() {
        for s in [Stage::Untrained, Stage::Align, Stage::Rank] {
            assert_eq!(Stage::from_tag(s.tag()), Some(s));
        }
        assert_eq!(Stage::from_tag(9), None);
    }
}
