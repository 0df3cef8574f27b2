use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderDirection {
    /// Causal: frame `t` only sees frames `0..=t`.
    Unidirectional,
    /// Sum of a forward and a backward recurrence.
    #[default]
    Bidirectional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub enc_hidden: usize,
    pub enc_layers: usize,
    pub direction: EncoderDirection,
    pub dec_hidden: usize,
    pub attn_dim: usize,
    /// Number of word tokens (content + lorem). Each head adds one special
    /// index on top: blank for CTC, eos for the decoder.
    pub vocab_size: usize,
    pub disc_layers: usize,
    pub disc_hidden: usize,
    pub n_accents: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 16,
            enc_hidden: 32,
            enc_layers: 2,
            direction: EncoderDirection::Bidirectional,
            dec_hidden: 32,
            attn_dim: 32,
            vocab_size: 40,
            disc_layers: 5,
            disc_hidden: 32,
            n_accents: 2,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feat_dim", self.feat_dim),
            ("enc_hidden", self.enc_hidden),
            ("enc_layers", self.enc_layers),
            ("dec_hidden", self.dec_hidden),
            ("attn_dim", self.attn_dim),
            ("vocab_size", self.vocab_size),
            ("disc_layers", self.disc_layers),
            ("disc_hidden", self.disc_hidden),
            ("n_accents", self.n_accents),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        Ok(())
    }

    /// Output width of the CTC head and of the decoder head.
    pub fn head_size(&self) -> usize {
        self.vocab_size + 1
    }

    /// Index of blank in CTC rows, of eos in decoder outputs, of sos in the
    /// decoder embedding.
    pub fn special(&self) -> usize {
        self.vocab_size
    }
}
