use alloc::format;
use alloc::string::String;

use crate::data::BLANK;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Uniform-copy decoder inputs, per-position cross-entropy.
    Vanilla,
    /// Conditional masked LM: masked target tokens as decoder input.
    Cmlm,
    /// Over-long alignment over vocabulary plus blank, CTC loss.
    Ctc,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vanilla => "vanilla",
            ModelKind::Cmlm => "cmlm",
            ModelKind::Ctc => "ctc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(ModelKind::Vanilla),
            "cmlm" => Ok(ModelKind::Cmlm),
            "ctc" => Ok(ModelKind::Ctc),
            _ => Err(Error::Config(format!("unknown model kind `{s}`"))),
        }
    }
}

/// What the rephraser reads and what it cross-attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RephraserVariant {
    /// Reads the reference, attends to the NAT decoder states.
    Base,
    /// Reads the NAT argmax tokens, attends to the reference embeddings.
    Swap,
}

impl RephraserVariant {
    pub fn name(self) -> &'static str {
        match self {
            RephraserVariant::Base => "base",
            RephraserVariant::Swap => "swap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(RephraserVariant::Base),
            "swap" => Ok(RephraserVariant::Swap),
            _ => Err(Error::Config(format!("unknown rephraser variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Including the reserved tokens (the CTC blank among them).
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub rephraser_layers: usize,
    pub rephraser_variant: RephraserVariant,
    pub model_kind: ModelKind,
    /// CTC decoder length as a multiple of the source length.
    pub ctc_upsample: usize,
    /// Longest sequence any stack accepts (the CTC alignment included).
    pub max_len: usize,
    /// The length predictor classifies `T_tgt − T_src` in `[−r, r]`.
    pub length_offset_range: usize,
    pub position_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            rephraser_layers: 2,
            rephraser_variant: RephraserVariant::Base,
            model_kind: ModelKind::Vanilla,
            ctc_upsample: 3,
            max_len: 64,
            length_offset_range: 20,
            position_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size <= BLANK {
            return fail(format!(
                "vocab_size {} leaves no room for content tokens",
                self.vocab_size
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_dim == 0 || self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return fail("ffn_dim and layer counts must be positive".into());
        }
        if self.rephraser_layers == 0 {
            return fail("rephraser_layers must be at least 1".into());
        }
        if self.model_kind == ModelKind::Ctc && self.ctc_upsample < 2 {
            return fail(format!(
                "ctc_upsample {} must be at least 2",
                self.ctc_upsample
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        Ok(())
    }

    pub fn length_classes(&self) -> usize {
        2 * self.length_offset_range + 1
    }
}
