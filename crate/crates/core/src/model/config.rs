use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::moe::MoeConfig;
use crate::nn::Activation;

/// Reserved token ids. Word ids follow after the largest of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub blank: usize,
    pub pad: usize,
    pub sos: usize,
    pub eos: usize,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        SpecialTokens {
            blank: 0,
            pad: 1,
            sos: 2,
            eos: 3,
        }
    }
}

impl SpecialTokens {
    pub fn contains(&self, id: usize) -> bool {
        id == self.blank || id == self.pad || id == self.sos || id == self.eos
    }

    pub fn count(&self) -> usize {
        4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    /// Width C of the incoming visual embeddings.
    pub visual_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub num_encoder_blocks: usize,
    pub num_decoder_blocks: usize,
    pub vocab_size: usize,
    pub special: SpecialTokens,
    /// `None` keeps a dense second feed-forward network in every block.
    pub moe: Option<MoeConfig>,
    pub macaron_scale: f64,
    pub conv_kernel: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frontend: FrontendConfig::default(),
            visual_dim: 16,
            hidden: 64,
            heads: 4,
            ffn_hidden: 256,
            num_encoder_blocks: 4,
            num_decoder_blocks: 2,
            vocab_size: 16,
            special: SpecialTokens::default(),
            moe: Some(MoeConfig::default()),
            macaron_scale: 0.5,
            conv_kernel: 3,
            activation: Activation::Silu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden < 2 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} must be >= 2 and divisible by heads {}", self.hidden, self.heads));
        }
        if self.ffn_hidden == 0 || self.visual_dim == 0 {
            return fail("ffn_hidden and visual_dim must be positive".into());
        }
        if self.num_encoder_blocks == 0 || self.num_decoder_blocks == 0 {
            return fail("need at least one encoder and one decoder block".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        let s = self.special;
        let ids = [s.blank, s.pad, s.sos, s.eos];
        for (i, a) in ids.iter().enumerate() {
            if ids[i + 1..].contains(a) {
                return fail(format!("special token ids must be distinct: {s:?}"));
            }
            if *a >= self.vocab_size {
                return fail(format!("special id {a} outside vocabulary of {}", self.vocab_size));
            }
        }
        if self.vocab_size <= s.count() {
            return fail(format!("vocabulary of {} leaves no room for words", self.vocab_size));
        }
        if self.frontend.stack_factor == 0 || self.frontend.n_mels == 0 {
            return fail("frontend stack_factor and n_mels must be positive".into());
        }
        if let Some(moe) = &self.moe {
            moe.validate()?;
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}
