use rand::Rng;

use super::attention::{causal_mask, MultiHeadAttention};
use super::config::ModelConfig;
use crate::error::Result;
use crate::nn::{FeedForward, LayerNorm};
use crate::params::ParamStore;
use crate::tensor::{Tape, Var};

/// Pre-norm Transformer decoder block: causal self-attention,
/// cross-attention over the encoder output, dense FFN.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden;
        DecoderBlock {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_hidden, cfg.activation, rng),
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var, memory: Var) -> Result<Var> {
        let len = tape.shape(x)[0];
        let mask = causal_mask(len);
        let n = self.self_norm.forward(store, tape, x)?;
        let a = self.self_attn.forward(store, tape, n, n, Some(&mask))?;
        let h = tape.add(x, a)?;
        let n = self.cross_norm.forward(store, tape, h)?;
        let c = self.cross_attn.forward(store, tape, n, memory, None)?;
        let h = tape.add(h, c)?;
        let n = self.ffn_norm.forward(store, tape, h)?;
        let f = self.ffn.forward(store, tape, n)?;
        tape.add(h, f)
    }
}
