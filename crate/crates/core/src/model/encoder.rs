use rand::Rng;

use super::attention::MultiHeadAttention;
use super::config::ModelConfig;
use crate::error::Result;
use crate::moe::{MoeLayer, MoeOutput};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Var};

/// Local branch: gated MLP whose value half passes through a depthwise
/// convolution over time.
#[derive(Clone, Debug)]
pub struct ConvGatedMlp {
    pub up: Linear,
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub down: Linear,
}

impl ConvGatedMlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, kernel: usize, rng: &mut R) -> Self {
        ConvGatedMlp {
            up: Linear::new(store, &format!("{name}.up"), width, 2 * width, rng),
            conv_kernel: store.normal(format!("{name}.conv.kernel"), &[width, kernel], (1.0 / kernel as f64).sqrt(), rng),
            conv_bias: store.zeros(format!("{name}.conv.bias"), &[width]),
            down: Linear::new(store, &format!("{name}.down"), width, width, rng),
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let width = tape.shape(x)[1];
        let u = self.up.forward(store, tape, x)?;
        let u = tape.silu(u);
        let gate = tape.slice_cols(u, 0, width)?;
        let value = tape.slice_cols(u, width, 2 * width)?;
        let k = tape.param(store, self.conv_kernel);
        let b = tape.param(store, self.conv_bias);
        let value = tape.depthwise_conv(value, k, b)?;
        let g = tape.mul(gate, value)?;
        self.down.forward(store, tape, g)
    }
}

/// The second feed-forward slot: dense, or a routed mixture of experts.
#[derive(Clone, Debug)]
pub enum SecondFfn {
    Dense(FeedForward),
    Moe(MoeLayer),
}

/// Macaron two-branch block: half-scaled FFN, parallel attention and
/// convolutional branches merged by a linear layer, a half-scaled second
/// FFN slot, and a closing layer norm. Sublayers are pre-normalized.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ffn1_norm: LayerNorm,
    pub ffn1: FeedForward,
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub local_norm: LayerNorm,
    pub local: ConvGatedMlp,
    pub merge: Linear,
    pub ffn2_norm: LayerNorm,
    pub ffn2: SecondFfn,
    pub out_norm: LayerNorm,
    pub macaron_scale: f64,
}

impl EncoderBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.hidden;
        let ffn1_norm = LayerNorm::new(store, &format!("{name}.ffn1_norm"), d);
        let ffn1 = FeedForward::new(store, &format!("{name}.ffn1"), d, cfg.ffn_hidden, cfg.activation, rng);
        let attn_norm = LayerNorm::new(store, &format!("{name}.attn_norm"), d);
        let attn = MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.heads, rng);
        let local_norm = LayerNorm::new(store, &format!("{name}.local_norm"), d);
        let local = ConvGatedMlp::new(store, &format!("{name}.local"), d, cfg.conv_kernel, rng);
        let merge = Linear::new(store, &format!("{name}.merge"), 2 * d, d, rng);
        let ffn2_norm = LayerNorm::new(store, &format!("{name}.ffn2_norm"), d);
        let ffn2 = match cfg.moe {
            None => SecondFfn::Dense(FeedForward::new(store, &format!("{name}.ffn2"), d, cfg.ffn_hidden, cfg.activation, rng)),
            // Without a dense donor the experts start independent; use
            // `Model::moe_from_dense` to replicate a trained FFN instead.
            Some(moe_cfg) => SecondFfn::Moe(MoeLayer::new_random(
                store,
                &format!("{name}.moe"),
                d,
                cfg.ffn_hidden,
                moe_cfg,
                cfg.activation,
                rng,
            )?),
        };
        let out_norm = LayerNorm::new(store, &format!("{name}.out_norm"), d);
        Ok(EncoderBlock {
            ffn1_norm,
            ffn1,
            attn_norm,
            attn,
            local_norm,
            local,
            merge,
            ffn2_norm,
            ffn2,
            out_norm,
            macaron_scale: cfg.macaron_scale,
        })
    }

    /// `h = x + s·FFN1(x)`, `m = merge(attn(h), local(h)) + h`,
    /// `y = LN(m + s·FFN2(m))`, with `s` the macaron scale.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<(Var, Option<MoeOutput>)> {
        let n = self.ffn1_norm.forward(store, tape, x)?;
        let f = self.ffn1.forward(store, tape, n)?;
        let f = tape.scale(f, self.macaron_scale);
        let h = tape.add(x, f)?;

        let na = self.attn_norm.forward(store, tape, h)?;
        let global = self.attn.forward(store, tape, na, na, None)?;
        let nl = self.local_norm.forward(store, tape, h)?;
        let local = self.local.forward(store, tape, nl)?;
        let both = tape.concat_cols(&[global, local])?;
        let merged = self.merge.forward(store, tape, both)?;
        let m = tape.add(merged, h)?;

        let nf = self.ffn2_norm.forward(store, tape, m)?;
        let (f2, moe) = match &self.ffn2 {
            SecondFfn::Dense(ffn) => (ffn.forward(store, tape, nf)?, None),
            SecondFfn::Moe(layer) => {
                let out = layer.forward(store, tape, nf)?;
                (out.y, Some(out))
            }
        };
        let f2 = tape.scale(f2, self.macaron_scale);
        let y = tape.add(m, f2)?;
        Ok((self.out_norm.forward(store, tape, y)?, moe))
    }
}
