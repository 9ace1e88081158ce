//! Encoder-decoder recognizer over fused visual + speech tokens.

mod attention;
mod config;
mod decoder;
mod encoder;

pub use attention::{causal_mask, sinusoidal_positions, MultiHeadAttention};
pub use config::{ModelConfig, SpecialTokens};
pub use decoder::DecoderBlock;
pub use encoder::{ConvGatedMlp, EncoderBlock, SecondFfn};

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::SpeechProjection;
use crate::fusion::{fuse_concat, FusedSequence, VisualProjection, VisualTokens};
use crate::losses::{attention_loss, ctc_loss};
use crate::moe::{LoadStats, MoeLayer, MoeOutput};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Model inputs for one utterance, already through the feature frontend.
#[derive(Clone, Debug)]
pub struct Example {
    /// Stacked log-Mel frames, N × (stack_factor · n_mels).
    pub stacked: Tensor,
    /// `None` runs the model audio-only.
    pub visual: Option<VisualTokens>,
    /// Target token ids, no specials.
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub fused: FusedSequence,
    /// Final encoder states, (M + N) × D.
    pub states: Var,
    /// One entry per MoE block, in block order.
    pub moe: Vec<MoeOutput>,
}

impl EncoderOutput {
    pub fn load_stats(&self) -> Vec<LoadStats> {
        self.moe.iter().map(|m| m.stats.clone()).collect()
    }
}

/// Per-utterance forward results needed for training.
#[derive(Clone, Debug)]
pub struct ItemForward {
    pub l_att: Var,
    pub l_ctc: Var,
    pub encoder: EncoderOutput,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub speech_proj: SpeechProjection,
    pub visual_proj: VisualProjection,
    pub encoder: Vec<EncoderBlock>,
    pub ctc_head: Linear,
    pub embedding: ParamId,
    pub decoder: Vec<DecoderBlock>,
    pub decoder_norm: LayerNorm,
    pub output: Linear,
}

impl Model {
    /// Builds a model and registers its parameters in a new store. Parameter
    /// creation order is fixed, so the same `rng` state gives the same model.
    pub fn new<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.hidden;
        let speech_proj = SpeechProjection::new(&mut store, cfg.frontend.stacked_width(), d, rng);
        let visual_proj = VisualProjection::new(&mut store, cfg.visual_dim, d, rng);
        let encoder = (0..cfg.num_encoder_blocks)
            .map(|i| EncoderBlock::new(&mut store, &format!("encoder.{i}"), &cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let ctc_head = Linear::new(&mut store, "ctc_head", d, cfg.vocab_size, rng);
        let embedding = store.normal("decoder.embedding", &[cfg.vocab_size, d], 1.0, rng);
        let decoder = (0..cfg.num_decoder_blocks)
            .map(|i| DecoderBlock::new(&mut store, &format!("decoder.{i}"), &cfg, rng))
            .collect();
        let decoder_norm = LayerNorm::new(&mut store, "decoder.norm", d);
        let output = Linear::new(&mut store, "decoder.output", d, cfg.vocab_size, rng);
        Ok((
            Model {
                cfg,
                speech_proj,
                visual_proj,
                encoder,
                ctc_head,
                embedding,
                decoder,
                decoder_norm,
                output,
            },
            store,
        ))
    }

    /// Converts a dense model into its MoE twin: every second FFN becomes a
    /// layer of experts replicated from it, all other tensors are copied.
    pub fn moe_from_dense<R: Rng>(
        dense: &Model,
        dense_store: &ParamStore,
        moe_cfg: crate::moe::MoeConfig,
        rng: &mut R,
    ) -> Result<(Model, ParamStore)> {
        let mut model = dense.clone();
        model.cfg.moe = Some(moe_cfg);
        let mut store = dense_store.clone();
        for (i, block) in model.encoder.iter_mut().enumerate() {
            let SecondFfn::Dense(donor) = &block.ffn2 else {
                return Err(Error::Config(format!("encoder block {i} already has experts")));
            };
            let layer = MoeLayer::init_from_dense(&mut store, &format!("encoder.{i}.moe"), dense_store, donor, moe_cfg, rng)?;
            block.ffn2 = SecondFfn::Moe(layer);
        }
        // Drop the donor tensors so the store holds exactly the MoE model.
        let used = model.param_names(&store);
        let mut compact = ParamStore::new();
        let mut remap = std::collections::HashMap::new();
        for id in store.ids() {
            if used.contains(store.name(id)) {
                remap.insert(id, compact.insert(store.name(id), store.get(id).clone()));
            }
        }
        model.remap_params(&remap);
        Ok((model, compact))
    }

    fn param_names(&self, store: &ParamStore) -> std::collections::HashSet<String> {
        self.param_ids().into_iter().map(|id| store.name(id).to_string()).collect()
    }

    /// Every parameter the model reads, in store order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        self.clone().visit_params(&mut |id| ids.push(*id));
        ids.sort();
        ids
    }

    fn remap_params(&mut self, remap: &std::collections::HashMap<ParamId, ParamId>) {
        self.visit_params(&mut |id| *id = remap[id]);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        fn linear(l: &mut Linear, f: &mut dyn FnMut(&mut ParamId)) {
            f(&mut l.weight);
            f(&mut l.bias);
        }
        fn norm(l: &mut LayerNorm, f: &mut dyn FnMut(&mut ParamId)) {
            f(&mut l.gain);
            f(&mut l.bias);
        }
        fn ffn(x: &mut crate::nn::FeedForward, f: &mut dyn FnMut(&mut ParamId)) {
            linear(&mut x.up, f);
            linear(&mut x.down, f);
        }
        fn mha(a: &mut MultiHeadAttention, f: &mut dyn FnMut(&mut ParamId)) {
            linear(&mut a.query, f);
            linear(&mut a.key, f);
            linear(&mut a.value, f);
            linear(&mut a.out, f);
        }
        f(&mut self.speech_proj.weight);
        f(&mut self.speech_proj.bias);
        f(&mut self.visual_proj.weight);
        f(&mut self.visual_proj.bias);
        for b in &mut self.encoder {
            norm(&mut b.ffn1_norm, f);
            ffn(&mut b.ffn1, f);
            norm(&mut b.attn_norm, f);
            mha(&mut b.attn, f);
            norm(&mut b.local_norm, f);
            linear(&mut b.local.up, f);
            f(&mut b.local.conv_kernel);
            f(&mut b.local.conv_bias);
            linear(&mut b.local.down, f);
            linear(&mut b.merge, f);
            norm(&mut b.ffn2_norm, f);
            match &mut b.ffn2 {
                SecondFfn::Dense(x) => ffn(x, f),
                SecondFfn::Moe(m) => {
                    f(&mut m.router);
                    for e in &mut m.experts {
                        ffn(e, f);
                    }
                }
            }
            norm(&mut b.out_norm, f);
        }
        linear(&mut self.ctc_head, f);
        f(&mut self.embedding);
        for b in &mut self.decoder {
            norm(&mut b.self_norm, f);
            mha(&mut b.self_attn, f);
            norm(&mut b.cross_norm, f);
            mha(&mut b.cross_attn, f);
            norm(&mut b.ffn_norm, f);
            ffn(&mut b.ffn, f);
        }
        norm(&mut self.decoder_norm, f);
        linear(&mut self.output, f);
    }

    /// Projects inputs, concatenates `[v; s]`, adds positions and runs the
    /// encoder stack.
    pub fn encode(&self, store: &ParamStore, tape: &mut Tape, stacked: &Tensor, visual: Option<&VisualTokens>) -> Result<EncoderOutput> {
        let s = self.speech_proj.forward(store, tape, stacked)?;
        let v = match visual {
            Some(z) => Some(self.visual_proj.forward(store, tape, z)?),
            None => None,
        };
        let fused = fuse_concat(tape, v, s)?;
        let pe = tape.constant(sinusoidal_positions(fused.len, self.cfg.hidden));
        let mut x = tape.add(fused.x, pe)?;
        let mut moe = Vec::new();
        for block in &self.encoder {
            let (y, m) = block.forward(store, tape, x)?;
            x = y;
            moe.extend(m);
        }
        Ok(EncoderOutput { fused, states: x, moe })
    }

    /// Frame logits of the CTC head over speech positions only, N × V.
    pub fn ctc_logits(&self, store: &ParamStore, tape: &mut Tape, enc: &EncoderOutput) -> Result<Var> {
        let speech = tape.slice_rows(enc.states, enc.fused.boundary, enc.fused.len)?;
        self.ctc_head.forward(store, tape, speech)
    }

    /// Logits for every position of `target_in` (which starts with sos),
    /// each conditioned only on earlier positions, U × V.
    pub fn decode_teacher_forcing(&self, store: &ParamStore, tape: &mut Tape, states: Var, target_in: &[usize]) -> Result<Var> {
        let v = self.cfg.vocab_size;
        if target_in.is_empty() {
            return Err(Error::Input("decoder input is empty".into()));
        }
        if let Some(&bad) = target_in.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("token id {bad} out of range for vocabulary of {v}")));
        }
        let emb = tape.param(store, self.embedding);
        let x = tape.gather_rows(emb, target_in)?;
        let pe = tape.constant(sinusoidal_positions(target_in.len(), self.cfg.hidden));
        let mut x = tape.add(x, pe)?;
        for block in &self.decoder {
            x = block.forward(store, tape, x, states)?;
        }
        let x = self.decoder_norm.forward(store, tape, x)?;
        self.output.forward(store, tape, x)
    }

    /// Attention and CTC losses (summed over positions) for one utterance.
    pub fn forward_item(&self, store: &ParamStore, tape: &mut Tape, ex: &Example) -> Result<ItemForward> {
        let sp = self.cfg.special;
        if let Some(&bad) = ex.tokens.iter().find(|&&t| sp.contains(t) || t >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("transcript token {bad} is special or out of range")));
        }
        let encoder = self.encode(store, tape, &ex.stacked, ex.visual.as_ref())?;
        let frame_logits = self.ctc_logits(store, tape, &encoder)?;
        let l_ctc = ctc_loss(tape, frame_logits, &ex.tokens, sp.blank)?;
        let mut target_in = vec![sp.sos];
        target_in.extend_from_slice(&ex.tokens);
        let mut target_out = ex.tokens.clone();
        target_out.push(sp.eos);
        let logits = self.decode_teacher_forcing(store, tape, encoder.states, &target_in)?;
        let l_att = attention_loss(tape, logits, &target_out, sp.pad)?;
        Ok(ItemForward { l_att, l_ctc, encoder })
    }

    pub fn num_moe_layers(&self) -> usize {
        self.encoder.iter().filter(|b| matches!(b.ffn2, SecondFfn::Moe(_))).count()
    }
}
