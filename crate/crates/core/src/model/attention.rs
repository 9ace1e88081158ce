use rand::Rng;

use crate::error::Result;
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// Additive mask value for disallowed attention positions. Finite so masked
/// rows never produce NaN.
const MASKED: f64 = -1e9;

/// Sinusoidal absolute position encodings, `len × width`.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, width]);
    let data = t.data_mut();
    for pos in 0..len {
        for i in 0..width {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data[pos * width + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// `len × len` additive mask letting position `u` see `0..=u`.
pub fn causal_mask(len: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, len]);
    for u in 0..len {
        for j in u + 1..len {
            t.data_mut()[u * len + j] = MASKED;
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            heads,
        }
    }

    /// Scaled dot-product attention of `queries` over `memory`, with an
    /// optional additive mask of shape `len(queries) × len(memory)`.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, queries: Var, memory: Var, mask: Option<&Tensor>) -> Result<Var> {
        let width = tape.shape(queries)[1];
        let dk = width / self.heads;
        let q = self.query.forward(store, tape, queries)?;
        let k = self.key.forward(store, tape, memory)?;
        let v = self.value.forward(store, tape, memory)?;
        let mask = mask.map(|m| tape.constant(m.clone()));
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.out.forward(store, tape, joined)
    }
}
