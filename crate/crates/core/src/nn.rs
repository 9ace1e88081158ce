//! Parameterized building blocks shared by the encoder, decoder and experts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Silu => tape.silu(x),
        }
    }
}

/// `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: store.normal(format!("{name}.weight"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
            bias: store.zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    /// Copies this layer's tensors from `src` into `dst` under a new name.
    pub fn copy_into(&self, src: &ParamStore, dst: &mut ParamStore, name: &str) -> Self {
        Linear {
            weight: dst.insert(format!("{name}.weight"), src.get(self.weight).clone()),
            bias: dst.insert(format!("{name}.bias"), src.get(self.bias).clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gain: store.ones(format!("{name}.gain"), &[width]),
            bias: store.zeros(format!("{name}.bias"), &[width]),
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Position-wise feed-forward network `D -> D_ff -> D`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, inner: usize, activation: Activation, rng: &mut R) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), width, inner, rng),
            down: Linear::new(store, &format!("{name}.down"), inner, width, rng),
            activation,
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.up.forward(store, tape, x)?;
        let h = self.activation.apply(tape, h);
        self.down.forward(store, tape, h)
    }

    pub fn copy_into(&self, src: &ParamStore, dst: &mut ParamStore, name: &str) -> Self {
        FeedForward {
            up: self.up.copy_into(src, dst, &format!("{name}.up")),
            down: self.down.copy_into(src, dst, &format!("{name}.down")),
            activation: self.activation,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.up.weight, self.up.bias, self.down.weight, self.down.bias]
    }

    pub fn width(&self, store: &ParamStore) -> usize {
        store.get(self.up.weight).shape()[0]
    }

    pub fn inner_width(&self, store: &ParamStore) -> usize {
        store.get(self.up.weight).shape()[1]
    }
}
