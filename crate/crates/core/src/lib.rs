//! Audiovisual speech recognition with a sparse mixture-of-experts encoder.
//!
//! Speech is turned into log-Mel frames, stacked into speech tokens and
//! concatenated after projected visual tokens. The fused sequence runs
//! through a two-branch encoder whose second feed-forward slot is a top-K
//! routed mixture of experts, followed by an attention decoder and a CTC
//! head. Training minimizes attention + CTC + load-balancing losses.
//!
//! Everything is computed in `f64` on a small reverse-mode tape
//! ([`tensor::Tape`]) so every gradient can be checked against finite
//! differences.

pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod frontend;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod moe;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Example, Model, ModelConfig};
pub use moe::{LoadStats, MoeConfig, MoeLayer};

pub use params::{ParamId, ParamStore};
pub use tensor::{Tape, Tensor, Var};
