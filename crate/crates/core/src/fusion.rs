//! Visual token ingestion, projection into the speech embedding space, and
//! concatenation with speech tokens.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

const VEMB_MAGIC: &str = "VEMB";

/// Precomputed visual embeddings, one row per sampled frame (M × C).
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens(pub Tensor);

impl VisualTokens {
    pub fn new(z: Tensor) -> Result<Self> {
        if z.shape().len() != 2 {
            return Err(Error::Input(format!("visual tokens must be M x C, got {:?}", z.shape())));
        }
        if !z.is_finite() {
            return Err(Error::Input("visual tokens contain non-finite values".into()));
        }
        Ok(VisualTokens(z))
    }

    pub fn count(&self) -> usize {
        self.0.rows()
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }
}

/// `"VEMB <M> <C>\n"` followed by `M*C` little-endian f64, row-major.
pub fn encode_vemb(z: &VisualTokens) -> Vec<u8> {
    let mut out = format!("{VEMB_MAGIC} {} {}\n", z.count(), z.width()).into_bytes();
    for v in z.0.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_vemb(bytes: &[u8]) -> Result<VisualTokens> {
    let ingest = |offset: usize, message: String| Error::Ingest { offset, message };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ingest(0, "missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| ingest(0, "header is not ASCII".into()))?;
    let dims = match header.split(' ').collect::<Vec<_>>().as_slice() {
        [magic, m, c] if *magic == VEMB_MAGIC => m.parse::<usize>().ok().zip(c.parse::<usize>().ok()),
        _ => None,
    };
    let (m, c) = dims
        .filter(|&(m, c)| m >= 1 && c >= 1)
        .ok_or_else(|| ingest(0, format!("malformed header {header:?}, expected \"VEMB <M> <C>\" with M, C >= 1")))?;
    let start = nl + 1;
    let payload = &bytes[start..];
    let expected = m * c;
    if payload.len() != expected * 8 {
        return Err(ingest(
            start,
            format!(
                "expected {expected} values ({} bytes), found {} bytes",
                expected * 8,
                payload.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(expected);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        if !v.is_finite() {
            return Err(ingest(start + 8 * i, format!("non-finite value {v}")));
        }
        data.push(v);
    }
    VisualTokens::new(Tensor::new(vec![m, c], data)?)
}

pub fn save_visual_embeddings(path: &Path, z: &VisualTokens) -> Result<()> {
    fs::write(path, encode_vemb(z)).map_err(|e| Error::io(path, e))
}

pub fn load_visual_embeddings(path: &Path) -> Result<VisualTokens> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vemb(&bytes)
}

/// Linear map from visual embedding width C to the model width D.
#[derive(Clone, Debug)]
pub struct VisualProjection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl VisualProjection {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, visual_dim: usize, width: usize, rng: &mut R) -> Self {
        VisualProjection {
            weight: store.normal("visual.proj.weight", &[visual_dim, width], (1.0 / visual_dim as f64).sqrt(), rng),
            bias: store.zeros("visual.proj.bias", &[width]),
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, z: &VisualTokens) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        project_visual(tape, z, w, b)
    }
}

/// `v = z · proj + bias`.
pub fn project_visual(tape: &mut Tape, z: &VisualTokens, proj: Var, bias: Var) -> Result<Var> {
    let (c, d) = (tape.shape(proj)[0], tape.shape(proj)[1]);
    if z.width() != c || tape.value(bias).numel() != d {
        return Err(Error::shape("project_visual", z.0.shape(), tape.shape(proj)));
    }
    let zv = tape.constant(z.0.clone());
    let v = tape.matmul(zv, proj)?;
    tape.add_bias(v, bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Speech,
}

/// `[v_1..v_M, s_1..s_N]` with the index where speech begins.
#[derive(Clone, Debug)]
pub struct FusedSequence {
    pub x: Var,
    pub boundary: usize,
    pub len: usize,
}

impl FusedSequence {
    pub fn num_visual(&self) -> usize {
        self.boundary
    }

    pub fn num_speech(&self) -> usize {
        self.len - self.boundary
    }

    pub fn modality_mask(&self) -> Vec<Modality> {
        (0..self.len)
            .map(|i| if i < self.boundary { Modality::Visual } else { Modality::Speech })
            .collect()
    }

    /// Splits back into `(v, s)`; `v` is `None` in audio-only mode.
    pub fn split(&self, tape: &mut Tape) -> Result<(Option<Var>, Var)> {
        let v = if self.boundary > 0 {
            Some(tape.slice_rows(self.x, 0, self.boundary)?)
        } else {
            None
        };
        let s = tape.slice_rows(self.x, self.boundary, self.len)?;
        Ok((v, s))
    }
}

/// Concatenates visual tokens (if any) before speech tokens. `v = None`
/// gives the audio-only sequence.
pub fn fuse_concat(tape: &mut Tape, v: Option<Var>, s: Var) -> Result<FusedSequence> {
    let n = tape.shape(s)[0];
    match v {
        None => Ok(FusedSequence { x: s, boundary: 0, len: n }),
        Some(v) => {
            if tape.shape(v)[1] != tape.shape(s)[1] {
                return Err(Error::shape("fuse_concat", tape.shape(v), tape.shape(s)));
            }
            let m = tape.shape(v)[0];
            let x = tape.concat_rows(&[v, s])?;
            Ok(FusedSequence { x, boundary: m, len: m + n })
        }
    }
}
