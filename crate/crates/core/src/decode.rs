//! Greedy decoding and word error rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, SpecialTokens};
use crate::params::ParamStore;
use crate::tensor::{log_softmax_rows, Tape, Tensor};

/// Decoded token ids (never special) and their summed log-probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Best single path: per-frame argmax, collapse repeats, drop blanks. The
/// score is the log-probability of that path.
pub fn ctc_greedy_decode(frame_logits: &Tensor, blank: usize) -> Hypothesis {
    let logp = log_softmax_rows(frame_logits);
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut prev = None;
    for t in 0..logp.rows() {
        let row = logp.row(t);
        let k = argmax(row);
        score += row[k];
        if k != blank && prev != Some(k) {
            tokens.push(k);
        }
        prev = Some(k);
    }
    Hypothesis { tokens, score }
}

/// Autoregressive argmax from sos until eos or `max_len` tokens. Special ids
/// other than eos are never chosen. The score sums the log-probabilities of
/// every chosen token, eos included.
pub fn attention_greedy_decode(model: &Model, store: &ParamStore, states: &Tensor, max_len: usize) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let sp: SpecialTokens = model.cfg.special;
    let mut prefix = vec![sp.sos];
    let mut score = 0.0;
    loop {
        let logits = step_logits(model, store, states, &prefix)?;
        let logp = log_softmax_rows(&logits);
        let row = logp.row(prefix.len() - 1);
        let mut best: Option<usize> = None;
        for (k, &v) in row.iter().enumerate() {
            if sp.contains(k) && k != sp.eos {
                continue;
            }
            if best.is_none_or(|b| v > row[b]) {
                best = Some(k);
            }
        }
        let k = best.expect("vocabulary has a non-special id");
        score += row[k];
        if k == sp.eos {
            break;
        }
        prefix.push(k);
        if prefix.len() > max_len {
            break;
        }
    }
    Ok(Hypothesis { tokens: prefix[1..].to_vec(), score })
}

/// Teacher-forced decoder logits for `prefix` on a fresh tape.
pub fn step_logits(model: &Model, store: &ParamStore, states: &Tensor, prefix: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(states.clone());
    let l = model.decode_teacher_forcing(store, &mut tape, s, prefix)?;
    Ok(tape.value(l).clone())
}

/// Edit operation in an alignment of hypothesis against reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    /// Reference position matched, correctly or not.
    Match { r: usize, h: usize },
    Sub { r: usize, h: usize },
    Del { r: usize },
    Ins { h: usize },
}

/// Unit-cost Levenshtein distance with one minimal alignment. Ties prefer
/// match/substitution, then deletion, then insertion.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> (usize, Vec<EditOp>) {
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut ops = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                ops.push(if same { EditOp::Match { r: i - 1, h: j - 1 } } else { EditOp::Sub { r: i - 1, h: j - 1 } });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(EditOp::Del { r: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Ins { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    (d[n][m], ops)
}

pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> usize {
    align(reference, hyp).0
}

/// Edit distance over reference length. Can exceed 1 through insertions.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Scoring("reference is empty".into()));
    }
    Ok(edit_distance(reference, hyp) as f64 / reference.len() as f64)
}

/// Error counts summed over a corpus; the corpus WER is `errors / ref_words`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerTally {
    pub errors: usize,
    pub ref_words: usize,
}

impl WerTally {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hyp: &[T]) -> Result<()> {
        if reference.is_empty() {
            return Err(Error::Scoring("reference is empty".into()));
        }
        self.errors += edit_distance(reference, hyp);
        self.ref_words += reference.len();
        Ok(())
    }

    pub fn wer(&self) -> Result<f64> {
        if self.ref_words == 0 {
            return Err(Error::Scoring("no reference words scored".into()));
        }
        Ok(self.errors as f64 / self.ref_words as f64)
    }
}

/// Hypothesis index aligned to each reference position (match or
/// substitution), `None` where the reference word was deleted.
pub fn aligned_positions<T: PartialEq>(reference: &[T], hyp: &[T]) -> Vec<Option<usize>> {
    let (_, ops) = align(reference, hyp);
    let mut out = vec![None; reference.len()];
    for op in ops {
        match op {
            EditOp::Match { r, h } | EditOp::Sub { r, h } => out[r] = Some(h),
            _ => {}
        }
    }
    out
}

/// For each reference position in `slots`, whether the aligned hypothesis
/// word equals it.
pub fn slot_hits<T: PartialEq>(reference: &[T], hyp: &[T], slots: &[usize]) -> Vec<bool> {
    let aligned = aligned_positions(reference, hyp);
    slots.iter().map(|&s| aligned[s].is_some_and(|h| hyp[h] == reference[s])).collect()
}
