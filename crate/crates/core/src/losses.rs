//! Training objectives: attention cross-entropy, CTC, and their weighted sum
//! with the load-balancing term.

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, Tape, Tensor, Var};

/// Default weight of the CTC term.
pub const DEFAULT_ALPHA: f64 = 0.3;
/// Default weight of the load-balancing term.
pub const DEFAULT_BETA: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub l_att: f64,
    pub l_ctc: f64,
    pub l_aux: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Composes `l_att + alpha·l_ctc + beta·l_aux`, with `l_aux` the mean over
/// MoE layers (zero when there are none).
pub fn total_loss(l_att: f64, l_ctc: f64, aux_per_layer: &[f64], alpha: f64, beta: f64) -> LossBundle {
    let l_aux = if aux_per_layer.is_empty() {
        0.0
    } else {
        aux_per_layer.iter().sum::<f64>() / aux_per_layer.len() as f64
    };
    LossBundle {
        l_att,
        l_ctc,
        l_aux,
        l_total: l_att + alpha * l_ctc + beta * l_aux,
        alpha,
        beta,
    }
}

/// Summed negative log-likelihood of `targets` under row-wise softmax of
/// `logits` (U × V), skipping positions equal to `pad`.
pub fn attention_loss(tape: &mut Tape, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
    let (u, v) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    if targets.len() != u {
        return Err(Error::shape("attention_loss", tape.shape(logits), &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::Input(format!("target id {bad} out of range for vocabulary of {v}")));
    }
    let picks: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .filter(|(_, &y)| y != pad)
        .map(|(i, &y)| (i, y))
        .collect();
    let logp = tape.log_softmax_rows(logits);
    if picks.is_empty() {
        let zero = tape.scale(logp, 0.0);
        let s = tape.sum(zero);
        return Ok(s);
    }
    let picked = tape.gather_elements(logp, &picks)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0))
}

/// Minimum number of frames a CTC alignment of `target` needs: one per label
/// plus a separating blank between equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Output of the CTC forward-backward pass.
#[derive(Clone, Debug)]
pub struct CtcResult {
    /// `-ln P(target | logits)`.
    pub loss: f64,
    /// Gradient of `loss` with respect to the (pre-softmax) logits.
    pub grad: Tensor,
}

/// Log-space CTC over the blank-interleaved label sequence. `logits` are
/// N × V unnormalized scores; `target` must not contain `blank`.
pub fn ctc_forward_backward(logits: &Tensor, target: &[usize], blank: usize) -> Result<CtcResult> {
    let (n, v) = (logits.rows(), logits.cols());
    if let Some(&bad) = target.iter().find(|&&y| y == blank || y >= v) {
        return Err(Error::Input(format!("ctc target contains invalid label {bad}")));
    }
    let required = ctc_min_frames(target);
    if n < required || n == 0 {
        return Err(Error::CtcInfeasible {
            frames: n,
            required: required.max(1),
        });
    }
    let lp = log_softmax_rows(logits);
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&y| [y, blank]))
        .collect();
    let s_len = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; n * s_len];
    alpha[0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp.get(0, ext[1]);
    }
    for t in 1..n {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp.get(t, ext[s]) };
        }
    }
    let last = (n - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Err(Error::Numeric("ctc path probability underflowed".into()));
    }

    // beta[t][s]: log-probability of emitting frames t+1.. given state s at t.
    let mut beta = vec![ninf; n * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..n - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp.get(t + 1, ext[s]);
            if s + 1 < s_len {
                b = log_add(b, beta[next + s + 1] + lp.get(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[next + s + 2] + lp.get(t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = b;
        }
    }

    // d(-ln P)/d logit[t,k] = softmax[t,k] - posterior occupancy of label k at t.
    let mut grad = vec![0.0; n * v];
    for t in 0..n {
        let mut occ = vec![ninf; v];
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            occ[ext[s]] = log_add(occ[ext[s]], a + b - log_p);
        }
        for k in 0..v {
            grad[t * v + k] = lp.get(t, k).exp() - occ[k].exp();
        }
    }
    Ok(CtcResult {
        loss: -log_p,
        grad: Tensor::new(vec![n, v], grad)?,
    })
}

/// CTC negative log-likelihood as a tape node.
pub fn ctc_loss(tape: &mut Tape, frame_logits: Var, target: &[usize], blank: usize) -> Result<Var> {
    let r = ctc_forward_backward(tape.value(frame_logits), target, blank)?;
    tape.fixed_grad_scalar(frame_logits, r.loss, r.grad)
}
