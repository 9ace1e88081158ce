//! Central finite-difference checks of tape gradients.

use crate::error::Result;
use crate::params::{GradBuffer, ParamId, ParamStore};

/// Result of comparing one parameter tensor's analytic gradient with a
/// numeric one.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub rel_err: f64,
    pub max_abs_err: f64,
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`. When both norms are
/// below `floor` the absolute difference is returned instead, so exactly-zero
/// gradients do not divide by zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < floor {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Perturbs every entry of `ids` by `±h` and compares the central difference
/// of `loss` with `analytic`. `loss` must be a pure function of the store.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    analytic: &GradBuffer,
    h: f64,
    mut loss: F,
) -> Result<Vec<TensorCheck>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = store.clone();
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).numel();
        let mut numeric = vec![0.0; n];
        for i in 0..n {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        let analytic_vals = analytic
            .get(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let max_abs_err = analytic_vals
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        out.push(TensorCheck {
            name: store.name(id).to_string(),
            rel_err: relative_error(&analytic_vals, &numeric, 1e-7),
            max_abs_err,
        });
    }
    Ok(out)
}
