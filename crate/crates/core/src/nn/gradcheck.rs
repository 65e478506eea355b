//! Finite-difference verification of the analytic training gradients.

use ndarray::Array2;

use super::tape::ParamId;
use super::train::{evaluate_batch, NegativePolicy, SequenceExample};
use super::OrdererModel;
use crate::error::{Error, Result};
use crate::vq::{Codebook, VqVariant};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor holding the worst entry.
    pub worst: String,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of the total objective on `probe` with
/// central differences, for every model parameter and codebook entry.
///
/// Quantization assignments and straight-through offsets are frozen at the
/// unperturbed point, so the reference objective is the smooth function whose
/// gradient the stop-gradient rules define: the transition loss sees
/// `z + (q - z)` with a constant offset, the commitment term moves only with
/// `z`, and the codebook term moves only with the codes.
pub fn grad_check(
    model: &OrdererModel,
    codebook: &Codebook,
    probe: &[SequenceExample],
    epsilon: f64,
    lambda_vq: f64,
    policy: NegativePolicy,
) -> Result<GradCheckReport> {
    if codebook.variant != VqVariant::Vanilla {
        return Err(Error::invalid("gradient check supports the vanilla codebook"));
    }
    let batch: Vec<&SequenceExample> = probe.iter().collect();
    let base = evaluate_batch(model, codebook, &batch, None, lambda_vq, policy, true)?;
    let (grads, cb_grads) = base.grads.expect("requested");
    let frozen = base.quant;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut note = |name: &str, analytic: f64, numeric: f64| {
        let e = relative_error(analytic, numeric);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = name.to_string();
        }
    };

    let mut m = model.clone();
    for (pi, g) in grads.0.iter().enumerate() {
        let id = ParamId(pi);
        let name = model.params.iter().nth(pi).expect("index in range").name.clone();
        for k in 0..g.len() {
            let numeric = central(epsilon, |delta| {
                let orig = flat(m.params.get(id))[k];
                set_flat(m.params.get_mut(id), k, orig + delta);
                let v = evaluate_batch(&m, codebook, &batch, Some(&frozen), lambda_vq, policy, false).map(|e| e.total);
                set_flat(m.params.get_mut(id), k, orig);
                v
            })?;
            note(&name, flat(g)[k], numeric);
        }
    }

    let mut cb = codebook.clone();
    for (b, g) in cb_grads.iter().enumerate() {
        let name = format!("codebook.book{b}");
        for k in 0..g.len() {
            let numeric = central(epsilon, |delta| {
                let orig = flat(&cb.books[b])[k];
                set_flat(&mut cb.books[b], k, orig + delta);
                let v = evaluate_batch(model, &cb, &batch, Some(&frozen), lambda_vq, policy, false).map(|e| e.total);
                set_flat(&mut cb.books[b], k, orig);
                v
            })?;
            note(&name, flat(g)[k], numeric);
        }
    }
    Ok(report)
}

/// Five-point central difference; truncation error is `O(eps^4)`, which
/// matters at the low temperatures the contrastive loss runs at.
fn central(eps: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let near = f(eps)? - f(-eps)?;
    let far = f(2.0 * eps)? - f(-2.0 * eps)?;
    Ok((8.0 * near - far) / (12.0 * eps))
}

fn flat(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn set_flat(a: &mut Array2<f64>, k: usize, v: f64) {
    a.as_slice_mut().expect("standard layout")[k] = v;
}
