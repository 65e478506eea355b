//! Contrastive objectives with closed-form gradients.

use ndarray::Array2;

use crate::linalg::dot;

/// Loss value plus gradients with respect to both sides and the temperature.
#[derive(Debug, Clone)]
pub struct Contrastive {
    pub loss: f64,
    pub d_queries: Array2<f64>,
    pub d_keys: Array2<f64>,
    pub d_tau: f64,
}

/// InfoNCE where query `i`'s positive is key `i` and its negatives are the
/// keys `j != i` with `negative(i, j)`. Averaged over queries.
pub fn info_nce(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    tau: f64,
    negative: impl Fn(usize, usize) -> bool,
) -> Contrastive {
    assert_eq!(queries.dim(), keys.dim(), "one key per query");
    let n = queries.nrows();
    let mut out = Contrastive {
        loss: 0.0,
        d_queries: Array2::zeros(queries.raw_dim()),
        d_keys: Array2::zeros(keys.raw_dim()),
        d_tau: 0.0,
    };
    if n == 0 {
        return out;
    }
    let sims = queries.dot(&keys.t());
    let inv_n = 1.0 / n as f64;
    let mut cand = Vec::new();
    for i in 0..n {
        cand.clear();
        cand.push(i);
        cand.extend((0..n).filter(|&j| j != i && negative(i, j)));
        let max = cand.iter().map(|&j| sims[[i, j]] / tau).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = cand.iter().map(|&j| (sims[[i, j]] / tau - max).exp()).sum();
        out.loss += (max + z.ln() - sims[[i, i]] / tau) * inv_n;
        for &j in &cand {
            let p = (sims[[i, j]] / tau - max).exp() / z;
            let g = (p - f64::from(u8::from(j == i))) * inv_n;
            if g == 0.0 {
                continue;
            }
            out.d_tau -= g * sims[[i, j]] / (tau * tau);
            let s = g / tau;
            out.d_queries.row_mut(i).scaled_add(s, &keys.row(j));
            out.d_keys.row_mut(j).scaled_add(s, &queries.row(i));
        }
    }
    out
}

/// Next-frame contrastive loss with explicit negatives per prediction:
/// mean over predictions of `-log softmax` of the target among
/// `{target} ∪ negatives`.
pub fn nce_loss(predictions: &[Vec<f64>], targets: &[Vec<f64>], negatives: &[Vec<Vec<f64>>], tau: f64) -> f64 {
    assert_eq!(predictions.len(), targets.len());
    assert_eq!(predictions.len(), negatives.len());
    if predictions.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for ((p, t), negs) in predictions.iter().zip(targets).zip(negatives) {
        let pos = dot(p, t) / tau;
        let logits: Vec<f64> = std::iter::once(pos).chain(negs.iter().map(|n| dot(p, n) / tau)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - pos;
    }
    total / predictions.len() as f64
}

/// Symmetric image-text alignment loss over a batch of matched rows.
///
/// Returns gradients with respect to the text rows (`d_queries`) and the
/// image rows (`d_keys`).
pub fn align_loss(text: &Array2<f64>, image: &Array2<f64>, tau: f64) -> Contrastive {
    let i2t = info_nce(image, text, tau, |_, _| true);
    let t2i = info_nce(text, image, tau, |_, _| true);
    Contrastive {
        loss: 0.5 * (i2t.loss + t2i.loss),
        d_queries: 0.5 * (t2i.d_queries + i2t.d_keys),
        d_keys: 0.5 * (t2i.d_keys + i2t.d_queries),
        d_tau: 0.5 * (i2t.d_tau + t2i.d_tau),
    }
}

pub fn total_loss(trans_loss: f64, vq_loss: f64, lambda_vq: f64) -> f64 {
    trans_loss + lambda_vq * vq_loss
}
