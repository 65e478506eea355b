//! Learned text/frame projections for retrieval.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::gaussian;
use super::loss::align_loss;
use super::optim::{clip_global_norm, AdamW, LinearSchedule};
use super::orderer::{TAU_INIT, TAU_MAX, TAU_MIN};
use super::tape::{ParamId, ParamSet, Tape};
use super::train::{Batcher, LossRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub text_dim: usize,
    pub frame_dim: usize,
    pub shared_dim: usize,
}

impl HeadConfig {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("head.text_dim".to_string(), self.text_dim.to_string()),
            ("head.frame_dim".to_string(), self.frame_dim.to_string()),
            ("head.shared_dim".to_string(), self.shared_dim.to_string()),
        ])
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid(format!("checkpoint config lacks a valid {k}")))
        };
        Ok(Self {
            text_dim: get("head.text_dim")?,
            frame_dim: get("head.frame_dim")?,
            shared_dim: get("head.shared_dim")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalHead {
    pub config: HeadConfig,
    pub params: ParamSet,
    text_proj: ParamId,
    frame_proj: ParamId,
    log_tau: ParamId,
}

fn init_proj(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    if fan_in == fan_out {
        Array2::eye(fan_in) + gaussian(rng, fan_in, fan_out, 0.01)
    } else {
        gaussian(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
    }
}

impl RetrievalHead {
    /// Square projections start near the identity, so an untrained head
    /// ranks like raw cosine similarity.
    pub fn new(config: HeadConfig, seed: u64) -> Result<Self> {
        if config.text_dim == 0 || config.frame_dim == 0 || config.shared_dim == 0 {
            return Err(Error::invalid("head dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let text_proj = params.add("head.text_proj", init_proj(&mut rng, config.text_dim, config.shared_dim), true);
        let frame_proj = params.add("head.frame_proj", init_proj(&mut rng, config.frame_dim, config.shared_dim), true);
        let log_tau = params.add("head.log_tau", Array2::from_elem((1, 1), TAU_INIT.ln()), false);
        Ok(Self {
            config,
            params,
            text_proj,
            frame_proj,
            log_tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.params.get(self.log_tau)[[0, 0]].exp()
    }

    fn project(&self, proj: ParamId, v: &[f64]) -> Vec<f64> {
        let w = self.params.get(proj);
        let out = ndarray::ArrayView1::from(v).dot(w);
        linalg::normalized(out.as_slice().expect("contiguous")).unwrap_or_else(|| vec![0.0; out.len()])
    }

    pub fn embed_text(&self, v: &[f64]) -> Vec<f64> {
        self.project(self.text_proj, v)
    }

    pub fn embed_frame(&self, v: &[f64]) -> Vec<f64> {
        self.project(self.frame_proj, v)
    }

    /// Loss and parameter gradients on matched rows.
    fn batch_loss(&self, text: Array2<f64>, frames: Array2<f64>) -> (f64, super::tape::Grads) {
        let mut tape = Tape::new();
        let t = tape.leaf(text);
        let f = tape.leaf(frames);
        let wt = tape.param(&self.params, self.text_proj);
        let wf = tape.param(&self.params, self.frame_proj);
        let t = tape.matmul(t, wt);
        let t = tape.row_normalize(t);
        let f = tape.matmul(f, wf);
        let f = tape.row_normalize(f);
        let tau = self.tau();
        let r = align_loss(tape.value(t), tape.value(f), tau);
        let mut grads = self.params.zero_grads();
        tape.backward(&[(t, r.d_queries), (f, r.d_keys)], &mut grads);
        grads.get_mut(self.log_tau)[[0, 0]] += r.d_tau * tau;
        (r.loss, grads)
    }
}

/// One training pair source: a text vector and the frames of its sequence.
#[derive(Debug, Clone)]
pub struct RetrievalExample {
    pub text: Vec<f64>,
    pub frames: Vec<Vec<f64>>,
}

/// Optimizes the alignment loss with in-batch negatives; each example's
/// positive frame is re-drawn at the start of every epoch.
pub fn train_retrieval_head(head: &mut RetrievalHead, data: &[RetrievalExample], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::invalid("training needs at least two examples"));
    }
    if data.iter().any(|e| e.frames.is_empty()) {
        return Err(Error::invalid("every retrieval example needs a frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sched = LinearSchedule::new(cfg.learning_rate, cfg.warmup_fraction, cfg.total_steps);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut batcher = Batcher::new(data.len());
    let mut positives = vec![0usize; data.len()];
    let mut epoch = usize::MAX;
    let mut curve = Vec::with_capacity(cfg.total_steps);
    let (td, fd) = (head.config.text_dim, head.config.frame_dim);
    for step in 0..cfg.total_steps {
        let idx = batcher.next(cfg.batch_size, &mut rng);
        if batcher.epoch != epoch {
            epoch = batcher.epoch;
            for (p, e) in positives.iter_mut().zip(data) {
                *p = rng.random_range(0..e.frames.len());
            }
        }
        let mut text = Array2::zeros((idx.len(), td));
        let mut frames = Array2::zeros((idx.len(), fd));
        for (r, &i) in idx.iter().enumerate() {
            text.row_mut(r).assign(&ndarray::ArrayView1::from(&data[i].text[..]));
            frames.row_mut(r).assign(&ndarray::ArrayView1::from(&data[i].frames[positives[i]][..]));
        }
        let (loss, mut grads) = head.batch_loss(text, frames);
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if cfg.grad_clip > 0.0 {
            let mut all: Vec<&mut Array2<f64>> = grads.0.iter_mut().collect();
            clip_global_norm(&mut all, cfg.grad_clip);
        }
        opt.tick();
        opt.step_params(&mut head.params, &grads, sched.lr(step), 0);
        let lt = head.params.get_mut(head.log_tau);
        lt[[0, 0]] = lt[[0, 0]].clamp(TAU_MIN.ln(), TAU_MAX.ln());
        curve.push(LossRecord {
            step,
            total: loss,
            trans: loss,
            vq: 0.0,
            tau: head.tau(),
        });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_head_starts_near_identity() {
        let head = RetrievalHead::new(
            HeadConfig {
                text_dim: 4,
                frame_dim: 4,
                shared_dim: 4,
            },
            1,
        )
        .unwrap();
        let v = [0.5, 0.5, 0.5, 0.5];
        let e = head.embed_text(&v);
        assert!(linalg::dot(&e, &v) > 0.99);
        assert!((linalg::norm(&e) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn head_grads_match_differences() {
        let head = RetrievalHead::new(
            HeadConfig {
                text_dim: 3,
                frame_dim: 4,
                shared_dim: 2,
            },
            3,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let text = gaussian(&mut rng, 3, 3, 1.0);
        let frames = gaussian(&mut rng, 3, 4, 1.0);
        let (_, grads) = head.batch_loss(text.clone(), frames.clone());
        let eps = 1e-5;
        for (pi, g) in grads.0.iter().enumerate() {
            for k in 0..g.len() {
                let mut h = head.clone();
                let id = ParamId(pi);
                h.params.get_mut(id).as_slice_mut().unwrap()[k] += eps;
                let up = h.batch_loss(text.clone(), frames.clone()).0;
                h.params.get_mut(id).as_slice_mut().unwrap()[k] -= 2.0 * eps;
                let down = h.batch_loss(text.clone(), frames.clone()).0;
                let num = (up - down) / (2.0 * eps);
                let ana = g.as_slice().unwrap()[k];
                assert!((num - ana).abs() < 1e-6 * (1.0 + ana.abs()), "{pi}/{k}: {num} vs {ana}");
            }
        }
    }
}
