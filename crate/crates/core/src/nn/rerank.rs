//! Permutation predictor: one bidirectional block over the synopsis and the
//! unordered frames, then per-slot pointer distributions over input frames.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{gaussian, Block, LayerNorm, Linear};
use super::optim::{clip_global_norm, AdamW, LinearSchedule};
use super::tape::{Grads, Mask, NodeId, ParamId, ParamSet, Tape};
use super::train::{Batcher, LossRecord, SequenceExample, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RerankConfig {
    pub text_dim: usize,
    pub frame_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub max_text_tokens: usize,
    pub max_frames: usize,
}

impl RerankConfig {
    pub fn new(text_dim: usize, frame_dim: usize) -> Self {
        Self {
            text_dim,
            frame_dim,
            model_dim: 64,
            heads: 4,
            max_text_tokens: 32,
            max_frames: 20,
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("rerank.text_dim".to_string(), self.text_dim.to_string()),
            ("rerank.frame_dim".to_string(), self.frame_dim.to_string()),
            ("rerank.model_dim".to_string(), self.model_dim.to_string()),
            ("rerank.heads".to_string(), self.heads.to_string()),
            ("rerank.max_text_tokens".to_string(), self.max_text_tokens.to_string()),
            ("rerank.max_frames".to_string(), self.max_frames.to_string()),
        ])
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid(format!("checkpoint config lacks a valid {k}")))
        };
        Ok(Self {
            text_dim: get("rerank.text_dim")?,
            frame_dim: get("rerank.frame_dim")?,
            model_dim: get("rerank.model_dim")?,
            heads: get("rerank.heads")?,
            max_text_tokens: get("rerank.max_text_tokens")?,
            max_frames: get("rerank.max_frames")?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RerankModel {
    pub config: RerankConfig,
    pub params: ParamSet,
    text_in: Linear,
    frame_in: Linear,
    text_pos: ParamId,
    frame_type: ParamId,
    block: Block,
    final_ln: LayerNorm,
    slots: ParamId,
    wq: ParamId,
    wk: ParamId,
}

impl RerankModel {
    pub fn new(config: RerankConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if c.heads == 0 || c.model_dim % c.heads != 0 {
            return Err(Error::invalid("rerank model_dim must be divisible by heads"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = c.model_dim;
        let text_in = Linear::xavier(&mut params, "rerank.text_in", c.text_dim, d, true, &mut rng);
        let frame_in = Linear::xavier(&mut params, "rerank.frame_in", c.frame_dim, d, true, &mut rng);
        let text_pos = params.add("rerank.text_pos", gaussian(&mut rng, c.max_text_tokens + 2, d, 0.02), false);
        let frame_type = params.add("rerank.frame_type", gaussian(&mut rng, 1, d, 0.02), false);
        let block = Block::new(&mut params, "rerank.block", d, c.heads, false, 1, &mut rng);
        let final_ln = LayerNorm::new(&mut params, "rerank.final_ln", d);
        let slots = params.add("rerank.slots", gaussian(&mut rng, c.max_frames, d, 1.0), false);
        let std = 1.0 / (d as f64).sqrt();
        let wq = params.add("rerank.wq", gaussian(&mut rng, d, d, std), true);
        let wk = params.add("rerank.wk", gaussian(&mut rng, d, d, std), true);
        Ok(Self {
            config,
            params,
            text_in,
            frame_in,
            text_pos,
            frame_type,
            block,
            final_ln,
            slots,
            wq,
            wk,
        })
    }

    /// `m x m` logits: row `s` scores every input frame for output slot `s`.
    fn logits_node(&self, tape: &mut Tape, text: &Array2<f64>, frames: &Array2<f64>) -> Result<NodeId> {
        let (n, m) = (text.nrows(), frames.nrows());
        if m == 0 || m > self.config.max_frames || n > self.config.max_text_tokens + 2 {
            return Err(Error::invalid(format!("rerank input of {n} text slots and {m} frames is out of range")));
        }
        let p = &self.params;
        let t = tape.leaf(text.clone());
        let t = self.text_in.apply(tape, p, t);
        let pos = tape.param(p, self.text_pos);
        let pos = tape.slice_rows(pos, 0, n);
        let t = tape.add(t, pos);
        let f = tape.leaf(frames.clone());
        let f = self.frame_in.apply(tape, p, f);
        let ty = tape.param(p, self.frame_type);
        let f = tape.add_row(f, ty);
        let x = tape.concat_rows(&[t, f]);
        let mask: Mask = Arc::new(Array2::from_elem((n + m, n + m), true));
        let x = self.block.apply(tape, p, x, &mask, None);
        let x = self.final_ln.apply(tape, p, x);
        let h = tape.slice_rows(x, n, m);
        let wk = tape.param(p, self.wk);
        let k = tape.matmul(h, wk);
        let slots = tape.param(p, self.slots);
        let s = tape.slice_rows(slots, 0, m);
        let wq = tape.param(p, self.wq);
        let q = tape.matmul(s, wq);
        let l = tape.matmul_t(q, k);
        Ok(tape.scale(l, 1.0 / (self.config.model_dim as f64).sqrt()))
    }

    /// Per-slot probabilities over input frames.
    pub fn slot_probs(&self, text: &Array2<f64>, frames: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let l = self.logits_node(&mut tape, text, frames)?;
        let mut p = tape.value(l).clone();
        for mut row in p.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - max).exp());
            let z = row.sum();
            row /= z;
        }
        Ok(p)
    }

    /// Input positions in predicted order.
    pub fn predict_order(&self, text: &Array2<f64>, frames: &Array2<f64>) -> Result<Vec<usize>> {
        Ok(assign_greedy(&self.slot_probs(text, frames)?))
    }

    /// Cross-entropy of the true positions; `targets[s]` is the input row
    /// that belongs in slot `s`. Returns the mean loss over slots and adds
    /// `weight`-scaled gradients into `grads`.
    fn loss_and_grads(
        &self,
        text: &Array2<f64>,
        frames: &Array2<f64>,
        targets: &[usize],
        weight: f64,
        grads: &mut Grads,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.logits_node(&mut tape, text, frames)?;
        let logits = tape.value(l);
        let m = logits.nrows();
        let mut d = Array2::zeros(logits.raw_dim());
        let mut loss = 0.0;
        for s in 0..m {
            let row = logits.row(s);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            loss += max + z.ln() - row[targets[s]];
            for j in 0..m {
                let p = (row[j] - max).exp() / z;
                d[[s, j]] = (p - f64::from(u8::from(j == targets[s]))) * weight / m as f64;
            }
        }
        tape.backward(&[(l, d)], grads);
        Ok(loss / m as f64)
    }
}

/// Slot-to-input assignment taking the most confident remaining pair first.
/// Ties go to the lower slot, then the lower input position.
pub fn assign_greedy(probs: &Array2<f64>) -> Vec<usize> {
    let m = probs.nrows();
    let mut pairs: Vec<(usize, usize)> = (0..m).flat_map(|s| (0..probs.ncols()).map(move |j| (s, j))).collect();
    pairs.sort_by(|a, b| probs[[b.0, b.1]].total_cmp(&probs[[a.0, a.1]]).then(a.cmp(b)));
    let mut slot_of = vec![usize::MAX; m];
    let mut used = vec![false; probs.ncols()];
    let mut left = m.min(probs.ncols());
    for (s, j) in pairs {
        if left == 0 {
            break;
        }
        if slot_of[s] == usize::MAX && !used[j] {
            slot_of[s] = j;
            used[j] = true;
            left -= 1;
        }
    }
    slot_of
}

/// Trains on shuffled copies of each sequence, re-shuffling every time an
/// example is drawn.
pub fn train_rerank(model: &mut RerankModel, data: &[SequenceExample], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training needs at least one sequence"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sched = LinearSchedule::new(cfg.learning_rate, cfg.warmup_fraction, cfg.total_steps);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut batcher = Batcher::new(data.len());
    let mut curve = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let idx = batcher.next(cfg.batch_size, &mut rng);
        let mut grads = model.params.zero_grads();
        let mut loss = 0.0;
        let w = 1.0 / idx.len() as f64;
        for &i in &idx {
            let ex = &data[i];
            let m = ex.frames.nrows();
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(&mut rng);
            let shuffled = ex.frames.select(ndarray::Axis(0), &perm);
            let mut targets = vec![0; m];
            for (pos, &orig) in perm.iter().enumerate() {
                targets[orig] = pos;
            }
            loss += w * model.loss_and_grads(&ex.text, &shuffled, &targets, w, &mut grads)?;
        }
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if cfg.grad_clip > 0.0 {
            let mut all: Vec<&mut Array2<f64>> = grads.0.iter_mut().collect();
            clip_global_norm(&mut all, cfg.grad_clip);
        }
        opt.tick();
        opt.step_params(&mut model.params, &grads, sched.lr(step), 0);
        curve.push(LossRecord {
            step,
            total: loss,
            trans: loss,
            vq: 0.0,
            tau: 0.0,
        });
    }
    Ok(curve)
}
