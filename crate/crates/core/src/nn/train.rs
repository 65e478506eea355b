//! Training loops for the orderer.

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{info_nce, total_loss};
use super::optim::{clip_global_norm, AdamW, LinearSchedule};
use super::orderer::{text_tokens, OrdererModel};
use super::tape::{Grads, NodeId, Tape};
use crate::data::{EmbeddingTable, StoryboardExample};
use crate::error::{Error, Result};
use crate::vq::{Codebook, QuantizeResult, UsageTracker, VqVariant};

/// Which batch entries serve as negatives for a next-frame prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativePolicy {
    /// Frame targets of the other sequences in the batch, plus the end token
    /// (for frame predictions).
    OtherSequences,
    /// Every other target in the batch, including the sequence's own frames.
    AllTargets,
}

impl NegativePolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "other_sequences" => Ok(Self::OtherSequences),
            "all" | "all_targets" => Ok(Self::AllTargets),
            _ => Err(Error::invalid(format!("unknown negative policy {s:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::OtherSequences => "other_sequences",
            Self::AllTargets => "all_targets",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub weight_decay: f64,
    pub learning_rate: f64,
    /// Peak rate for the codebook rows, on the same schedule shape.
    pub codebook_learning_rate: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    pub lambda_vq: f64,
    pub negatives: NegativePolicy,
    pub seed: u64,
    /// Joint gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    /// Codes unused for this many steps are re-seeded from recent features; `0` disables.
    pub dead_code_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            weight_decay: 5e-2,
            learning_rate: 3e-4,
            codebook_learning_rate: 1e-2,
            warmup_fraction: 0.1,
            total_steps: 1000,
            lambda_vq: 1.0,
            negatives: NegativePolicy::OtherSequences,
            seed: 0,
            grad_clip: 1.0,
            dead_code_window: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2 for in-batch negatives"));
        }
        if !(self.lambda_vq >= 0.0) {
            return Err(Error::invalid("lambda_vq must be non-negative"));
        }
        if !(self.learning_rate >= 0.0) || !(self.codebook_learning_rate >= 0.0) || !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("learning rate must be >= 0 and warmup_fraction in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub trans: f64,
    pub vq: f64,
    pub tau: f64,
}

/// One training sequence in tensor form.
#[derive(Debug, Clone)]
pub struct SequenceExample {
    pub example_id: String,
    /// Text slots (see [`text_tokens`]).
    pub text: Array2<f64>,
    /// Raw frame embeddings in ground-truth order.
    pub frames: Array2<f64>,
}

pub fn frame_matrix(frames: &EmbeddingTable, ids: &[String]) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((ids.len(), frames.dim()));
    for (mut row, id) in m.rows_mut().into_iter().zip(ids) {
        row.assign(&ndarray::Array1::from(frames.vector(id)?));
    }
    Ok(m)
}

pub fn prepare_sequences(
    examples: &[StoryboardExample],
    texts: &EmbeddingTable,
    frames: &EmbeddingTable,
    max_text_tokens: usize,
) -> Result<Vec<SequenceExample>> {
    examples
        .iter()
        .map(|ex| {
            Ok(SequenceExample {
                example_id: ex.example_id.clone(),
                text: text_tokens(texts, &ex.text_id, max_text_tokens)?,
                frames: frame_matrix(frames, &ex.frame_ids)?,
            })
        })
        .collect()
}

/// Quantization of one sequence, held fixed while differentiating.
#[derive(Debug, Clone)]
pub(crate) struct Quantized {
    pub results: Vec<QuantizeResult>,
    pub z0: Array2<f64>,
    pub q0: Array2<f64>,
}

pub(crate) struct BatchEval {
    pub total: f64,
    pub trans: f64,
    pub vq: f64,
    pub grads: Option<(Grads, Vec<Array2<f64>>)>,
    pub quant: Vec<Option<Quantized>>,
}

pub(crate) fn quantize_rows(codebook: &Codebook, z: &Array2<f64>) -> Quantized {
    let results: Vec<QuantizeResult> = z.rows().into_iter().map(|r| codebook.quantize(&r.to_vec())).collect();
    let mut q0 = Array2::zeros(z.raw_dim());
    for (mut row, r) in q0.rows_mut().into_iter().zip(&results) {
        row.assign(&ndarray::ArrayView1::from(&r.code[..]));
    }
    Quantized {
        results,
        z0: z.clone(),
        q0,
    }
}

/// Code the codebook term pulls towards `z0`, as a function of the current
/// codebook (the stored code when the variant has no simple closed form).
fn codebook_side(codebook: &Codebook, q: &Quantized, row: usize) -> Vec<f64> {
    match codebook.variant {
        VqVariant::Vanilla => codebook.books[0].row(q.results[row].indices[0]).to_vec(),
        _ => q.q0.row(row).to_vec(),
    }
}

/// Total objective on a batch. With `frozen` the quantization assignments and
/// straight-through offsets are taken from it instead of being recomputed,
/// which makes the objective a smooth function of every parameter.
pub(crate) fn evaluate_batch(
    model: &OrdererModel,
    codebook: &Codebook,
    batch: &[&SequenceExample],
    frozen: Option<&[Option<Quantized>]>,
    lambda_vq: f64,
    policy: NegativePolicy,
    with_grads: bool,
) -> Result<BatchEval> {
    struct Run {
        tape: Tape,
        z: NodeId,
        preds: NodeId,
        targets: NodeId,
    }
    let use_vq = model.config.use_vq;
    let mut runs = Vec::with_capacity(batch.len());
    let mut quant = Vec::with_capacity(batch.len());
    for (b, ex) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let raw = tape.leaf(ex.frames.clone());
        let z = model.encode_frames_node(&mut tape, raw);
        let inputs = if use_vq {
            let q = match frozen {
                Some(f) => f[b].clone().expect("frozen quantization present"),
                None => quantize_rows(codebook, tape.value(z)),
            };
            let st = tape.straight_through(z, &q.q0, &q.z0);
            quant.push(Some(q));
            st
        } else {
            quant.push(None);
            z
        };
        let preds = model.forward_node(&mut tape, &ex.text, inputs)?;
        let eos = model.eos_node(&mut tape);
        let targets = tape.concat_rows(&[inputs, eos]);
        runs.push(Run { tape, z, preds, targets });
    }

    let rows: usize = runs.iter().map(|r| r.tape.value(r.preds).nrows()).sum();
    let dim = model.config.code_dim;
    let mut p = Array2::zeros((rows, dim));
    let mut t = Array2::zeros((rows, dim));
    let mut seq = Vec::with_capacity(rows);
    let mut is_eos = Vec::with_capacity(rows);
    let mut at = 0;
    for (b, r) in runs.iter().enumerate() {
        let n = r.tape.value(r.preds).nrows();
        p.slice_mut(s![at..at + n, ..]).assign(r.tape.value(r.preds));
        t.slice_mut(s![at..at + n, ..]).assign(r.tape.value(r.targets));
        seq.extend(std::iter::repeat_n(b, n));
        is_eos.extend((0..n).map(|k| k + 1 == n));
        at += n;
    }
    let tau = model.tau();
    let negative = |i: usize, j: usize| {
        if is_eos[j] {
            // the end token is one vector; count it once and never against itself
            !is_eos[i] && seq[i] == seq[j]
        } else {
            match policy {
                NegativePolicy::OtherSequences => seq[i] != seq[j],
                NegativePolicy::AllTargets => true,
            }
        }
    };
    let nce = info_nce(&p, &t, tau, negative);

    let n_frames: usize = batch.iter().map(|e| e.frames.nrows()).sum();
    let mut vq = 0.0;
    for (r, q) in runs.iter().zip(&quant) {
        let Some(q) = q else { continue };
        let z = r.tape.value(r.z);
        for k in 0..z.nrows() {
            let c = codebook_side(codebook, q, k);
            let cb: f64 = q.z0.row(k).iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
            let commit: f64 = z.row(k).iter().zip(q.q0.row(k)).map(|(a, b)| (a - b).powi(2)).sum();
            vq += cb + codebook.beta * commit;
        }
    }
    if use_vq {
        vq /= n_frames as f64;
    }
    let total = total_loss(nce.loss, vq, lambda_vq);

    let grads = if with_grads {
        let mut grads = model.params.zero_grads();
        let mut cb_grads: Vec<Array2<f64>> = codebook.books.iter().map(|b| Array2::zeros(b.raw_dim())).collect();
        let scale = lambda_vq / n_frames as f64;
        let mut at = 0;
        for (r, q) in runs.iter().zip(&quant) {
            let n = r.tape.value(r.preds).nrows();
            let mut seeds = vec![
                (r.preds, nce.d_queries.slice(s![at..at + n, ..]).to_owned()),
                (r.targets, nce.d_keys.slice(s![at..at + n, ..]).to_owned()),
            ];
            if let Some(q) = q {
                let z = r.tape.value(r.z);
                seeds.push((r.z, (z - &q.q0) * (2.0 * codebook.beta * scale)));
                if lambda_vq > 0.0 {
                    for (k, res) in q.results.iter().enumerate() {
                        codebook.accumulate_codebook_grad(&q.z0.row(k).to_vec(), res, scale, &mut cb_grads);
                    }
                }
            }
            r.tape.backward(&seeds, &mut grads);
            at += n;
        }
        grads.get_mut(model.log_tau_id())[[0, 0]] += nce.d_tau * tau;
        Some((grads, cb_grads))
    } else {
        None
    };
    Ok(BatchEval {
        total,
        trans: nce.loss,
        vq,
        grads,
        quant,
    })
}

/// Cycles through shuffled epochs of indices.
pub(crate) struct Batcher {
    order: Vec<usize>,
    at: usize,
    pub epoch: usize,
}

impl Batcher {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            at: n,
            epoch: 0,
        }
    }

    pub fn next(&mut self, size: usize, rng: &mut impl Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.at == self.order.len() {
                self.order.shuffle(rng);
                self.at = 0;
                self.epoch += 1;
            }
            let i = self.order[self.at];
            self.at += 1;
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }
}

const RECENT_FEATURES: usize = 1024;

/// Trains the orderer and its codebook jointly. Returns the per-step loss curve.
pub fn train_orderer(
    model: &mut OrdererModel,
    codebook: &mut Codebook,
    data: &[SequenceExample],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::invalid("training needs at least two sequences"));
    }
    if codebook.code_dim != model.config.code_dim {
        return Err(Error::Shape(format!(
            "codebook dim {} differs from model code dim {}",
            codebook.code_dim, model.config.code_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sched = LinearSchedule::new(cfg.learning_rate, cfg.warmup_fraction, cfg.total_steps);
    let cb_sched = LinearSchedule::new(cfg.codebook_learning_rate, cfg.warmup_fraction, cfg.total_steps);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut batcher = Batcher::new(data.len());
    let sizes: Vec<usize> = codebook.books.iter().map(|b| b.nrows()).collect();
    let mut usage = UsageTracker::new(&sizes);
    let mut recent: Vec<Vec<f64>> = Vec::with_capacity(RECENT_FEATURES);
    let mut recent_at = 0;
    let train_codebook = model.config.use_vq && cfg.lambda_vq > 0.0;
    let n_params = model.params.len();
    let mut curve = Vec::with_capacity(cfg.total_steps);

    for step in 0..cfg.total_steps {
        let idx = batcher.next(cfg.batch_size, &mut rng);
        let batch: Vec<&SequenceExample> = idx.iter().map(|&i| &data[i]).collect();
        let eval = evaluate_batch(model, codebook, &batch, None, cfg.lambda_vq, cfg.negatives, true)?;
        let (mut grads, mut cb_grads) = eval.grads.expect("requested");
        if !eval.total.is_finite() || !grads.all_finite() {
            return Err(Error::Divergence { step, loss: eval.total });
        }
        if cfg.grad_clip > 0.0 {
            let mut all: Vec<&mut Array2<f64>> = grads.0.iter_mut().collect();
            if train_codebook {
                all.extend(cb_grads.iter_mut());
            }
            clip_global_norm(&mut all, cfg.grad_clip);
        }
        let lr = sched.lr(step);
        opt.tick();
        opt.step_params(&mut model.params, &grads, lr, 0);
        model.clamp_tau();
        if train_codebook {
            for (b, (book, g)) in codebook.books.iter_mut().zip(&cb_grads).enumerate() {
                opt.update(n_params + b, book, g, cb_sched.lr(step), false);
            }
            codebook.renormalize();
            for q in eval.quant.iter().flatten() {
                for (k, r) in q.results.iter().enumerate() {
                    record_usage(&mut usage, codebook, r, step);
                    let f = q.z0.row(k).to_vec();
                    if recent.len() < RECENT_FEATURES {
                        recent.push(f);
                    } else {
                        recent[recent_at] = f;
                        recent_at = (recent_at + 1) % RECENT_FEATURES;
                    }
                }
            }
            if cfg.dead_code_window > 0 && step > 0 && step % cfg.dead_code_window == 0 && !recent.is_empty() {
                reseed_dead_codes(codebook, &mut usage, &recent, step, cfg.dead_code_window, &mut rng);
            }
        }
        curve.push(LossRecord {
            step,
            total: eval.total,
            trans: eval.trans,
            vq: eval.vq,
            tau: model.tau(),
        });
    }
    Ok(curve)
}

fn record_usage(usage: &mut UsageTracker, codebook: &Codebook, r: &QuantizeResult, step: usize) {
    match codebook.variant {
        VqVariant::Hierarchical { .. } => {
            usage.record(0, r.indices[0], step);
            usage.record(1, codebook.leaf_index(r), step);
        }
        _ => {
            for (b, &i) in r.indices.iter().enumerate() {
                usage.record(b, i, step);
            }
        }
    }
}

fn reseed_dead_codes(
    codebook: &mut Codebook,
    usage: &mut UsageTracker,
    recent: &[Vec<f64>],
    step: usize,
    window: usize,
    rng: &mut impl Rng,
) {
    for b in 0..codebook.books.len() {
        for row in usage.dead_rows(b, step, window) {
            let f = &recent[rng.random_range(0..recent.len())];
            codebook.books[b].row_mut(row).assign(&ndarray::ArrayView1::from(&f[..]));
            usage.record(b, row, step);
        }
    }
    codebook.renormalize();
}

/// Mean objective on `data` without updating anything.
pub fn evaluate_loss(
    model: &OrdererModel,
    codebook: &Codebook,
    data: &[SequenceExample],
    batch_size: usize,
    lambda_vq: f64,
    policy: NegativePolicy,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for chunk in data.chunks(batch_size.max(2)) {
        let batch: Vec<&SequenceExample> = chunk.iter().collect();
        sum += evaluate_batch(model, codebook, &batch, None, lambda_vq, policy, false)?.total;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}
