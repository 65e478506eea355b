//! Inference-time ordering with the trained orderer and the re-ranker.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::nn::{frame_matrix, text_tokens, OrdererModel, RerankModel};
use crate::vq::Codebook;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OrderingResult {
    pub ordered_ids: Vec<String>,
    pub stopped_by_eos: bool,
    /// Similarity of each chosen candidate at the step it was chosen.
    pub scores: Vec<f64>,
}

impl OrderingResult {
    /// Appends the `pool` ids not yet chosen, keeping their pool order.
    pub fn complete_from(mut self, pool: &[String]) -> Self {
        let chosen: std::collections::HashSet<String> = self.ordered_ids.iter().cloned().collect();
        self.ordered_ids.extend(pool.iter().filter(|id| !chosen.contains(*id)).cloned());
        self
    }
}

/// One prediction line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub ordered_ids: Vec<String>,
    pub stopped_by_eos: bool,
}

pub fn write_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::invalid(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DecodeOptions {
    /// Defaults to the pool size.
    pub max_steps: Option<usize>,
    /// When false decoding runs until the pool is empty.
    pub allow_eos: bool,
}

/// Candidate codes as the decoder sees them: encoded, normalized and (when
/// the model uses quantization) replaced by their codebook codes.
pub fn candidate_codes(model: &OrdererModel, codebook: &Codebook, raw: &Array2<f64>) -> Array2<f64> {
    let z = model.encode_frames(raw);
    if !model.config.use_vq {
        return z;
    }
    let mut q = z.clone();
    for mut row in q.rows_mut() {
        let code = codebook.quantize(&row.to_vec()).code;
        row.assign(&ndarray::ArrayView1::from(&code[..]));
    }
    q
}

/// Greedy autoregressive decoding with pool deletion. At each step the
/// prediction is compared with every remaining candidate code (and the end
/// token when allowed); ties go to the lowest candidate id, and the end token
/// must beat every candidate strictly.
pub fn order_vq_trans(
    model: &OrdererModel,
    codebook: &Codebook,
    text_id: &str,
    candidates: &[String],
    texts: &EmbeddingTable,
    frames: &EmbeddingTable,
    opts: DecodeOptions,
) -> Result<OrderingResult> {
    let raw = frame_matrix(frames, candidates)?;
    let mut result = OrderingResult::default();
    if candidates.is_empty() {
        return Ok(result);
    }
    let max_steps = opts.max_steps.unwrap_or(candidates.len());
    if max_steps == 0 {
        return Err(Error::invalid("max_steps must be at least 1"));
    }
    let text = text_tokens(texts, text_id, model.config.max_text_tokens)?;
    let codes = candidate_codes(model, codebook, &raw);
    let eos = model.eos();
    let mut remaining: Vec<usize> = (0..candidates.len()).collect();
    remaining.sort_by(|&a, &b| candidates[a].cmp(&candidates[b]));
    let mut history: Vec<usize> = Vec::new();
    let limit = max_steps.min(candidates.len()).min(model.config.max_frames);
    while !remaining.is_empty() && history.len() < limit {
        let inputs = codes.select(ndarray::Axis(0), &history);
        let pred = model.predict_next(&text, &inputs)?;
        let (mut best, mut best_score) = (0, f64::NEG_INFINITY);
        for (slot, &c) in remaining.iter().enumerate() {
            let s = dot(&pred, codes.row(c).as_slice().expect("contiguous"));
            if s > best_score {
                best = slot;
                best_score = s;
            }
        }
        if opts.allow_eos && dot(&pred, &eos) > best_score {
            result.stopped_by_eos = true;
            break;
        }
        let c = remaining.remove(best);
        history.push(c);
        result.ordered_ids.push(candidates[c].clone());
        result.scores.push(best_score);
    }
    Ok(result)
}

/// Orders every candidate with the re-ranking model.
pub fn order_rerank(
    model: &RerankModel,
    text_id: &str,
    candidates: &[String],
    texts: &EmbeddingTable,
    frames: &EmbeddingTable,
) -> Result<OrderingResult> {
    if candidates.is_empty() {
        return Err(Error::invalid("re-ranking needs at least one candidate"));
    }
    let text = text_tokens(texts, text_id, model.config.max_text_tokens)?;
    let raw = frame_matrix(frames, candidates)?;
    let probs = model.slot_probs(&text, &raw)?;
    let order = crate::nn::rerank::assign_greedy(&probs);
    Ok(OrderingResult {
        ordered_ids: order.iter().map(|&i| candidates[i].clone()).collect(),
        stopped_by_eos: false,
        scores: order.iter().enumerate().map(|(s, &i)| probs[[s, i]]).collect(),
    })
}
