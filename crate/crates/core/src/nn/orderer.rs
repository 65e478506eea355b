//! The autoregressive frame orderer.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{gaussian, Block, LayerNorm, Linear};
use super::tape::{Mask, NodeId, ParamId, ParamSet, Tape};
use crate::data::{word_key, EmbeddingTable};
use crate::error::{Error, Result};

pub const DEFAULT_MODEL_DIM: usize = 128;
pub const DEFAULT_DEPTH: usize = 3;
pub const DEFAULT_HEADS: usize = 4;
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 1.0;

/// How the synopsis reaches the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Text tokens form a bidirectional prefix of the frame sequence.
    Prefix,
    /// Frames alone occupy the sequence and read the text through cross-attention.
    CrossAttention,
}

impl Conditioning {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prefix" => Ok(Self::Prefix),
            "cross_attention" | "cross" => Ok(Self::CrossAttention),
            _ => Err(Error::invalid(format!("unknown conditioning mode {s:?}"))),
        }
    }
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Prefix => "prefix",
            Self::CrossAttention => "cross_attention",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrdererConfig {
    /// Dimension of text embeddings.
    pub text_dim: usize,
    /// Dimension of raw frame embeddings.
    pub frame_dim: usize,
    /// Dimension of the quantized code space.
    pub code_dim: usize,
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Word tokens kept after the global text vector.
    pub max_text_tokens: usize,
    pub max_frames: usize,
    pub conditioning: Conditioning,
    /// When false frames skip the codebook and the encoder output is used directly.
    pub use_vq: bool,
}

impl OrdererConfig {
    pub fn new(text_dim: usize, frame_dim: usize, code_dim: usize) -> Self {
        Self {
            text_dim,
            frame_dim,
            code_dim,
            model_dim: DEFAULT_MODEL_DIM,
            depth: DEFAULT_DEPTH,
            heads: DEFAULT_HEADS,
            max_text_tokens: 32,
            max_frames: 20,
            conditioning: Conditioning::Prefix,
            use_vq: true,
        }
    }

    /// Rows of the shared position table.
    pub fn max_len(&self) -> usize {
        self.max_text_tokens + self.max_frames + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_dim == 0 || self.frame_dim == 0 || self.code_dim == 0 || self.model_dim == 0 {
            return Err(Error::invalid("orderer dimensions must be positive"));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.max_frames == 0 {
            return Err(Error::invalid("max_frames must be positive"));
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("orderer.text_dim".into(), self.text_dim.to_string());
        m.insert("orderer.frame_dim".into(), self.frame_dim.to_string());
        m.insert("orderer.code_dim".into(), self.code_dim.to_string());
        m.insert("orderer.model_dim".into(), self.model_dim.to_string());
        m.insert("orderer.depth".into(), self.depth.to_string());
        m.insert("orderer.heads".into(), self.heads.to_string());
        m.insert("orderer.max_text_tokens".into(), self.max_text_tokens.to_string());
        m.insert("orderer.max_frames".into(), self.max_frames.to_string());
        m.insert("orderer.conditioning".into(), self.conditioning.to_string());
        m.insert("orderer.use_vq".into(), self.use_vq.to_string());
        m
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = m.get(key).ok_or_else(|| Error::invalid(format!("checkpoint config lacks {key}")))?;
            raw.parse().map_err(|_| Error::invalid(format!("bad value {raw:?} for {key}")))
        }
        let cfg = Self {
            text_dim: get(m, "orderer.text_dim")?,
            frame_dim: get(m, "orderer.frame_dim")?,
            code_dim: get(m, "orderer.code_dim")?,
            model_dim: get(m, "orderer.model_dim")?,
            depth: get(m, "orderer.depth")?,
            heads: get(m, "orderer.heads")?,
            max_text_tokens: get(m, "orderer.max_text_tokens")?,
            max_frames: get(m, "orderer.max_frames")?,
            conditioning: Conditioning::parse(
                m.get("orderer.conditioning")
                    .ok_or_else(|| Error::invalid("checkpoint config lacks orderer.conditioning"))?,
            )?,
            use_vq: get(m, "orderer.use_vq")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Visibility for the prefix decoder over `n_text` text slots then `m_frames` frames.
pub fn build_prefix_mask(n_text: usize, m_frames: usize) -> Array2<bool> {
    let n = n_text + m_frames;
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i < n_text {
            j < n_text
        } else {
            j < n_text || j <= i
        }
    })
}

pub fn causal_mask(n: usize) -> Array2<bool> {
    Array2::from_shape_fn((n, n), |(i, j)| j <= i)
}

/// Text slots for one synopsis: the global vector, its word-token vectors in
/// order (when the table has them, capped at `max_words`), then the global
/// vector again as the closing slot.
pub fn text_tokens(table: &EmbeddingTable, text_id: &str, max_words: usize) -> Result<Array2<f64>> {
    let global = table.vector(text_id)?;
    let mut rows = vec![global.clone()];
    for i in 0..max_words {
        match table.get(&word_key(text_id, i)) {
            Some(v) => rows.push(v.iter().map(|&x| x as f64).collect()),
            None => break,
        }
    }
    rows.push(global);
    let dim = table.dim();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), dim), flat).expect("rows have table dim"))
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Linear,
    text_in: Linear,
    frame_in: Linear,
    pos: ParamId,
    start: Option<ParamId>,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    out: Linear,
    eos: ParamId,
    log_tau: ParamId,
}

#[derive(Debug, Clone)]
pub struct OrdererModel {
    pub config: OrdererConfig,
    pub params: ParamSet,
    layout: Layout,
}

impl OrdererModel {
    pub fn new(config: OrdererConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let c = &config;
        let enc = if c.frame_dim == c.code_dim {
            let w = Array2::eye(c.code_dim) + gaussian(&mut rng, c.code_dim, c.code_dim, 0.01);
            Linear {
                w: params.add("orderer.enc.w", w, true),
                b: Some(params.add("orderer.enc.b", Array2::zeros((1, c.code_dim)), false)),
            }
        } else {
            Linear::xavier(&mut params, "orderer.enc", c.frame_dim, c.code_dim, true, &mut rng)
        };
        let text_in = Linear::xavier(&mut params, "orderer.text_in", c.text_dim, c.model_dim, true, &mut rng);
        let frame_in = Linear::xavier(&mut params, "orderer.frame_in", c.code_dim, c.model_dim, true, &mut rng);
        let pos = params.add("orderer.pos", gaussian(&mut rng, c.max_len(), c.model_dim, 0.02), false);
        let cross = c.conditioning == Conditioning::CrossAttention;
        let start = cross.then(|| params.add("orderer.start", gaussian(&mut rng, 1, c.model_dim, 1.0), false));
        let blocks = (0..c.depth)
            .map(|l| Block::new(&mut params, &format!("orderer.layer{l}"), c.model_dim, c.heads, cross, c.depth, &mut rng))
            .collect();
        let final_ln = LayerNorm::new(&mut params, "orderer.final_ln", c.model_dim);
        let out = Linear::xavier(&mut params, "orderer.out", c.model_dim, c.code_dim, true, &mut rng);
        let eos = params.add("orderer.eos", gaussian(&mut rng, 1, c.code_dim, 1.0), false);
        let log_tau = params.add("orderer.log_tau", Array2::from_elem((1, 1), TAU_INIT.ln()), false);
        Ok(Self {
            config,
            params,
            layout: Layout {
                enc,
                text_in,
                frame_in,
                pos,
                start,
                blocks,
                final_ln,
                out,
                eos,
                log_tau,
            },
        })
    }

    pub fn tau(&self) -> f64 {
        self.params.get(self.layout.log_tau)[[0, 0]].exp()
    }

    pub fn log_tau_id(&self) -> ParamId {
        self.layout.log_tau
    }

    pub fn eos_id(&self) -> ParamId {
        self.layout.eos
    }

    /// Keeps the temperature inside its allowed range.
    pub fn clamp_tau(&mut self) {
        let lt = self.params.get_mut(self.layout.log_tau);
        lt[[0, 0]] = lt[[0, 0]].clamp(TAU_MIN.ln(), TAU_MAX.ln());
    }

    /// Unit-norm end-of-sequence vector.
    pub fn eos(&self) -> Vec<f64> {
        let e = self.params.get(self.layout.eos);
        let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        e.iter().map(|x| x / n).collect()
    }

    pub fn eos_node(&self, tape: &mut Tape) -> NodeId {
        let e = tape.param(&self.params, self.layout.eos);
        tape.row_normalize(e)
    }

    /// Projects raw frame embeddings into code space, unit-normalized.
    pub fn encode_frames_node(&self, tape: &mut Tape, raw: NodeId) -> NodeId {
        let z = self.layout.enc.apply(tape, &self.params, raw);
        tape.row_normalize(z)
    }

    pub fn encode_frames(&self, raw: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(raw.clone());
        let z = self.encode_frames_node(&mut tape, x);
        tape.value(z).clone()
    }

    fn positions(&self, tape: &mut Tape, len: usize) -> NodeId {
        let pos = tape.param(&self.params, self.layout.pos);
        tape.slice_rows(pos, 0, len)
    }

    /// Predictions for frames `1..=m` and the end token: `m + 1` unit rows.
    pub fn forward_node(&self, tape: &mut Tape, text: &Array2<f64>, frames: NodeId) -> Result<NodeId> {
        let c = &self.config;
        let n = text.nrows();
        let m = tape.value(frames).nrows();
        if n == 0 {
            return Err(Error::invalid("text prefix needs at least one slot"));
        }
        if text.ncols() != c.text_dim || tape.value(frames).ncols() != c.code_dim {
            return Err(Error::Shape(format!(
                "forward expects text dim {} and code dim {}",
                c.text_dim, c.code_dim
            )));
        }
        if n > c.max_text_tokens + 2 || m > c.max_frames {
            return Err(Error::invalid(format!(
                "sequence of {n} text slots and {m} frames exceeds position table ({} + {} frames)",
                c.max_text_tokens + 2,
                c.max_frames
            )));
        }
        let p = &self.params;
        let t = tape.leaf(text.clone());
        let t = self.layout.text_in.apply(tape, p, t);
        let f = self.layout.frame_in.apply(tape, p, frames);
        let h = match c.conditioning {
            Conditioning::Prefix => {
                let x = if m == 0 { t } else { tape.concat_rows(&[t, f]) };
                let pos = self.positions(tape, n + m);
                let mut x = tape.add(x, pos);
                let mask: Mask = Arc::new(build_prefix_mask(n, m));
                for b in &self.layout.blocks {
                    x = b.apply(tape, p, x, &mask, None);
                }
                tape.slice_rows(x, n - 1, m + 1)
            }
            Conditioning::CrossAttention => {
                let start = tape.param(p, self.layout.start.expect("cross model has start token"));
                let x = if m == 0 { start } else { tape.concat_rows(&[start, f]) };
                let pos = self.positions(tape, m + 1);
                let mut x = tape.add(x, pos);
                let mpos = self.positions(tape, n);
                let mem = tape.add(t, mpos);
                let mask: Mask = Arc::new(causal_mask(m + 1));
                let mem_mask: Mask = Arc::new(Array2::from_elem((m + 1, n), true));
                for b in &self.layout.blocks {
                    x = b.apply(tape, p, x, &mask, Some((mem, &mem_mask)));
                }
                x
            }
        };
        let h = self.layout.final_ln.apply(tape, p, h);
        let o = self.layout.out.apply(tape, p, h);
        Ok(tape.row_normalize(o))
    }

    pub fn forward(&self, text: &Array2<f64>, frame_codes: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let f = tape.leaf(frame_codes.clone());
        let o = self.forward_node(&mut tape, text, f)?;
        Ok(tape.value(o).clone())
    }

    /// Prediction for the frame following `frame_codes` (the last output row).
    pub fn predict_next(&self, text: &Array2<f64>, frame_codes: &Array2<f64>) -> Result<Vec<f64>> {
        let out = self.forward(text, frame_codes)?;
        Ok(out.index_axis(Axis(0), out.nrows() - 1).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;

    fn tiny(cond: Conditioning, depth: usize) -> OrdererModel {
        let mut c = OrdererConfig::new(6, 5, 4);
        c.model_dim = 8;
        c.heads = 2;
        c.depth = depth;
        c.max_text_tokens = 4;
        c.max_frames = 5;
        c.conditioning = cond;
        OrdererModel::new(c, 7).unwrap()
    }

    fn rows(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = gaussian(&mut rng, n, d, 1.0);
        for mut r in a.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        a
    }

    #[test]
    fn prefix_mask_rules() {
        let m = build_prefix_mask(3, 0);
        assert!(m.iter().all(|&x| x));
        let m = build_prefix_mask(1, 2);
        let expected = [[true, false, false], [true, true, false], [true, true, true]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[[i, j]], expected[i][j], "({i},{j})");
            }
        }
        let m = build_prefix_mask(4, 3);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m[[i, j]], m[[j, i]]);
            }
            for j in 4..7 {
                assert!(!m[[i, j]]);
            }
        }
    }

    #[test]
    fn output_shape_and_norm() {
        for cond in [Conditioning::Prefix, Conditioning::CrossAttention] {
            let model = tiny(cond, 2);
            for m in 0..=3 {
                let out = model.forward(&rows(1, 3, 6), &rows(2, m, 4)).unwrap();
                assert_eq!(out.dim(), (m + 1, 4));
                for r in out.rows() {
                    assert!((norm(r.as_slice().unwrap()) - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn overflow_is_an_error() {
        let model = tiny(Conditioning::Prefix, 1);
        assert!(model.forward(&rows(1, 3, 6), &rows(2, 6, 4)).is_err());
        assert!(model.forward(&rows(1, 7, 6), &rows(2, 1, 4)).is_err());
    }

    #[test]
    fn future_frames_do_not_leak() {
        for cond in [Conditioning::Prefix, Conditioning::CrossAttention] {
            let model = tiny(cond, 2);
            let text = rows(3, 3, 6);
            let a = rows(4, 4, 4);
            let mut b = a.clone();
            b.row_mut(3).assign(&rows(9, 1, 4).row(0));
            let oa = model.forward(&text, &a).unwrap();
            let ob = model.forward(&text, &b).unwrap();
            for t in 0..4 {
                let d: f64 = (&oa.row(t) - &ob.row(t)).iter().map(|x| x.abs()).sum();
                assert!(d < 1e-12, "row {t} changed");
            }
            let d: f64 = (&oa.row(4) - &ob.row(4)).iter().map(|x| x.abs()).sum();
            assert!(d > 1e-9);
        }
    }

    #[test]
    fn text_order_matters() {
        let model = tiny(Conditioning::Prefix, 2);
        let text = rows(5, 3, 6);
        let mut swapped = text.clone();
        swapped.row_mut(0).assign(&text.row(1));
        swapped.row_mut(1).assign(&text.row(0));
        let frames = rows(6, 2, 4);
        let a = model.forward(&text, &frames).unwrap();
        let b = model.forward(&swapped, &frames).unwrap();
        assert!((&a - &b).iter().any(|x| x.abs() > 1e-9));
    }

    #[test]
    fn depth_zero_matches_direct_projection() {
        let model = tiny(Conditioning::Prefix, 0);
        let text = rows(7, 3, 6);
        let frames = rows(8, 2, 4);
        let out = model.forward(&text, &frames).unwrap();
        let p = &model.params;
        let get = |n: &str| p.get(p.by_name(n).unwrap()).clone();
        let pos = get("orderer.pos");
        let (g, b) = (get("orderer.final_ln.g"), get("orderer.final_ln.b"));
        for t in 0..3 {
            let h = if t == 0 {
                text.row(2).dot(&get("orderer.text_in.w")) + get("orderer.text_in.b").row(0) + pos.row(2)
            } else {
                frames.row(t - 1).dot(&get("orderer.frame_in.w")) + get("orderer.frame_in.b").row(0) + pos.row(2 + t)
            };
            let mean = h.sum() / h.len() as f64;
            let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / h.len() as f64;
            let ln = h.mapv(|x| (x - mean) / (var + 1e-5).sqrt()) * g.row(0) + b.row(0);
            let o = ln.dot(&get("orderer.out.w")) + get("orderer.out.b").row(0);
            let o = &o / o.dot(&o).sqrt();
            for k in 0..4 {
                assert!((o[k] - out[[t, k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_map_round_trip() {
        let model = tiny(Conditioning::CrossAttention, 2);
        let back = OrdererConfig::from_map(&model.config.to_map()).unwrap();
        assert_eq!(back, model.config);
    }

    #[test]
    fn tau_clamps() {
        let mut model = tiny(Conditioning::Prefix, 1);
        assert!((model.tau() - TAU_INIT).abs() < 1e-12);
        let id = model.log_tau_id();
        model.params.get_mut(id)[[0, 0]] = 5.0;
        model.clamp_tau();
        assert!((model.tau() - 1.0).abs() < 1e-12);
    }
}
