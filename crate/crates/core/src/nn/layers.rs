//! Transformer building blocks expressed as tape subgraphs.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Mask, NodeId, ParamId, ParamSet, Tape};

pub(crate) fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.add(format!("{name}.w"), gaussian(rng, fan_in, fan_out, std), true);
        let b = bias.then(|| params.add(format!("{name}.b"), Array2::zeros((1, fan_out)), false));
        Self { w, b }
    }

    /// Default scale `1 / sqrt(fan_in)`.
    pub fn xavier(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Self::new(params, name, fan_in, fan_out, bias, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> NodeId {
        let w = tape.param(params, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(params, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.g"), Array2::ones((1, dim)), false),
            beta: params.add(format!("{name}.b"), Array2::zeros((1, dim)), false),
        }
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> NodeId {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize, heads: usize, out_std: f64, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::xavier(params, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::xavier(params, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::xavier(params, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(params, &format!("{name}.o"), dim, dim, true, out_std, rng),
            heads,
        }
    }

    /// Rows of `query` attend over rows of `keys` where `mask` allows.
    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, query: NodeId, keys: NodeId, mask: &Mask) -> NodeId {
        let q = self.q.apply(tape, params, query);
        let k = self.k.apply(tape, params, keys);
        let v = self.v.apply(tape, params, keys);
        let dim = tape.value(q).ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let p = tape.masked_softmax(scores, mask.clone());
            outs.push(tape.matmul(p, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.o.apply(tape, params, joined)
    }
}

/// Pre-norm transformer block with optional cross-attention.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

pub const FF_MULT: usize = 4;

impl Block {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        cross: bool,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let out_std = 1.0 / (dim as f64).sqrt() / (2.0 * depth as f64).sqrt();
        let ln1 = LayerNorm::new(params, &format!("{name}.ln1"), dim);
        let attn = Attention::new(params, &format!("{name}.attn"), dim, heads, out_std, rng);
        let cross = cross.then(|| {
            (
                LayerNorm::new(params, &format!("{name}.lnx"), dim),
                Attention::new(params, &format!("{name}.xattn"), dim, heads, out_std, rng),
            )
        });
        let ln2 = LayerNorm::new(params, &format!("{name}.ln2"), dim);
        let ff1 = Linear::xavier(params, &format!("{name}.ff1"), dim, dim * FF_MULT, true, rng);
        let ff2 = Linear::new(params, &format!("{name}.ff2"), dim * FF_MULT, dim, true, out_std, rng);
        Self {
            ln1,
            attn,
            cross,
            ln2,
            ff1,
            ff2,
        }
    }

    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: NodeId,
        mask: &Mask,
        memory: Option<(NodeId, &Mask)>,
    ) -> NodeId {
        let h = self.ln1.apply(tape, params, x);
        let a = self.attn.apply(tape, params, h, h, mask);
        let mut x = tape.add(x, a);
        if let (Some((ln, attn)), Some((mem, mem_mask))) = (&self.cross, memory) {
            let h = ln.apply(tape, params, x);
            let a = attn.apply(tape, params, h, mem, mem_mask);
            x = tape.add(x, a);
        }
        let h = self.ln2.apply(tape, params, x);
        let f = self.ff1.apply(tape, params, h);
        let f = tape.gelu(f);
        let f = self.ff2.apply(tape, params, f);
        tape.add(x, f)
    }
}
