//! Codebooks and the four quantization schemes.
//!
//! Features and codes live on the unit sphere, where nearest-by-cosine and
//! nearest-by-L2 pick the same entry. Every search breaks ties towards the
//! lowest index.

use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_CODEBOOK_SIZE: usize = 4096;
pub const DEFAULT_CODE_DIM: usize = 32;
pub const DEFAULT_BETA: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VqVariant {
    Vanilla,
    /// Residual quantization with one book per stage.
    MultiStage { stages: usize },
    /// Softmax membership over all codes.
    Soft { temperature: f64 },
    /// Two levels: `parents` coarse entries, each owning `size / parents`
    /// child codes.
    Hierarchical { parents: usize },
}

impl VqVariant {
    pub fn name(&self) -> &'static str {
        match self {
            VqVariant::Vanilla => "vanilla",
            VqVariant::MultiStage { .. } => "multi_stage",
            VqVariant::Soft { .. } => "soft",
            VqVariant::Hierarchical { .. } => "hierarchical",
        }
    }

    /// Parses `vanilla`, `multi_stage[:stages]`, `soft[:temperature]`,
    /// `hierarchical[:parents]`.
    pub fn parse(s: &str, size: usize) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let bad = |what: &str| Error::invalid(format!("bad {what} in VQ variant {s:?}"));
        Ok(match name {
            "vanilla" => VqVariant::Vanilla,
            "multi_stage" | "ms" => VqVariant::MultiStage {
                stages: arg.map(str::parse).transpose().map_err(|_| bad("stage count"))?.unwrap_or(3),
            },
            "soft" => VqVariant::Soft {
                temperature: arg.map(str::parse).transpose().map_err(|_| bad("temperature"))?.unwrap_or(0.05),
            },
            "hierarchical" | "hi" => VqVariant::Hierarchical {
                parents: arg
                    .map(str::parse)
                    .transpose()
                    .map_err(|_| bad("parent count"))?
                    .unwrap_or_else(|| default_parents(size)),
            },
            _ => return Err(Error::invalid(format!("unknown VQ variant {s:?}"))),
        })
    }

    pub fn spec_string(&self) -> String {
        match self {
            VqVariant::Vanilla => "vanilla".into(),
            VqVariant::MultiStage { stages } => format!("multi_stage:{stages}"),
            VqVariant::Soft { temperature } => format!("soft:{temperature}"),
            VqVariant::Hierarchical { parents } => format!("hierarchical:{parents}"),
        }
    }
}

/// Largest divisor of `size` not above its square root.
pub fn default_parents(size: usize) -> usize {
    let r = (size as f64).sqrt() as usize;
    (1..=r.max(1)).rev().find(|d| size % d == 0).unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    /// One index for vanilla, one per stage for multi-stage,
    /// `(parent, child)` for hierarchical, and the argmax for soft.
    pub indices: Vec<usize>,
    /// Softmax membership weights (soft variant only).
    pub weights: Option<Vec<f64>>,
    /// Per-stage gains (multi-stage only).
    pub gains: Option<Vec<f64>>,
    /// Unit-norm code vector.
    pub code: Vec<f64>,
    /// Cosine similarity between the feature and `code`.
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub variant: VqVariant,
    pub code_dim: usize,
    pub size: usize,
    pub beta: f64,
    /// `[codes]` for vanilla/soft, one book per stage for multi-stage,
    /// `[parents, children]` for hierarchical.
    pub books: Vec<Array2<f64>>,
}

fn random_unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((rows, cols));
    for mut row in m.rows_mut() {
        loop {
            row.iter_mut().for_each(|x| *x = StandardNormal.sample(rng));
            let n = row.dot(&row).sqrt();
            if n > 1e-12 {
                row /= n;
                break;
            }
        }
    }
    m
}

/// Index of the row with the largest dot product with `v`.
pub(crate) fn nearest_row(book: &Array2<f64>, v: ArrayView1<f64>) -> (usize, f64) {
    let sims = book.dot(&v);
    let mut best = 0;
    for (i, &s) in sims.iter().enumerate() {
        if s > sims[best] {
            best = i;
        }
    }
    (best, sims[best])
}

impl Codebook {
    /// Random unit-norm codes from a seeded Gaussian.
    pub fn new(variant: VqVariant, size: usize, code_dim: usize, beta: f64, seed: u64) -> Result<Self> {
        if size == 0 || code_dim == 0 {
            return Err(Error::invalid("codebook size and code_dim must be positive"));
        }
        if !(beta >= 0.0) {
            return Err(Error::invalid("beta must be non-negative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let books = match variant {
            VqVariant::Vanilla => vec![random_unit_rows(size, code_dim, &mut rng)],
            VqVariant::Soft { temperature } => {
                if !(temperature > 0.0) {
                    return Err(Error::invalid("soft VQ temperature must be positive"));
                }
                vec![random_unit_rows(size, code_dim, &mut rng)]
            }
            VqVariant::MultiStage { stages } => {
                if stages == 0 {
                    return Err(Error::invalid("multi-stage VQ needs at least one stage"));
                }
                (0..stages).map(|_| random_unit_rows(size, code_dim, &mut rng)).collect()
            }
            VqVariant::Hierarchical { parents } => {
                if parents == 0 || size % parents != 0 {
                    return Err(Error::invalid(format!(
                        "hierarchical VQ needs a parent count dividing size {size}, got {parents}"
                    )));
                }
                vec![
                    random_unit_rows(parents, code_dim, &mut rng),
                    random_unit_rows(size, code_dim, &mut rng),
                ]
            }
        };
        Ok(Self {
            variant,
            code_dim,
            size,
            beta,
            books,
        })
    }

    /// Builds a vanilla codebook from explicit rows (normalized).
    pub fn from_codes(codes: Array2<f64>, beta: f64) -> Result<Self> {
        let (size, code_dim) = codes.dim();
        let mut cb = Self {
            variant: VqVariant::Vanilla,
            code_dim,
            size,
            beta,
            books: vec![codes],
        };
        if size == 0 || code_dim == 0 {
            return Err(Error::invalid("empty codebook"));
        }
        cb.renormalize();
        Ok(cb)
    }

    pub fn children_per_parent(&self) -> usize {
        match self.variant {
            VqVariant::Hierarchical { parents } => self.size / parents,
            _ => self.size,
        }
    }

    pub fn renormalize(&mut self) {
        for book in &mut self.books {
            for mut row in book.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row /= n;
                }
            }
        }
    }

    fn check_feature(&self, feature: &[f64]) {
        assert_eq!(feature.len(), self.code_dim, "feature length must equal code_dim");
    }

    fn wrong_variant(&self, wanted: &str) -> Error {
        Error::invalid(format!("{wanted} quantization requires a {wanted} codebook, got {}", self.variant.name()))
    }

    /// Quantizes with whichever scheme the codebook was built for.
    pub fn quantize(&self, feature: &[f64]) -> QuantizeResult {
        match self.variant {
            VqVariant::Vanilla => self.nearest(feature),
            VqVariant::MultiStage { .. } => self.multi_stage(feature),
            VqVariant::Soft { temperature } => self.soft(feature, temperature),
            VqVariant::Hierarchical { .. } => self.hierarchical(feature),
        }
    }

    /// Nearest code by cosine similarity.
    pub fn quantize_vanilla(&self, feature: &[f64]) -> Result<QuantizeResult> {
        match self.variant {
            VqVariant::Vanilla => Ok(self.nearest(feature)),
            _ => Err(self.wrong_variant("vanilla")),
        }
    }

    pub fn quantize_multi_stage(&self, feature: &[f64]) -> Result<QuantizeResult> {
        match self.variant {
            VqVariant::MultiStage { .. } => Ok(self.multi_stage(feature)),
            _ => Err(self.wrong_variant("multi_stage")),
        }
    }

    pub fn quantize_soft(&self, feature: &[f64]) -> Result<QuantizeResult> {
        match self.variant {
            VqVariant::Soft { temperature } => Ok(self.soft(feature, temperature)),
            _ => Err(self.wrong_variant("soft")),
        }
    }

    pub fn quantize_hierarchical(&self, feature: &[f64]) -> Result<QuantizeResult> {
        match self.variant {
            VqVariant::Hierarchical { .. } => Ok(self.hierarchical(feature)),
            _ => Err(self.wrong_variant("hierarchical")),
        }
    }

    fn nearest(&self, feature: &[f64]) -> QuantizeResult {
        self.check_feature(feature);
        let (idx, _) = nearest_row(&self.books[0], ArrayView1::from(feature));
        let code = self.books[0].row(idx).to_vec();
        QuantizeResult {
            indices: vec![idx],
            weights: None,
            gains: None,
            similarity: linalg::cosine(feature, &code),
            code,
        }
    }

    /// Gain-shape residual quantization: stage `s` picks the unit code best
    /// aligned with the current residual and subtracts its projection, so the
    /// residual norm never grows.
    fn multi_stage(&self, feature: &[f64]) -> QuantizeResult {
        self.check_feature(feature);
        let mut residual = feature.to_vec();
        let mut recon = vec![0.0; self.code_dim];
        let mut indices = Vec::with_capacity(self.books.len());
        let mut gains = Vec::with_capacity(self.books.len());
        for book in &self.books {
            let (idx, proj) = nearest_row(book, ArrayView1::from(residual.as_slice()));
            let gain = proj.max(0.0);
            for (k, c) in book.row(idx).iter().enumerate() {
                recon[k] += gain * c;
                residual[k] -= gain * c;
            }
            indices.push(idx);
            gains.push(gain);
        }
        let code = linalg::normalized(&recon).unwrap_or_else(|| self.books[0].row(indices[0]).to_vec());
        QuantizeResult {
            indices,
            weights: None,
            gains: Some(gains),
            similarity: linalg::cosine(feature, &code),
            code,
        }
    }

    /// Unnormalized reconstruction of a multi-stage result.
    pub fn multi_stage_reconstruction(&self, q: &QuantizeResult) -> Vec<f64> {
        let mut recon = vec![0.0; self.code_dim];
        let gains = q.gains.as_deref().unwrap_or(&[]);
        for ((book, &idx), &g) in self.books.iter().zip(&q.indices).zip(gains) {
            recon.iter_mut().zip(book.row(idx)).for_each(|(r, c)| *r += g * c);
        }
        recon
    }

    fn soft(&self, feature: &[f64], temperature: f64) -> QuantizeResult {
        self.check_feature(feature);
        let book = &self.books[0];
        let sims = book.dot(&ArrayView1::from(feature));
        let max = sims.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut weights: Vec<f64> = sims.iter().map(|s| ((s - max) / temperature).exp()).collect();
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        let mixed = book.t().dot(&ndarray::Array1::from(weights.clone()));
        let argmax = nearest_row(book, ArrayView1::from(feature)).0;
        let code = linalg::normalized(mixed.as_slice().expect("contiguous"))
            .unwrap_or_else(|| book.row(argmax).to_vec());
        QuantizeResult {
            indices: vec![argmax],
            weights: Some(weights),
            gains: None,
            similarity: linalg::cosine(feature, &code),
            code,
        }
    }

    /// Greedy two-level search: nearest parent, then nearest child of it.
    fn hierarchical(&self, feature: &[f64]) -> QuantizeResult {
        self.check_feature(feature);
        let per = self.children_per_parent();
        let f = ArrayView1::from(feature);
        let (parent, _) = nearest_row(&self.books[0], f);
        let children = self.books[1].slice(ndarray::s![parent * per..(parent + 1) * per, ..]);
        let sims = children.dot(&f);
        let mut child = 0;
        for (i, &s) in sims.iter().enumerate() {
            if s > sims[child] {
                child = i;
            }
        }
        let code = children.row(child).to_vec();
        QuantizeResult {
            indices: vec![parent, child],
            weights: None,
            gains: None,
            similarity: linalg::cosine(feature, &code),
            code,
        }
    }

    /// Row of `books` that a result's primary index refers to, used for
    /// utilization tracking (the leaf code for hierarchical books).
    pub fn leaf_index(&self, q: &QuantizeResult) -> usize {
        match self.variant {
            VqVariant::Hierarchical { .. } => q.indices[0] * self.children_per_parent() + q.indices[1],
            _ => q.indices[0],
        }
    }

    /// Accumulates the gradient of the codebook term `||sg[z] - q||^2`
    /// (scaled by `scale`) into `grads`, which mirrors `books`.
    ///
    /// Multi-stage books pull each stage code towards its residual; soft books
    /// pull every code towards the feature in proportion to its membership.
    pub fn accumulate_codebook_grad(
        &self,
        feature: &[f64],
        q: &QuantizeResult,
        scale: f64,
        grads: &mut [Array2<f64>],
    ) {
        let pull = |g: &mut Array2<f64>, row: usize, target: &[f64], code: ArrayView1<f64>, w: f64| {
            for (k, (t, c)) in target.iter().zip(code.iter()).enumerate() {
                g[[row, k]] += scale * w * 2.0 * (c - t);
            }
        };
        match self.variant {
            VqVariant::Vanilla => {
                let i = q.indices[0];
                pull(&mut grads[0], i, feature, self.books[0].row(i), 1.0);
            }
            VqVariant::Soft { .. } => {
                let weights = q.weights.as_ref().expect("soft result carries weights");
                for (i, &w) in weights.iter().enumerate() {
                    if w > 1e-12 {
                        pull(&mut grads[0], i, feature, self.books[0].row(i), w);
                    }
                }
            }
            VqVariant::MultiStage { .. } => {
                let gains = q.gains.as_ref().expect("multi-stage result carries gains");
                let mut residual = feature.to_vec();
                for (s, (&i, &g)) in q.indices.iter().zip(gains).enumerate() {
                    let code = self.books[s].row(i);
                    if g > 0.0 {
                        // d/dc ||r - g c||^2 with the gain held fixed
                        let target: Vec<f64> = residual.iter().map(|r| r / g).collect();
                        pull(&mut grads[s], i, &target, code, g * g);
                    }
                    residual.iter_mut().zip(code.iter()).for_each(|(r, c)| *r -= g * c);
                }
            }
            VqVariant::Hierarchical { .. } => {
                let (p, c) = (q.indices[0], q.indices[1]);
                let leaf = p * self.children_per_parent() + c;
                pull(&mut grads[0], p, feature, self.books[0].row(p), 1.0);
                pull(&mut grads[1], leaf, feature, self.books[1].row(leaf), 1.0);
            }
        }
    }

    /// Exports all code rows as an embedding table with ids `code_<i>`
    /// (rows of later books follow those of earlier ones).
    pub fn to_embedding_table(&self) -> Result<EmbeddingTable> {
        let mut t = EmbeddingTable::new(self.code_dim)?;
        let mut i = 0;
        for book in &self.books {
            for row in book.rows() {
                t.insert(format!("code_{i}"), row.as_slice().expect("contiguous"))?;
                i += 1;
            }
        }
        Ok(t)
    }
}
