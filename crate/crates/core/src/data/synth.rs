//! Synthetic planted-order corpora.
//!
//! Every embedding lives in a space split into three blocks:
//!
//! * dims `0..2` form the *story plane*. Step `t` of an example points at
//!   angle `start + t * step_angle` inside it; `start` sits on a grid of
//!   `360 / step_angle` positions.
//! * the middle block carries the example's *anchor* (what it is about),
//!   shared by its text and frames, correlated within a movie and optionally
//!   dominated by one of a small corpus-wide set of scenes.
//! * the last `nuisance_dims` dims receive frame-only clutter that carries no
//!   signal.
//!
//! Synopses are word sequences. Each word belongs to one story step and gets a
//! token vector `textid#w<i>`; the whole-text vector is the pooled mean of the
//! token vectors. Frames follow the same geometry with their own noise, so the
//! canonical order is recoverable from the plane angle relative to the first
//! word's angle.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Corpus, StoryboardExample};
use super::embedding::{word_key, EmbeddingTable};
use crate::error::{Error, Result};
use crate::linalg;

/// Storyboard lengths `3..=11`; 60% of the mass sits on 3 and 4.
pub const DEFAULT_LENGTH_WEIGHTS: [f64; 9] = [0.33, 0.27, 0.13, 0.08, 0.06, 0.05, 0.04, 0.02, 0.02];
pub const MIN_SYNTH_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_examples: usize,
    /// Examples per movie on average.
    pub examples_per_movie: usize,
    pub dim: usize,
    /// Relative weights of lengths `3, 4, ..., 2 + len`.
    pub length_weights: Vec<f64>,
    /// Share of each frame drawn from the planted structure rather than from a
    /// random direction.
    pub signal_strength: f64,
    /// Norm of the isotropic Gaussian noise added to each frame.
    pub noise: f64,
    /// Norm of the Gaussian noise added to each word vector.
    pub text_noise: f64,
    /// Norm of the frame-only clutter in the nuisance block.
    pub nuisance: f64,
    pub nuisance_dims: usize,
    pub step_angle_deg: f64,
    /// Squared weight of the story plane in the structured part.
    pub plane_share: f64,
    /// Correlation of anchors within one movie.
    pub movie_correlation: f64,
    /// Size of a corpus-wide set of scene prototypes; `0` disables scenes.
    pub scenes: usize,
    /// Squared weight of the example's scene in its anchor.
    pub scene_share: f64,
    pub words_per_step: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_examples: 1000,
            examples_per_movie: 4,
            dim: 32,
            length_weights: DEFAULT_LENGTH_WEIGHTS.to_vec(),
            signal_strength: 1.0,
            noise: 0.25,
            text_noise: 1.0,
            nuisance: 0.6,
            nuisance_dims: 8,
            step_angle_deg: 30.0,
            plane_share: 0.5,
            movie_correlation: 0.3,
            scenes: 0,
            scene_share: 0.0,
            words_per_step: (2, 4),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(Error::invalid("synthetic dim must be at least 4"));
        }
        if self.nuisance_dims + 3 > self.dim {
            return Err(Error::invalid("nuisance_dims leaves no room for the anchor block"));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::invalid("signal_strength must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.plane_share) || !(0.0..=1.0).contains(&self.movie_correlation) {
            return Err(Error::invalid("plane_share and movie_correlation must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.scene_share) || self.scene_share + self.movie_correlation > 1.0 + 1e-12 {
            return Err(Error::invalid("scene_share must lie in [0, 1] and leave room for movie_correlation"));
        }
        if self.scene_share > 0.0 && self.scenes == 0 {
            return Err(Error::invalid("scene_share needs scenes > 0"));
        }
        if [self.noise, self.text_noise, self.nuisance].iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        if self.length_weights.is_empty()
            || self.length_weights.iter().any(|w| !(*w >= 0.0))
            || self.length_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::invalid("length_weights must be non-negative with positive mass"));
        }
        let max_len = self.max_len();
        if max_len > super::dataset::MAX_FRAMES {
            return Err(Error::invalid("length_weights allow storyboards longer than 20"));
        }
        if !(self.step_angle_deg > 0.0) || (max_len as f64) * self.step_angle_deg > 360.0 - 1e-9 {
            return Err(Error::invalid(
                "step_angle_deg must be positive and the longest storyboard must not wrap the circle",
            ));
        }
        let (lo, hi) = self.words_per_step;
        if lo == 0 || hi < lo {
            return Err(Error::invalid("words_per_step must be a non-empty positive range"));
        }
        if self.examples_per_movie == 0 {
            return Err(Error::invalid("examples_per_movie must be positive"));
        }
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        MIN_SYNTH_LEN + self.length_weights.len() - 1
    }

    fn grid_size(&self) -> usize {
        ((360.0 / self.step_angle_deg).floor() as usize).max(1)
    }
}

struct Geometry {
    dim: usize,
    anchor: std::ops::Range<usize>,
    nuisance: std::ops::Range<usize>,
}

impl Geometry {
    fn new(cfg: &SynthConfig) -> Self {
        Self {
            dim: cfg.dim,
            anchor: 2..cfg.dim - cfg.nuisance_dims,
            nuisance: cfg.dim - cfg.nuisance_dims..cfg.dim,
        }
    }

    fn gaussian_in(&self, rng: &mut ChaCha8Rng, range: std::ops::Range<usize>, norm: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        if norm == 0.0 || range.is_empty() {
            return v;
        }
        let scale = norm / (range.len() as f64).sqrt();
        for x in &mut v[range] {
            let g: f64 = StandardNormal.sample(rng);
            *x = g * scale;
        }
        v
    }

    fn unit_in(&self, rng: &mut ChaCha8Rng, range: std::ops::Range<usize>) -> Vec<f64> {
        loop {
            if let Some(u) = linalg::normalized(&self.gaussian_in(rng, range.clone(), 1.0)) {
                return u;
            }
        }
    }

    fn signal_block(&self) -> std::ops::Range<usize> {
        0..self.anchor.end
    }
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += s * b);
}

/// Builds a planted-order corpus. Deterministic for a fixed `seed`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = Geometry::new(cfg);
    let step = cfg.step_angle_deg.to_radians();
    let grid = cfg.grid_size();
    let anchor_w = (1.0 - cfg.plane_share).sqrt();
    let plane_w = cfg.plane_share.sqrt();
    let total_w: f64 = cfg.length_weights.iter().sum();

    let n_movies = cfg.n_examples.div_ceil(cfg.examples_per_movie).max(1);
    let movie_anchors: Vec<Vec<f64>> = (0..n_movies).map(|_| geo.unit_in(&mut rng, geo.anchor.clone())).collect();
    let scene_anchors: Vec<Vec<f64>> = (0..cfg.scenes).map(|_| geo.unit_in(&mut rng, geo.anchor.clone())).collect();
    let own_share = (1.0 - cfg.movie_correlation - cfg.scene_share).max(0.0);

    let mut texts = EmbeddingTable::new(cfg.dim)?;
    let mut frames = EmbeddingTable::new(cfg.dim)?;
    let mut examples = Vec::with_capacity(cfg.n_examples);
    let mut used_frame_ids = HashSet::new();

    for i in 0..cfg.n_examples {
        let movie = rng.random_range(0..n_movies);
        let own = geo.unit_in(&mut rng, geo.anchor.clone());
        let mut anchor = vec![0.0; cfg.dim];
        add_scaled(&mut anchor, &movie_anchors[movie], cfg.movie_correlation.sqrt());
        add_scaled(&mut anchor, &own, own_share.sqrt());
        if cfg.scenes > 0 {
            let scene = rng.random_range(0..cfg.scenes);
            add_scaled(&mut anchor, &scene_anchors[scene], cfg.scene_share.sqrt());
        }
        let anchor = linalg::normalized(&anchor).expect("anchor is non-zero");

        let mut u: f64 = rng.random::<f64>() * total_w;
        let mut len_idx = cfg.length_weights.len() - 1;
        for (k, w) in cfg.length_weights.iter().enumerate() {
            if u < *w {
                len_idx = k;
                break;
            }
            u -= w;
        }
        let m = MIN_SYNTH_LEN + len_idx;
        let start = rng.random_range(0..grid) as f64 * step;

        let structured = |t: usize| {
            let a = start + t as f64 * step;
            let mut v = anchor.iter().map(|x| x * anchor_w).collect::<Vec<_>>();
            v[0] = plane_w * a.cos();
            v[1] = plane_w * a.sin();
            v
        };

        let text_id = format!("t{i:06}");
        let mut words = Vec::new();
        let mut word_vecs = Vec::new();
        for t in 0..m {
            let n_words = rng.random_range(cfg.words_per_step.0..=cfg.words_per_step.1);
            for _ in 0..n_words {
                let mut v = structured(t);
                add_scaled(&mut v, &geo.gaussian_in(&mut rng, geo.signal_block(), cfg.text_noise), 1.0);
                let v = linalg::normalized(&v).unwrap_or_else(|| structured(t));
                words.push(format!("w{:04}", rng.random_range(0..5000u32)));
                word_vecs.push(v);
            }
        }
        let pooled = linalg::mean_direction(word_vecs.iter().map(Vec::as_slice))
            .unwrap_or_else(|| structured(0));
        texts.insert(text_id.clone(), &pooled)?;
        for (w, v) in word_vecs.iter().enumerate() {
            texts.insert(word_key(&text_id, w), v)?;
        }

        let mut frame_ids = Vec::with_capacity(m);
        for t in 0..m {
            let id = loop {
                let candidate = format!("f{:012x}", rng.random::<u64>() & 0xffff_ffff_ffff);
                if used_frame_ids.insert(candidate.clone()) {
                    break candidate;
                }
            };
            let mut v: Vec<f64> = structured(t).iter().map(|x| x * cfg.signal_strength).collect();
            if cfg.signal_strength < 1.0 {
                let r = geo.unit_in(&mut rng, geo.signal_block());
                add_scaled(&mut v, &r, 1.0 - cfg.signal_strength);
            }
            add_scaled(&mut v, &geo.gaussian_in(&mut rng, geo.signal_block(), cfg.noise), 1.0);
            add_scaled(&mut v, &geo.gaussian_in(&mut rng, geo.nuisance.clone(), cfg.nuisance), 1.0);
            if linalg::norm(&v) == 0.0 {
                v = structured(t);
            }
            frames.insert(id.clone(), &v)?;
            frame_ids.push(id);
        }

        examples.push(StoryboardExample {
            example_id: format!("ex{i:06}"),
            movie_id: format!("movie{movie:05}"),
            synopsis_text: words.join(" "),
            text_id,
            gt_variants: vec![frame_ids.clone()],
            frame_ids,
        });
    }

    Corpus::new(examples, texts, frames)
}

/// Angle of `v` inside the story plane, in `[0, 2pi)`.
pub fn plane_angle(v: &[f64]) -> f64 {
    v[1].atan2(v[0]).rem_euclid(2.0 * PI)
}
