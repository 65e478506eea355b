//! End-to-end evaluation runs: every ordering strategy over a test split,
//! under both the oracle-candidate ordering protocol and retrieve-and-order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    order_contextual_partial, order_cumulative_partial, order_dynamic, order_naive, order_sliding_partial,
    segment_text, DefaultEmbedder, SegmentEmbedder, DEFAULT_BEAM_WIDTH, DEFAULT_SEGMENTATION_LIMIT,
};
use crate::data::{Corpus, StoryboardExample};
use crate::error::{Error, Result};
use crate::eval::{
    bucket_report, recall_at_k, retrieve_and_order_score, stable_hash, tau_best, EvalReport,
    ExampleResult, PoolBuilder, RecallRow,
};
use crate::nn::{RerankModel, RetrievalHead};
use crate::ordering::{order_rerank, order_vq_trans, DecodeOptions, OrderingResult, PredictionRecord};
use crate::retrieval::retrieve_topk;
use crate::vq::Codebook;
use crate::nn::OrdererModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Naive,
    Sliding,
    Cumulative,
    Dynamic,
    Contextual,
    VqTrans,
    Rerank,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Naive,
        Strategy::Sliding,
        Strategy::Cumulative,
        Strategy::Dynamic,
        Strategy::Contextual,
        Strategy::VqTrans,
        Strategy::Rerank,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Naive => "naive",
            Strategy::Sliding => "sliding",
            Strategy::Cumulative => "cumulative",
            Strategy::Dynamic => "dynamic",
            Strategy::Contextual => "contextual",
            Strategy::VqTrans => "vq-trans",
            Strategy::Rerank => "rerank",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(Strategy::name).collect();
                Error::invalid(format!("unknown strategy {s:?}; expected one of {}", names.join(", ")))
            })
    }

    pub fn needs_orderer(&self) -> bool {
        matches!(self, Strategy::VqTrans)
    }

    pub fn needs_rerank(&self) -> bool {
        matches!(self, Strategy::Rerank)
    }
}

/// Trained models available to a run.
#[derive(Clone, Copy, Default)]
pub struct Models<'a> {
    pub orderer: Option<(&'a OrdererModel, &'a Codebook)>,
    pub rerank: Option<&'a RerankModel>,
    pub head: Option<&'a RetrievalHead>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyOptions {
    pub beam_width: usize,
    pub segmentation_limit: usize,
    pub seed: u64,
}

impl Default for StrategyOptions {
    fn default() -> Self {
        Self {
            beam_width: DEFAULT_BEAM_WIDTH,
            segmentation_limit: DEFAULT_SEGMENTATION_LIMIT,
            seed: 0,
        }
    }
}

/// Whitespace tokens of a synopsis; token `i` pairs with vector `textid#w<i>`.
pub fn synopsis_tokens(example: &StoryboardExample) -> Vec<&str> {
    example.synopsis_text.split_whitespace().collect()
}

fn segment_vectors(
    example: &StoryboardExample,
    n_segments: usize,
    embedder: &dyn SegmentEmbedder,
) -> Result<Vec<Vec<f64>>> {
    let tokens = synopsis_tokens(example);
    segment_text(&tokens, n_segments)?
        .into_iter()
        .map(|span| embedder.embed(&example.text_id, span))
        .collect()
}

/// Orders `candidates` for `example` with one strategy. Text-segment
/// strategies cut the synopsis into `n_segments` pieces and pick at most that
/// many frames; the remaining candidates are appended in their given order, so
/// the result is always a permutation of `candidates`.
pub fn order_candidates(
    strategy: Strategy,
    example: &StoryboardExample,
    candidates: &[String],
    n_segments: usize,
    corpus: &Corpus,
    models: Models<'_>,
    opts: &StrategyOptions,
    decode: DecodeOptions,
) -> Result<OrderingResult> {
    if candidates.is_empty() {
        return Ok(OrderingResult::default());
    }
    let embedder = DefaultEmbedder(&corpus.texts);
    let n_segments = n_segments.clamp(1, candidates.len());
    let result = match strategy {
        Strategy::Naive => {
            let text = corpus.texts.vector(&example.text_id)?;
            order_naive(&text, candidates, &corpus.frames)?
        }
        Strategy::Sliding => {
            order_sliding_partial(&segment_vectors(example, n_segments, &embedder)?, candidates, &corpus.frames)?
        }
        Strategy::Cumulative => {
            order_cumulative_partial(&segment_vectors(example, n_segments, &embedder)?, candidates, &corpus.frames)?
        }
        Strategy::Contextual => order_contextual_partial(
            &segment_vectors(example, n_segments, &embedder)?,
            candidates,
            &corpus.frames,
            opts.beam_width,
        )?,
        Strategy::Dynamic => {
            let n_tokens = synopsis_tokens(example).len();
            order_dynamic(
                &example.text_id,
                n_tokens,
                n_segments,
                candidates,
                &corpus.frames,
                &embedder,
                opts.segmentation_limit,
                opts.seed ^ stable_hash(&example.example_id),
            )?
            .0
        }
        Strategy::VqTrans => {
            let (model, codebook) = models
                .orderer
                .ok_or_else(|| Error::invalid("vq-trans needs a trained orderer checkpoint"))?;
            order_vq_trans(model, codebook, &example.text_id, candidates, &corpus.texts, &corpus.frames, decode)?
        }
        Strategy::Rerank => {
            let model = models
                .rerank
                .ok_or_else(|| Error::invalid("rerank needs a trained re-ranking checkpoint"))?;
            let head = &candidates[..candidates.len().min(model.config.max_frames)];
            order_rerank(model, &example.text_id, head, &corpus.texts, &corpus.frames)?
        }
    };
    Ok(result.complete_from(candidates))
}

/// The ground-truth frames in a seeded order that carries no information
/// about the canonical one.
pub fn shuffled_candidates(example: &StoryboardExample, seed: u64) -> Vec<String> {
    let mut c = example.frame_ids.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&example.example_id));
    c.shuffle(&mut rng);
    c
}

pub struct RunOutput {
    pub report: EvalReport,
    pub predictions: Vec<PredictionRecord>,
}

fn record(example: &StoryboardExample, r: &OrderingResult) -> PredictionRecord {
    PredictionRecord {
        example_id: example.example_id.clone(),
        ordered_ids: r.ordered_ids.clone(),
        stopped_by_eos: r.stopped_by_eos,
    }
}

fn variants(example: &StoryboardExample) -> Vec<Vec<String>> {
    if example.gt_variants.is_empty() {
        vec![example.frame_ids.clone()]
    } else {
        example.gt_variants.clone()
    }
}

/// Ordering protocol: each example's own frames are the candidates and the
/// score is the best tau over its ground-truth variants. The decoder's end
/// token is disabled so every sequence is ordered in full.
pub fn evaluate_ordering(
    strategy: Strategy,
    examples: &[StoryboardExample],
    corpus: &Corpus,
    models: Models<'_>,
    opts: &StrategyOptions,
) -> Result<RunOutput> {
    let mut results = Vec::with_capacity(examples.len());
    let mut predictions = Vec::with_capacity(examples.len());
    let decode = DecodeOptions {
        max_steps: None,
        allow_eos: false,
    };
    for ex in examples {
        let candidates = shuffled_candidates(ex, opts.seed);
        let r = order_candidates(strategy, ex, &candidates, candidates.len(), corpus, models, opts, decode)?;
        let tau = tau_best(&r.ordered_ids, &variants(ex))?;
        results.push(ExampleResult {
            example_id: ex.example_id.clone(),
            length: ex.frame_ids.len(),
            tau,
            k: None,
            r_at_k: None,
            product: None,
        });
        predictions.push(record(ex, &r));
    }
    let mut report = bucket_report(&results);
    report.protocol = "ordering".into();
    report.strategy = strategy.name().into();
    if strategy == Strategy::VqTrans {
        report.notes.push("end token disabled: decoding runs until the candidate pool is empty".into());
    }
    Ok(RunOutput { report, predictions })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieveOrderOptions {
    pub pool_size: usize,
    pub ks: Vec<usize>,
    /// Segments cut from each synopsis for the text-segment strategies,
    /// capped by K and by the token count.
    pub n_segments: usize,
}

/// Retrieve-and-order protocol: retrieve the top K of a pool of ground-truth
/// plus random negative frames, order them, and score R@K, tau@K and their
/// product. Pools draw negatives from `pool_corpus`.
pub fn evaluate_retrieve_order(
    strategy: Strategy,
    examples: &[StoryboardExample],
    pool_corpus: &[StoryboardExample],
    corpus: &Corpus,
    models: Models<'_>,
    opts: &StrategyOptions,
    ro: &RetrieveOrderOptions,
) -> Result<RunOutput> {
    if ro.ks.is_empty() || ro.ks.contains(&0) {
        return Err(Error::invalid("K list must be non-empty and positive"));
    }
    let pools = PoolBuilder::new(pool_corpus);
    let k_max = *ro.ks.iter().max().expect("non-empty");
    let mut results = Vec::new();
    let mut predictions = Vec::new();
    for ex in examples {
        let pool = pools.build(ex, ro.pool_size, opts.seed)?;
        let ranked = retrieve_topk(&ex.text_id, &pool, &corpus.texts, &corpus.frames, models.head, k_max)?.ids();
        let n_tokens = synopsis_tokens(ex).len();
        for &k in &ro.ks {
            let top = &ranked[..k.min(ranked.len())];
            let n_segments = ro.n_segments.min(top.len()).min(n_tokens).max(1);
            let decode = DecodeOptions {
                max_steps: Some(k),
                allow_eos: true,
            };
            let r = order_candidates(strategy, ex, top, n_segments, corpus, models, opts, decode)?;
            let score = retrieve_and_order_score(&r.ordered_ids, ex, k)?;
            results.push(ExampleResult {
                example_id: ex.example_id.clone(),
                length: ex.frame_ids.len(),
                tau: score.tau_at_k,
                k: Some(k),
                r_at_k: Some(score.r_at_k),
                product: Some(score.product),
            });
            if k == k_max {
                predictions.push(record(ex, &r));
            }
        }
    }
    let mut report = bucket_report(&results);
    report.protocol = "retrieve-order".into();
    report.strategy = strategy.name().into();
    report.count = examples.len();
    report.overall_tau = None;
    report.buckets.clear();
    report.notes.push(format!(
        "pool {} (ground truth plus random negatives); tau@K is 1 when fewer than two ground-truth frames are retrieved",
        ro.pool_size
    ));
    Ok(RunOutput { report, predictions })
}

/// Mean R@K of text-to-frame retrieval over per-example pools.
pub fn evaluate_retrieval(
    label: &str,
    examples: &[StoryboardExample],
    pool_corpus: &[StoryboardExample],
    corpus: &Corpus,
    head: Option<&RetrievalHead>,
    pool_size: usize,
    ks: &[usize],
    seed: u64,
) -> Result<RecallRow> {
    if examples.is_empty() {
        return Err(Error::invalid("retrieval evaluation needs at least one example"));
    }
    let pools = PoolBuilder::new(pool_corpus);
    let k_max = ks.iter().copied().max().ok_or_else(|| Error::invalid("K list must be non-empty"))?;
    let mut sums = vec![0.0; ks.len()];
    for ex in examples {
        let pool = pools.build(ex, pool_size, seed)?;
        let ranked = retrieve_topk(&ex.text_id, &pool, &corpus.texts, &corpus.frames, head, k_max)?.ids();
        for (s, &k) in sums.iter_mut().zip(ks) {
            *s += recall_at_k(&ranked, &ex.frame_ids, k)?;
        }
    }
    Ok(RecallRow {
        label: label.to_string(),
        pool_size,
        recall: ks.iter().zip(&sums).map(|(&k, s)| (k, s / examples.len() as f64)).collect(),
    })
}

/// Mean length of the training storyboards, rounded, at least 1.
pub fn mean_storyboard_length(examples: &[StoryboardExample]) -> usize {
    if examples.is_empty() {
        return 1;
    }
    let total: usize = examples.iter().map(StoryboardExample::len).sum();
    ((total as f64 / examples.len() as f64).round() as usize).max(1)
}
